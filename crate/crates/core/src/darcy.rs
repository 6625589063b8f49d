//! Homogenized Neumann problem for the Darcy pressure and the Darcy velocity.
//!
//! Cell-centred finite volumes on the unit square: the flux through an
//! interior face is `K (f - grad p)` with the normal derivative taken across
//! the face and the tangential one averaged from cell-centred values.
//! Boundary fluxes are the prescribed `b . n`.

use crate::cell::{min_eigenvalue, Matrix2};
use crate::error::{Error, Result};
use crate::forcing::VectorField;
use crate::grid::{Comp, Grid, ScalarField, Side, StaggeredField};
use crate::solver::SparseSystem;

/// Homogenized pressure and the derived fields on an `n x n` grid.
#[derive(Debug, Clone)]
pub struct HomogenizedSolution {
    pub grid: Grid,
    pub k: Matrix2,
    pub mu: f64,
    /// Mean-zero pressure at cell centres.
    pub p0: ScalarField,
    /// `f - grad p0` on faces: normal components in `u`/`v`, tangential trace
    /// on the walls.
    pub g: StaggeredField,
    /// Off-component of `f - grad p0` on faces: `g_off.u` is the y-component
    /// at x-faces, `g_off.v` the x-component at y-faces.
    pub g_off: StaggeredField,
    /// `f - grad p0` at cell centres.
    pub g_center: [ScalarField; 2],
    /// Darcy velocity `K (f - grad p0) / mu` on faces.
    pub u0: StaggeredField,
    pub residual: f64,
}

/// Derivative of cell values along `axis` at cell `(i, j)` as a stencil:
/// centred inside, second-order one-sided in the first and last cells.
fn derivative_stencil(n: usize, axis: Comp, i: usize, j: usize, h: f64) -> Vec<(usize, f64)> {
    let (pos, idx): (usize, Box<dyn Fn(usize) -> usize>) = match axis {
        Comp::X => (i, Box::new(move |a| j * n + a)),
        Comp::Y => (j, Box::new(move |b| b * n + i)),
    };
    let s = 1.0 / (2.0 * h);
    if pos == 0 {
        vec![(idx(0), -3.0 * s), (idx(1), 4.0 * s), (idx(2), -s)]
    } else if pos == n - 1 {
        vec![(idx(n - 1), 3.0 * s), (idx(n - 2), -4.0 * s), (idx(n - 3), s)]
    } else {
        vec![(idx(pos + 1), s), (idx(pos - 1), -s)]
    }
}

/// Cell-centred gradient of `p`: centred differences inside, second-order
/// one-sided differences in the first and last cells of each line.
pub fn cell_gradient(p: &ScalarField) -> [ScalarField; 2] {
    let g = p.grid;
    let n = g.nx;
    let mut out = [ScalarField::zeros(g), ScalarField::zeros(g)];
    for j in 0..n {
        for i in 0..n {
            for (ci, c) in Comp::BOTH.into_iter().enumerate() {
                out[ci].data[j * n + i] = derivative_stencil(n, c, i, j, g.h)
                    .into_iter()
                    .map(|(q, coef)| coef * p.data[q])
                    .sum();
            }
        }
    }
    out
}

fn check_spd(k: &Matrix2) -> Result<()> {
    let scale = k[0][0].abs().max(k[1][1].abs());
    if (k[0][1] - k[1][0]).abs() > 1e-12 * scale || !(min_eigenvalue(k) > 0.0) {
        return Err(Error::NotSpd);
    }
    Ok(())
}

/// Net outward flux `sum h b.n` of boundary data sampled on boundary faces.
pub fn boundary_flux(b: &StaggeredField) -> f64 {
    let h = b.grid.h;
    Side::ALL
        .into_iter()
        .map(|side| {
            let n = side.normal()[side.normal_comp().index()];
            b.normal_trace(side).iter().map(|v| h * n * v).sum::<f64>()
        })
        .sum()
}

/// Solves `div K (f - grad p0) = 0`, `n . K (f - grad p0) = b . n` on an
/// `n x n` grid with mean-zero `p0`.
pub fn solve_p0(
    k: Matrix2,
    f: &VectorField,
    b: &VectorField,
    mu: f64,
    n: usize,
) -> Result<HomogenizedSolution> {
    check_spd(&k)?;
    if n < 3 {
        return Err(Error::DimensionMismatch(format!("homogenized grid needs n >= 3, got {n}")));
    }
    let grid = Grid::unit_square(n);
    let h = grid.h;
    let bf = StaggeredField::from_fn(grid, |x, y| b.eval(x, y));
    let net = boundary_flux(&bf);
    if net.abs() > 1e-10 {
        return Err(Error::IncompatibleBoundaryData(net));
    }
    let fc: Vec<[f64; 2]> = (0..n * n)
        .map(|c| {
            let (x, y) = grid.cell_center(c % n, c / n);
            f.eval(x, y)
        })
        .collect();
    let ff = StaggeredField::from_fn(grid, |x, y| f.eval(x, y));

    // Flux through each interior face as (stencil on p, known part).
    // Cell balance rows: h * (F_E - F_W + G_N - G_S) = 0.
    let mut sys = SparseSystem::new(n * n);
    let mut rhs = vec![0.0; n * n];
    for (ci, c) in Comp::BOTH.into_iter().enumerate() {
        let o = Comp::BOTH[1 - ci];
        let (w, hgt) = grid.face_dims(c);
        for j in 0..hgt {
            for i in 0..w {
                let q = grid.face_index(c, i, j);
                let (a, bb) = grid.face_cells(c, i, j);
                match (a, bb) {
                    (Some(a), Some(bb)) => {
                        let mut stencil = vec![(bb, -k[ci][ci] / h), (a, k[ci][ci] / h)];
                        for cell in [a, bb] {
                            let (x, y) = (cell % n, cell / n);
                            for (p, coef) in derivative_stencil(n, o, x, y, h) {
                                stencil.push((p, -0.5 * k[ci][1 - ci] * coef));
                            }
                        }
                        let known = k[ci][ci] * ff.comp(c)[q]
                            + 0.5 * k[ci][1 - ci] * (fc[a][1 - ci] + fc[bb][1 - ci]);
                        for (cell, sign) in [(a, h), (bb, -h)] {
                            for &(p, coef) in &stencil {
                                sys.push(cell, p, sign * coef);
                            }
                            rhs[cell] -= sign * known;
                        }
                    }
                    (Some(a), None) => rhs[a] -= h * bf.comp(c)[q],
                    (None, Some(bb)) => rhs[bb] += h * bf.comp(c)[q],
                    (None, None) => unreachable!("face without cells"),
                }
            }
        }
    }
    sys.push(0, 0, 1.0);
    let sol = sys.factorize()?.solve(&rhs)?;
    let mut p0 = ScalarField { grid, data: sol.x };
    let mean = p0.mean(None);
    p0.data.iter_mut().for_each(|v| *v -= mean);

    // f - grad p0 at centres
    let mut gc = [ScalarField::zeros(grid), ScalarField::zeros(grid)];
    for j in 0..n {
        for i in 0..n {
            let cell = j * n + i;
            for (ci, c) in Comp::BOTH.into_iter().enumerate() {
                let d: f64 = derivative_stencil(n, c, i, j, h)
                    .into_iter()
                    .map(|(p, coef)| coef * p0.data[p])
                    .sum();
                gc[ci].data[cell] = fc[cell][ci] - d;
            }
        }
    }
    let mut g = StaggeredField::zeros(grid);
    let mut g_off = StaggeredField::zeros(grid);
    for (ci, c) in Comp::BOTH.into_iter().enumerate() {
        let (w, hgt) = grid.face_dims(c);
        for j in 0..hgt {
            for i in 0..w {
                let q = grid.face_index(c, i, j);
                let (off, normal) = match grid.face_cells(c, i, j) {
                    (Some(a), Some(bb)) => (
                        0.5 * (gc[1 - ci].data[a] + gc[1 - ci].data[bb]),
                        ff.comp(c)[q] - (p0.data[bb] - p0.data[a]) / h,
                    ),
                    (a, bb) => {
                        // extrapolate from the first two cells inward
                        let (c0, c1) = match (c, a, bb) {
                            (Comp::X, None, _) => (j * n, j * n + 1),
                            (Comp::X, _, None) => (j * n + n - 1, j * n + n - 2),
                            (Comp::Y, None, _) => (i, n + i),
                            (Comp::Y, _, None) => ((n - 1) * n + i, (n - 2) * n + i),
                            (_, Some(_), Some(_)) => unreachable!("interior face"),
                        };
                        let off = 1.5 * gc[1 - ci].data[c0] - 0.5 * gc[1 - ci].data[c1];
                        let normal = (bf.comp(c)[q] - k[ci][1 - ci] * off) / k[ci][ci];
                        (off, normal)
                    }
                };
                g.comp_mut(c)[q] = normal;
                g_off.comp_mut(c)[q] = off;
            }
        }
    }
    // tangential trace at wall vertices, extrapolated from the two nearest
    // faces of the tangential component
    for side in Side::ALL {
        let len = g.wall.side(side).len();
        for t in 0..len {
            let (c, near, far) = match side {
                Side::Left => (Comp::Y, (0, t), (1, t)),
                Side::Right => (Comp::Y, (n - 1, t), (n - 2, t)),
                Side::Bottom => (Comp::X, (t, 0), (t, 1)),
                Side::Top => (Comp::X, (t, n - 1), (t, n - 2)),
            };
            let v = 1.5 * g.at(c, near.0, near.1) - 0.5 * g.at(c, far.0, far.1);
            g.wall.side_mut(side)[t] = v;
        }
    }
    let mut u0 = StaggeredField::zeros(grid);
    for (ci, c) in Comp::BOTH.into_iter().enumerate() {
        for q in 0..grid.face_count(c) {
            u0.comp_mut(c)[q] =
                (k[ci][ci] * g.comp(c)[q] + k[ci][1 - ci] * g_off.comp(c)[q]) / mu;
        }
    }
    Ok(HomogenizedSolution {
        grid,
        k,
        mu,
        p0,
        g,
        g_off,
        g_center: gc,
        u0,
        residual: sol.residual,
    })
}

impl HomogenizedSolution {
    /// Darcy velocity `K (f - grad p0) / mu` on faces.
    pub fn darcy_velocity(&self) -> &StaggeredField {
        &self.u0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::divergence;

    const ISO: Matrix2 = [[0.7, 0.0], [0.0, 0.7]];

    #[test]
    fn zero_data_gives_zero() {
        let s = solve_p0(ISO, &VectorField::Zero, &VectorField::Zero, 1.0, 8).unwrap();
        assert!(s.p0.data.iter().all(|&v| v == 0.0));
        assert_eq!(s.u0.max_abs(), 0.0);
    }

    #[test]
    fn gradient_forcing_is_absorbed_by_pressure() {
        let n = 16;
        let s = solve_p0(ISO, &VectorField::Gradient, &VectorField::Zero, 1.0, n).unwrap();
        let exact = ScalarField::from_fn(s.grid, |x, y| x * x - y * y);
        let m = exact.mean(None);
        for (a, b) in s.p0.data.iter().zip(&exact.data) {
            assert!((a - (b - m)).abs() < 1e-10);
        }
        assert!(s.g.max_abs() < 1e-10);
        assert!(s.u0.max_abs() < 1e-10);
        assert!(s.p0.mean(None).abs() < 1e-12);
    }

    #[test]
    fn rotation_forcing_balances_fluxes() {
        let k = [[0.9, 0.2], [0.2, 0.5]];
        let s = solve_p0(k, &VectorField::Rotation, &VectorField::Zero, 2.0, 12).unwrap();
        assert!(s.residual < 1e-10);
        let d = divergence(&s.u0, None).unwrap();
        assert!(d.data.iter().all(|v| v.abs() < 1e-10));
        for side in Side::ALL {
            assert!(s.u0.normal_trace(side).iter().all(|v| v.abs() < 1e-12));
        }
        // the rotation is not a gradient, so the Darcy velocity is not zero
        assert!(s.u0.max_abs() > 1e-3);
    }

    #[test]
    fn gauge_invariance() {
        let n = 24;
        let k = [[0.9, 0.2], [0.2, 0.5]];
        let base = solve_p0(k, &VectorField::Trig, &VectorField::Zero, 1.0, n).unwrap();
        // psi = x y, grad psi = (y, x)
        let psi = crate::forcing::Monomial { c: 1.0, px: 0, py: 1 };
        let psi2 = crate::forcing::Monomial { c: 1.0, px: 1, py: 0 };
        let trig_plus = VectorField::Polynomial { u: vec![psi], v: vec![psi2] };
        let sum = VectorField::Sum(vec![VectorField::Trig, trig_plus]);
        let shifted = solve_p0(k, &sum, &VectorField::Zero, 1.0, n).unwrap();
        let psi_f = ScalarField::from_fn(base.grid, |x, y| x * y);
        let m = psi_f.mean(None);
        for ((a, b), c) in shifted.p0.data.iter().zip(&base.p0.data).zip(&psi_f.data) {
            assert!((a - b - (c - m)).abs() < 1e-10);
        }
        let du = shifted.u0.sub(&base.u0).unwrap().max_abs();
        assert!(du < 1e-10);
    }

}
