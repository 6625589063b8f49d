//! Two-scale approximation and its correctors on the perforated square.
//!
//! With `g = f - grad p0` from the homogenized problem, the leading term is
//! `u_osc = W(x/eps) g / mu`. The interior corrector `Phi_eps` repairs its
//! divergence away from the boundary, and two Stokes solves with boundary
//! data only (`Psi_t`, `Psi_n`) repair its trace on the outer boundary up to
//! a constant normal defect `gamma n`.

use crate::cell::CellSolution;
use crate::darcy::{cell_gradient, HomogenizedSolution};
use crate::error::{Error, Result};
use crate::fine::{FineSolution, FineSolver};
use crate::forcing::VectorField;
use crate::geometry::PerforatedDomain;
use crate::grid::{
    divergence, for_each_edge, gradient_energy, l2_norm, l2_norm_staggered, Comp, EdgeEnd, Grid,
    ScalarField, Side, StaggeredField,
};
use crate::stokes::StokesData;

/// Maps a fine face to the corresponding face of the periodic cell grid.
fn cell_face(m: usize, i: usize, j: usize) -> usize {
    (j % m) * m + (i % m)
}

fn check_resolution(cell: &CellSolution, domain: &PerforatedDomain) -> Result<()> {
    if cell.m() != domain.cells_per_period() {
        return Err(Error::ResolutionMismatch {
            fine: domain.cells_per_period(),
            cell: cell.m(),
        });
    }
    Ok(())
}

/// `(g_1, g_2)` at a face of component `c`.
fn g_at_face(hs: &HomogenizedSolution, c: Comp, q: usize) -> [f64; 2] {
    match c {
        Comp::X => [hs.g.u[q], hs.g_off.u[q]],
        Comp::Y => [hs.g_off.v[q], hs.g.v[q]],
    }
}

/// `(g_1, g_2)` at wall vertex `t` of `side`: the tangential part is the
/// stored trace, the normal part the mean of the boundary faces next to the
/// vertex.
fn g_at_vertex(hs: &HomogenizedSolution, side: Side, t: usize) -> [f64; 2] {
    let n = hs.grid.nx;
    let c = side.normal_comp();
    let fixed = match side {
        Side::Left | Side::Bottom => 0,
        Side::Right | Side::Top => n,
    };
    let lo = t.saturating_sub(1);
    let hi = t.min(n - 1);
    let face = |s: usize| match c {
        Comp::X => hs.g.at(c, fixed, s),
        Comp::Y => hs.g.at(c, s, fixed),
    };
    let normal = 0.5 * (face(lo) + face(hi));
    let tangential = hs.g.wall.side(side)[t];
    match c {
        Comp::X => [normal, tangential],
        Comp::Y => [tangential, normal],
    }
}

/// `W(x/eps) g(x) / mu` on faces and on the wall trace.
pub fn oscillating_velocity(
    cell: &CellSolution,
    hs: &HomogenizedSolution,
    domain: &PerforatedDomain,
) -> Result<StaggeredField> {
    check_resolution(cell, domain)?;
    let grid = hs.grid;
    let m = cell.m();
    let mut out = StaggeredField::zeros(grid);
    for c in Comp::BOTH {
        let (w, hgt) = grid.face_dims(c);
        for j in 0..hgt {
            for i in 0..w {
                let q = grid.face_index(c, i, j);
                let cq = cell_face(m, i, j);
                let g = g_at_face(hs, c, q);
                out.comp_mut(c)[q] =
                    (cell.w[0].comp(c)[cq] * g[0] + cell.w[1].comp(c)[cq] * g[1]) / hs.mu;
            }
        }
    }
    // Tangential trace at wall vertices: the tangential component of W at a
    // vertex is the mean of the two cell faces on either side of it.
    for side in Side::ALL {
        let len = out.wall.side(side).len();
        for t in 0..len {
            let tc = match side.normal_comp() {
                Comp::X => Comp::Y,
                Comp::Y => Comp::X,
            };
            // the two faces of component tc straddling the vertex, in cell
            // coordinates: one on each side of the wall
            let (a, b) = match side {
                Side::Left | Side::Right => {
                    ((t % m) * m + (m - 1), (t % m) * m)
                }
                Side::Bottom | Side::Top => ((m - 1) * m + (t % m), t % m),
            };
            let g = g_at_vertex(hs, side, t);
            let mut v = 0.0;
            for k in 0..2 {
                let wk = cell.w[k].comp(tc);
                v += 0.5 * (wk[a] + wk[b]) * g[k];
            }
            out.wall.side_mut(side)[t] = v / hs.mu;
        }
    }
    Ok(out)
}

/// Discrete mollifier with radius `eps / 8` and kernel `(1 - |y/r|^2)^3`,
/// normalized to unit mass; near the boundary only available cells enter
/// and the weights are renormalized.
#[derive(Debug, Clone)]
pub struct Mollifier {
    radius: f64,
    offsets: Vec<(isize, isize, f64)>,
}

impl Mollifier {
    pub fn new(epsilon: f64, h: f64) -> Result<Self> {
        let radius = epsilon / 8.0;
        if radius < 2.0 * h * (1.0 - 1e-12) {
            return Err(Error::KernelTooSmall { radius, h });
        }
        let reach = (radius / h).ceil() as isize;
        let mut offsets = Vec::new();
        for b in -reach..=reach {
            for a in -reach..=reach {
                let r2 = ((a * a + b * b) as f64) * h * h / (radius * radius);
                if r2 < 1.0 {
                    offsets.push((a, b, (1.0 - r2).powi(3)));
                }
            }
        }
        let mass: f64 = offsets.iter().map(|o| o.2).sum();
        offsets.iter_mut().for_each(|o| o.2 /= mass);
        Ok(Self { radius, offsets })
    }

    pub fn radius(&self) -> f64 {
        self.radius
    }

    /// Interior weights; they sum to one.
    pub fn weights(&self) -> impl Iterator<Item = f64> + '_ {
        self.offsets.iter().map(|o| o.2)
    }

    pub fn apply(&self, field: &ScalarField) -> ScalarField {
        let g = field.grid;
        let (nx, ny) = (g.nx as isize, g.ny as isize);
        let mut out = ScalarField::zeros(g);
        for j in 0..ny {
            for i in 0..nx {
                let (mut s, mut wsum) = (0.0, 0.0);
                for &(a, b, w) in &self.offsets {
                    let (x, y) = (i + a, j + b);
                    if x < 0 || y < 0 || x >= nx || y >= ny {
                        continue;
                    }
                    s += w * field.data[(y * nx + x) as usize];
                    wsum += w;
                }
                out.data[(j * nx + i) as usize] = s / wsum;
            }
        }
        out
    }
}

/// `mollify` with a fresh kernel.
pub fn mollify(field: &ScalarField, epsilon: f64) -> Result<ScalarField> {
    Ok(Mollifier::new(epsilon, field.grid.h)?.apply(field))
}

/// Cut-off: 0 within `2 eps` of the boundary, 1 beyond `3 eps`, linear in
/// the sup-norm distance in between.
pub fn cutoff_at(x: f64, y: f64, epsilon: f64) -> f64 {
    let d = x.min(1.0 - x).min(y).min(1.0 - y);
    ((d - 2.0 * epsilon) / epsilon).clamp(0.0, 1.0)
}

/// Cut-off sampled at cell centres.
pub fn cutoff(domain: &PerforatedDomain) -> ScalarField {
    let eps = domain.epsilon();
    ScalarField::from_fn(Grid::unit_square(domain.n()), |x, y| cutoff_at(x, y, eps))
}

/// Interior divergence corrector
/// `Phi^j = eps eta chi_{lk}^j(x/eps) d_l S(g_k)`, with `chi_{lk}` the
/// cell field whose divergence is `-W_k^l + K_avg[l][k] / |Y_f|`.
pub fn build_phi_eps(
    cell: &CellSolution,
    hs: &HomogenizedSolution,
    domain: &PerforatedDomain,
) -> Result<StaggeredField> {
    check_resolution(cell, domain)?;
    let eps = domain.epsilon();
    let grid = hs.grid;
    let m = cell.m();
    let moll = Mollifier::new(eps, grid.h)?;
    // d_l S(g_k) at cell centres: ds[k][l]
    let ds: Vec<[ScalarField; 2]> = (0..2)
        .map(|k| cell_gradient(&moll.apply(&hs.g_center[k])))
        .collect();
    let mut out = StaggeredField::zeros(grid);
    for c in Comp::BOTH {
        let (w, hgt) = grid.face_dims(c);
        for j in 0..hgt {
            for i in 0..w {
                let (x, y) = grid.face_position(c, i, j);
                let eta = cutoff_at(x, y, eps);
                if eta == 0.0 {
                    continue;
                }
                let (a, b) = grid.face_cells(c, i, j);
                let (a, b) = (a.unwrap_or_else(|| b.unwrap()), b.unwrap_or_else(|| a.unwrap()));
                let cq = cell_face(m, i, j);
                let mut v = 0.0;
                for l in 0..2 {
                    for k in 0..2 {
                        let d = 0.5 * (ds[k][l].data[a] + ds[k][l].data[b]);
                        v += cell.chi[l][k].comp(c)[cq] * d;
                    }
                }
                out.comp_mut(c)[grid.face_index(c, i, j)] = eps * eta * v / hs.mu;
            }
        }
    }
    Ok(out)
}

/// All correctors of one fine-scale configuration.
#[derive(Debug, Clone)]
pub struct CorrectorSet {
    pub u_osc: StaggeredField,
    pub phi_eps: StaggeredField,
    pub psi_t: StaggeredField,
    pub q_t: ScalarField,
    pub psi_n: StaggeredField,
    pub q_n: ScalarField,
    /// Mean of `b.n - u_osc.n` over the boundary.
    pub gamma: f64,
    pub residual: f64,
}

/// Boundary data of the tangential corrector: the tangential part of
/// `b - u_osc` on the walls, zero normal components.
pub fn tangential_data(b: &StaggeredField, u_osc: &StaggeredField) -> StaggeredField {
    let mut out = StaggeredField::zeros(b.grid);
    for side in Side::ALL {
        let t: Vec<f64> = b
            .wall
            .side(side)
            .iter()
            .zip(u_osc.wall.side(side))
            .map(|(x, y)| x - y)
            .collect();
        *out.wall.side_mut(side) = t;
    }
    out
}

/// Boundary data of the normal corrector `(b.n - u_osc.n - gamma) n` and
/// `gamma`, the boundary mean of `b.n - u_osc.n`.
pub fn normal_data(b: &StaggeredField, u_osc: &StaggeredField) -> (StaggeredField, f64) {
    let grid = b.grid;
    let h = grid.h;
    let mut total = 0.0;
    let mut length = 0.0;
    for side in Side::ALL {
        let n = side.normal()[side.normal_comp().index()];
        for (bv, uv) in b.normal_trace(side).iter().zip(u_osc.normal_trace(side)) {
            total += h * n * (bv - uv);
            length += h;
        }
    }
    let gamma = total / length;
    let mut out = StaggeredField::zeros(grid);
    let n = grid.nx;
    for side in Side::ALL {
        let c = side.normal_comp();
        let sign = side.normal()[c.index()];
        let fixed = match side {
            Side::Left | Side::Bottom => 0,
            Side::Right | Side::Top => n,
        };
        for s in 0..n {
            let (i, j) = match c {
                Comp::X => (fixed, s),
                Comp::Y => (s, fixed),
            };
            let q = grid.face_index(c, i, j);
            let un = sign * (b.comp(c)[q] - u_osc.comp(c)[q]);
            out.comp_mut(c)[q] = sign * (un - gamma);
        }
    }
    (out, gamma)
}

/// Builds `u_osc`, `Phi_eps`, `Psi_t`, `Psi_n` and `gamma`, reusing the
/// factorized fine operator for both boundary correctors.
pub fn build_correctors(
    solver: &FineSolver,
    cell: &CellSolution,
    hs: &HomogenizedSolution,
    b: &VectorField,
) -> Result<CorrectorSet> {
    let domain = solver.domain();
    let grid = solver.grid();
    let u_osc = oscillating_velocity(cell, hs, domain)?;
    let phi_eps = build_phi_eps(cell, hs, domain)?;
    let bs = StaggeredField::from_fn(grid, |x, y| b.eval(x, y));
    let t = solver
        .system()
        .solve(&StokesData::boundary_only(tangential_data(&bs, &u_osc)))
        .map_err(|e| e.at_stage("tangential corrector"))?;
    let (nd, gamma) = normal_data(&bs, &u_osc);
    let nsol = solver
        .system()
        .solve(&StokesData::boundary_only(nd))
        .map_err(|e| e.at_stage("normal corrector"))?;
    Ok(CorrectorSet {
        u_osc,
        phi_eps,
        psi_t: t.velocity,
        q_t: t.pressure,
        psi_n: nsol.velocity,
        q_n: nsol.pressure,
        gamma,
        residual: t.residual.max(nsol.residual),
    })
}

impl CorrectorSet {
    /// `||div(Phi_eps + u_osc)||` over the fluid cells.
    pub fn div_repair(&self, solid: &[bool]) -> Result<f64> {
        let d = divergence(&self.phi_eps.add(&self.u_osc)?, Some(solid))?;
        let fluid: Vec<bool> = solid.iter().map(|s| !s).collect();
        Ok(l2_norm(&d, Some(&fluid)))
    }
}

/// Residual velocity `u_eps - (u_osc + Phi + Psi_t + Psi_n)` and pressure
/// `p_eps - p0 - q_t - q_n - eps pi(x/eps) g / mu` (fluid cells only).
pub fn residual_field(
    fine: &FineSolution,
    set: &CorrectorSet,
    cell: &CellSolution,
    hs: &HomogenizedSolution,
    domain: &PerforatedDomain,
) -> Result<(StaggeredField, ScalarField)> {
    check_resolution(cell, domain)?;
    let approx = set.u_osc.add(&set.phi_eps)?.add(&set.psi_t)?.add(&set.psi_n)?;
    let v = fine.velocity.sub(&approx)?;
    let grid = hs.grid;
    let n = grid.nx;
    let m = cell.m();
    let eps = domain.epsilon();
    let mut q = ScalarField::zeros(grid);
    for j in 0..n {
        for i in 0..n {
            let k = j * n + i;
            if domain.is_solid(i, j) {
                continue;
            }
            let ck = (j % m) * m + i % m;
            let osc = (cell.pi[0].data[ck] * hs.g_center[0].data[k]
                + cell.pi[1].data[ck] * hs.g_center[1].data[k])
                / hs.mu;
            q.data[k] = fine.pressure.data[k]
                - hs.p0.data[k]
                - set.q_t.data[k]
                - set.q_n.data[k]
                - eps * osc;
        }
    }
    Ok((v, q))
}

/// `||eps grad u_eps - (grad W)(x/eps) g / mu||` over the square.
///
/// Summed over the edges of the velocity stencil graph. A half-spacing edge
/// to the outer wall is compared with the full periodic difference of `W`
/// across the same cell boundary.
pub fn gradient_error(
    fine: &FineSolution,
    solver: &FineSolver,
    cell: &CellSolution,
    hs: &HomogenizedSolution,
) -> Result<f64> {
    let domain = solver.domain();
    check_resolution(cell, domain)?;
    let layout = solver.layout();
    let grid = layout.grid;
    let m = cell.m();
    let eps = domain.epsilon();
    let h = grid.h;
    let u = &fine.velocity;
    let mut total = 0.0;
    let pos = |c: Comp, q: usize| {
        let w = grid.face_dims(c).0;
        (q % w, q / w)
    };
    for_each_edge(layout, |c, k, _, end| {
        let (i, j) = pos(c, k);
        let g = g_at_face(hs, c, k);
        let ck = cell_face(m, i, j);
        let wv = |jj: usize, cq: usize| cell.w[jj].comp(c)[cq];
        let du = layout.edge_value(u, c, end) - u.comp(c)[k];
        let (spacing, dw): (f64, [f64; 2]) = match end {
            EdgeEnd::Face(q) => {
                let (a, b) = pos(c, q);
                let cq = cell_face(m, a, b);
                (h, [wv(0, cq) - wv(0, ck), wv(1, cq) - wv(1, ck)])
            }
            EdgeEnd::ObstacleWall => (0.5 * h, [-wv(0, ck), -wv(1, ck)]),
            EdgeEnd::DomainWall(side, _) => {
                let (a, b) = match side {
                    Side::Left => ((i + m - 1) % m, j % m),
                    Side::Right => ((i + 1) % m, j % m),
                    Side::Bottom => (i % m, (j + m - 1) % m),
                    Side::Top => (i % m, (j + 1) % m),
                };
                let cq = b * m + a;
                // the full periodic difference spans h, not h/2
                let s = 0.5;
                (0.5 * h, [s * (wv(0, cq) - wv(0, ck)), s * (wv(1, cq) - wv(1, ck))])
            }
        };
        let dw_g = (dw[0] * g[0] + dw[1] * g[1]) / hs.mu;
        // area h * spacing, gradients difference / spacing, scaled by eps / h
        let diff = eps * (du - dw_g) / spacing;
        total += h * spacing * diff * diff;
    });
    Ok(total.sqrt())
}

/// Norms reported per configuration.
pub fn velocity_l2(u: &StaggeredField) -> f64 {
    l2_norm_staggered(u, None)
}

/// `eps ||grad v|| + ||v||` over the fluid.
pub fn energy_norm(v: &StaggeredField, solver: &FineSolver) -> f64 {
    solver.domain().epsilon() * gradient_energy(v, solver.layout()).sqrt() + l2_norm_staggered(v, None)
}
