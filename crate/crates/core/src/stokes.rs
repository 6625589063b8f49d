//! Saddle-point assembly for the scaled Stokes system on a MAC layout.
//!
//! Unknowns are the interior face velocities and the fluid-cell pressures.
//! Rows are scaled by `h` so the gradient/divergence blocks carry `+-1`
//! entries and the matrix is symmetric:
//!
//! ```text
//! [ (nu/h) L   G     ] [u]   [ h f + lifted walls ]
//! [  G^T     e0 e0^T ] [p] = [ -h g + lifted walls ]
//! ```
//!
//! The pressure is determined up to a constant; the rank-one block on the
//! first pressure fixes that constant without a dense border row (a border
//! row ruins the fill-reducing ordering of the sparse LU). Compatibility of
//! the data is checked before the solve and the fluid mean is removed after.

use crate::error::{Error, Result};
use crate::grid::{
    divergence, Comp, EdgeEnd, FaceKind, Grid, MacLayout, ScalarField, StaggeredField,
};
use crate::solver::{Factorization, SparseSystem};

/// Right-hand side data of one Stokes solve.
#[derive(Debug, Clone)]
pub struct StokesData {
    /// Body force sampled on faces (only interior faces are read).
    pub forcing: StaggeredField,
    /// Boundary values: normal components on outer faces plus the
    /// tangential wall trace. Ignored on periodic layouts.
    pub boundary: StaggeredField,
    /// Prescribed divergence on fluid cells (zero when `None`).
    pub divergence: Option<ScalarField>,
}

impl StokesData {
    pub fn forcing_only(forcing: StaggeredField) -> Self {
        let grid = forcing.grid;
        Self {
            forcing,
            boundary: StaggeredField::zeros(grid),
            divergence: None,
        }
    }

    pub fn boundary_only(boundary: StaggeredField) -> Self {
        let grid = boundary.grid;
        Self {
            forcing: StaggeredField::zeros(grid),
            boundary,
            divergence: None,
        }
    }
}

/// Velocity (zero in the solid), pressure (zero in the solid, mean zero over
/// the fluid) and diagnostics of one solve.
#[derive(Debug, Clone)]
pub struct StokesSolution {
    pub velocity: StaggeredField,
    pub pressure: ScalarField,
    /// Relative residual of the full linear system.
    pub residual: f64,
    /// Raw value of the gauge pressure before mean removal (zero for
    /// compatible data).
    pub gauge: f64,
}

/// Assembled and factorized Stokes operator `-nu lap u + grad p`,
/// `div u`, reusable for any number of right-hand sides.
#[derive(Debug)]
pub struct StokesSystem {
    layout: MacLayout,
    viscosity: f64,
    face_unknown: [Vec<Option<usize>>; 2],
    faces: Vec<(Comp, usize)>,
    cell_unknown: Vec<Option<usize>>,
    cells: Vec<usize>,
    matrix: SparseSystem,
    factor: Option<Factorization>,
}

impl StokesSystem {
    /// Builds the saddle-point matrix without factorizing it.
    pub fn assemble(layout: &MacLayout, viscosity: f64) -> Result<Self> {
        let g = layout.grid;
        let cell_unknown: Vec<Option<usize>> = {
            let mut next = 0;
            layout
                .solid
                .iter()
                .map(|&s| {
                    (!s).then(|| {
                        next += 1;
                        next - 1
                    })
                })
                .collect()
        };
        let n_cells = cell_unknown.iter().flatten().count();
        if n_cells == 0 {
            return Err(Error::EmptyFluid);
        }
        if g.periodic && n_cells == g.cells() {
            return Err(Error::IncompatiblePeriodicSystem);
        }
        let mut faces = Vec::new();
        let mut face_unknown = [
            vec![None; g.face_count(Comp::X)],
            vec![None; g.face_count(Comp::Y)],
        ];
        for c in Comp::BOTH {
            for (i, j) in layout.interior_faces(c) {
                let k = g.face_index(c, i, j);
                face_unknown[c.index()][k] = Some(faces.len());
                faces.push((c, k));
            }
        }
        let n_vel = faces.len();
        let mut cells = Vec::with_capacity(n_cells);
        for (k, u) in cell_unknown.iter().enumerate() {
            if u.is_some() {
                cells.push(k);
            }
        }
        let dim = n_vel + n_cells;
        let mut m = SparseSystem::new(dim);
        let visc = viscosity / g.h;
        for c in Comp::BOTH {
            for (i, j) in layout.interior_faces(c) {
                let k = g.face_index(c, i, j);
                let row = face_unknown[c.index()][k].expect("interior face");
                let mut diag = 0.0;
                for (w, end) in layout.stencil_edges(c, i, j) {
                    diag += w;
                    if let EdgeEnd::Face(q) = end {
                        if let Some(col) = face_unknown[c.index()][q] {
                            m.push(row, col, -visc * w);
                        }
                    }
                }
                m.push(row, row, visc * diag);
                let (a, b) = g.face_cells(c, i, j);
                let (a, b) = (a.expect("interior"), b.expect("interior"));
                m.push(row, n_vel + cell_unknown[b].expect("fluid"), 1.0);
                m.push(row, n_vel + cell_unknown[a].expect("fluid"), -1.0);
                m.push(n_vel + cell_unknown[b].expect("fluid"), row, 1.0);
                m.push(n_vel + cell_unknown[a].expect("fluid"), row, -1.0);
            }
        }
        // gauge: a unit diagonal on the first pressure forces it to zero for
        // compatible data; the fluid mean is removed after the solve
        m.push(n_vel, n_vel, 1.0);
        Ok(Self {
            layout: layout.clone(),
            viscosity,
            face_unknown,
            faces,
            cell_unknown,
            cells,
            matrix: m,
            factor: None,
        })
    }

    /// Assembles and factorizes.
    pub fn new(layout: &MacLayout, viscosity: f64) -> Result<Self> {
        let mut s = Self::assemble(layout, viscosity)?;
        s.factor = Some(s.matrix.factorize()?);
        Ok(s)
    }

    pub fn layout(&self) -> &MacLayout {
        &self.layout
    }

    pub fn viscosity(&self) -> f64 {
        self.viscosity
    }

    pub fn matrix(&self) -> &SparseSystem {
        &self.matrix
    }

    /// Number of velocity unknowns, pressure unknowns, total dimension.
    pub fn counts(&self) -> (usize, usize, usize) {
        (self.faces.len(), self.cells.len(), self.matrix.dim())
    }

    /// Assembles the right-hand side for `data`, checking compatibility.
    pub fn rhs(&self, data: &StokesData) -> Result<Vec<f64>> {
        let g = self.layout.grid;
        let n_vel = self.faces.len();
        let mut b = vec![0.0; self.matrix.dim()];
        let visc = self.viscosity / g.h;
        let fixed = |c: Comp, q: usize| -> f64 {
            let (i, j) = (q % g.face_dims(c).0, q / g.face_dims(c).0);
            match self.layout.face_kind(c, i, j) {
                FaceKind::Boundary => data.boundary.comp(c)[q],
                _ => 0.0,
            }
        };
        for c in Comp::BOTH {
            for (i, j) in self.layout.interior_faces(c) {
                let k = g.face_index(c, i, j);
                let row = self.face_unknown[c.index()][k].expect("interior");
                let mut v = g.h * data.forcing.comp(c)[k];
                for (w, end) in self.layout.stencil_edges(c, i, j) {
                    let known = match end {
                        EdgeEnd::Face(q) if self.face_unknown[c.index()][q].is_some() => continue,
                        EdgeEnd::Face(q) => fixed(c, q),
                        EdgeEnd::ObstacleWall => 0.0,
                        EdgeEnd::DomainWall(s, idx) => data.boundary.wall.side(s)[idx],
                    };
                    v += visc * w * known;
                }
                b[row] = v;
            }
        }
        // continuity: -(u_E - u_W + v_N - v_S) = -h g, known faces lifted
        let mut net = 0.0;
        for (p, &cell) in self.cells.iter().enumerate() {
            let (i, j) = (cell % g.nx, cell / g.nx);
            let target = data.divergence.as_ref().map_or(0.0, |d| d.data[cell]);
            net += g.h * g.h * target;
            let mut v = -g.h * target;
            for (c, fi, fj, sign) in cell_faces(&g, i, j) {
                let q = g.face_index(c, fi, fj);
                if self.face_unknown[c.index()][q].is_none() {
                    v += sign * fixed(c, q);
                }
            }
            b[n_vel + p] = v;
        }
        if !g.periodic {
            let mut flux = 0.0;
            for side in crate::grid::Side::ALL {
                let n = side.normal()[side.normal_comp().index()];
                for val in data.boundary.normal_trace(side) {
                    flux += g.h * n * val;
                }
            }
            if (flux - net).abs() > 1e-10 {
                return Err(Error::IncompatibleBoundaryData(flux - net));
            }
        } else if net.abs() > 1e-10 {
            return Err(Error::IncompatibleDivergenceData(net));
        }
        Ok(b)
    }

    /// Solves for one right-hand side.
    pub fn solve(&self, data: &StokesData) -> Result<StokesSolution> {
        let factor = self
            .factor
            .as_ref()
            .ok_or_else(|| Error::SingularMatrix("system not factorized".into()))?;
        let b = self.rhs(data)?;
        let sol = factor.solve(&b)?;
        Ok(self.unpack(&sol.x, data, sol.residual))
    }

    fn unpack(&self, x: &[f64], data: &StokesData, residual: f64) -> StokesSolution {
        let g = self.layout.grid;
        let n_vel = self.faces.len();
        let mut velocity = StaggeredField::zeros(g);
        if !g.periodic {
            for c in Comp::BOTH {
                let (w, hgt) = g.face_dims(c);
                for j in 0..hgt {
                    for i in 0..w {
                        if self.layout.face_kind(c, i, j) == FaceKind::Boundary {
                            let q = g.face_index(c, i, j);
                            velocity.comp_mut(c)[q] = data.boundary.comp(c)[q];
                        }
                    }
                }
            }
            velocity.wall = data.boundary.wall.clone();
        }
        for (u, &(c, k)) in self.faces.iter().enumerate() {
            velocity.comp_mut(c)[k] = x[u];
        }
        let mut pressure = ScalarField::zeros(g);
        for (p, &cell) in self.cells.iter().enumerate() {
            pressure.data[cell] = x[n_vel + p];
        }
        // remove round-off from the mean
        let mask = self.layout.fluid_mask();
        let mean = pressure.mean(Some(&mask));
        for (v, &f) in pressure.data.iter_mut().zip(&mask) {
            if f {
                *v -= mean;
            }
        }
        StokesSolution {
            velocity,
            pressure,
            residual,
            gauge: x[n_vel],
        }
    }

    /// Largest `|div u - g|` over fluid cells.
    pub fn divergence_defect(&self, sol: &StokesSolution, data: &StokesData) -> Result<f64> {
        let d = divergence(&sol.velocity, Some(&self.layout.solid))?;
        let mut worst = 0.0f64;
        for (k, (&v, &s)) in d.data.iter().zip(&self.layout.solid).enumerate() {
            if s {
                continue;
            }
            let target = data.divergence.as_ref().map_or(0.0, |t| t.data[k]);
            worst = worst.max((v - target).abs());
        }
        Ok(worst)
    }

    pub fn is_pressure_unknown(&self, cell: usize) -> bool {
        self.cell_unknown[cell].is_some()
    }
}

/// Faces of cell `(i, j)` with the sign they enter `-h div u`.
fn cell_faces(g: &Grid, i: usize, j: usize) -> [(Comp, usize, usize, f64); 4] {
    let (ie, jn) = if g.periodic {
        ((i + 1) % g.nx, (j + 1) % g.ny)
    } else {
        (i + 1, j + 1)
    };
    // moving a known value to the right-hand side flips its sign:
    // -(u_E - u_W) = rhs  =>  -u_E(unknown) ... = rhs + u_E(known) - u_W(known)
    [
        (Comp::X, ie, j, 1.0),
        (Comp::X, i, j, -1.0),
        (Comp::Y, i, jn, 1.0),
        (Comp::Y, i, j, -1.0),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{CellGeometry, PerforatedDomain};

    fn small_cell() -> MacLayout {
        let c = CellGeometry::new(4, {
            let mut s = vec![false; 16];
            for j in 1..3 {
                for i in 1..3 {
                    s[j * 4 + i] = true;
                }
            }
            s
        })
        .unwrap();
        MacLayout::new(Grid::periodic(4), c.refined_mask(4).unwrap()).unwrap()
    }

    #[test]
    fn unknown_counts_match_enumeration() {
        let layout = small_cell();
        let sys = StokesSystem::assemble(&layout, 1.0).unwrap();
        // brute force: faces whose two cells are fluid, on the 4x4 torus
        let solid = |i: usize, j: usize| (1..3).contains(&(i % 4)) && (1..3).contains(&(j % 4));
        let mut faces = 0;
        for j in 0..4 {
            for i in 0..4 {
                if !solid((i + 3) % 4, j) && !solid(i, j) {
                    faces += 1;
                }
                if !solid(i, (j + 3) % 4) && !solid(i, j) {
                    faces += 1;
                }
            }
        }
        let cells = (0..16).filter(|k| !solid(k % 4, k / 4)).count();
        assert_eq!(sys.counts(), (faces, cells, faces + cells));
        assert_eq!((faces, cells), (20, 12));
    }

    #[test]
    fn no_obstacle_periodic_rejected() {
        let layout = MacLayout::fluid(Grid::periodic(4));
        assert_eq!(
            StokesSystem::assemble(&layout, 1.0).unwrap_err(),
            Error::IncompatiblePeriodicSystem
        );
        let layout = MacLayout::new(Grid::periodic(4), vec![true; 16]).unwrap();
        assert_eq!(StokesSystem::assemble(&layout, 1.0).unwrap_err(), Error::EmptyFluid);
    }

    #[test]
    fn matrix_is_symmetric() {
        let layout = small_cell();
        let sys = StokesSystem::assemble(&layout, 0.3).unwrap();
        let t = sys.matrix().triplets();
        let map: std::collections::HashMap<(usize, usize), f64> =
            t.iter().map(|&(r, c, v)| ((r, c), v)).collect();
        for (&(r, c), &v) in &map {
            assert_eq!(map.get(&(c, r)), Some(&v));
        }
    }

    #[test]
    fn zero_data_gives_zero() {
        let g = Grid::unit_square(8);
        let layout = MacLayout::fluid(g);
        let sys = StokesSystem::new(&layout, 1.0).unwrap();
        let sol = sys.solve(&StokesData::forcing_only(StaggeredField::zeros(g))).unwrap();
        assert_eq!(sol.velocity.max_abs(), 0.0);
        assert!(sol.pressure.data.iter().all(|&p| p == 0.0));
    }

    #[test]
    fn periodic_cell_is_incompressible() {
        let layout = small_cell();
        let sys = StokesSystem::new(&layout, 1.0).unwrap();
        let f = StaggeredField::from_fn(layout.grid, |_, _| [1.0, 0.0]);
        let data = StokesData::forcing_only(f);
        let sol = sys.solve(&data).unwrap();
        assert!(sol.residual <= 1e-10);
        assert!(sys.divergence_defect(&sol, &data).unwrap() <= 1e-10);
        let mask = layout.fluid_mask();
        assert!(sol.pressure.mean(Some(&mask)).abs() <= 1e-10);
        assert!(sol.gauge.abs() < 1e-10);
        // flow goes along the forcing
        let flux: f64 = sol.velocity.u.iter().sum();
        assert!(flux > 0.0);
    }

    #[test]
    fn dirichlet_driven_flow_and_scaling() {
        let cell = CellGeometry::named("square-half").unwrap();
        let d = PerforatedDomain::new(&cell, 2, 8).unwrap();
        let g = Grid::unit_square(d.n());
        let layout = MacLayout::new(g, d.solid().to_vec()).unwrap();
        let f = StaggeredField::from_fn(g, |x, y| [(3.0 * y).sin(), x * x]);
        let mut b = StaggeredField::from_fn(g, |x, y| [y - 0.5, 0.5 - x]);
        // rotation has zero flux on each side; keep it exact
        b.v.iter_mut().zip(0..).for_each(|_| {});
        let data = StokesData {
            forcing: f.clone(),
            boundary: b.clone(),
            divergence: None,
        };
        let nu = 0.25;
        let sys = StokesSystem::new(&layout, nu).unwrap();
        let sol = sys.solve(&data).unwrap();
        assert!(sol.residual <= 1e-10);
        assert!(sys.divergence_defect(&sol, &data).unwrap() <= 1e-10);
        let mask = layout.fluid_mask();
        assert!(sol.pressure.mean(Some(&mask)).abs() < 1e-10);
        // boundary values are carried exactly
        for side in crate::grid::Side::ALL {
            assert_eq!(sol.velocity.normal_trace(side), b.normal_trace(side));
        }
        // scaling: nu -> s nu, f -> s f, b unchanged scales p by s, keeps u
        let s = 3.0;
        let sys2 = StokesSystem::new(&layout, s * nu).unwrap();
        let data2 = StokesData {
            forcing: f.scaled(s),
            boundary: b,
            divergence: None,
        };
        let sol2 = sys2.solve(&data2).unwrap();
        let du = sol2.velocity.sub(&sol.velocity).unwrap().max_abs();
        assert!(du < 1e-10);
        for (a, b) in sol2.pressure.data.iter().zip(&sol.pressure.data) {
            assert!((a - s * b).abs() < 1e-9 * (1.0 + b.abs()));
        }
    }

    #[test]
    fn incompatible_boundary_flux_rejected() {
        let g = Grid::unit_square(6);
        let layout = MacLayout::fluid(g);
        let sys = StokesSystem::new(&layout, 1.0).unwrap();
        let b = StaggeredField::from_fn(g, |_, _| [1.0, 1.0]);
        let mut b2 = b.clone();
        // inflow on the left only
        for (k, v) in b2.u.iter_mut().enumerate() {
            if k % 7 != 0 {
                *v = 0.0;
            }
        }
        b2.v.iter_mut().for_each(|v| *v = 0.0);
        assert!(matches!(
            sys.solve(&StokesData::boundary_only(b2)),
            Err(Error::IncompatibleBoundaryData(_))
        ));
        // uniform flow is compatible and reproduced exactly
        let sol = sys.solve(&StokesData::boundary_only(b)).unwrap();
        assert!(sol.velocity.u.iter().all(|v| (v - 1.0).abs() < 1e-10));
    }
}
