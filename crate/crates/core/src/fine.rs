//! The eps-scaled Stokes problem on the perforated square, its pressure
//! extension, and the Poincare and energy probes.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forcing::VectorField;
use crate::geometry::PerforatedDomain;
use crate::grid::{
    self, boundary_samples, boundary_trace_norm, gradient_energy, l2_norm, l2_norm_staggered,
    Grid, MacLayout, ScalarField, Side, StaggeredField,
};
use crate::stokes::{StokesData, StokesSystem};

/// Factorized fine-scale Stokes operator `-eps^2 mu lap + grad`, `div` on
/// one perforated domain. Serves the main solve and the boundary
/// correctors, which share the matrix.
#[derive(Debug)]
pub struct FineSolver {
    domain: PerforatedDomain,
    mu: f64,
    system: StokesSystem,
}

/// Discrete `(u_eps, p_eps)` with the pressure extension.
#[derive(Debug, Clone)]
pub struct FineSolution {
    pub epsilon: f64,
    /// Zero in the solid, equal to the boundary data on the outer faces.
    pub velocity: StaggeredField,
    /// Mean zero over the fluid cells, zero in the solid.
    pub pressure: ScalarField,
    /// `p_eps` on fluid cells, the fluid average of its period cell on solid cells.
    pub extended: ScalarField,
    /// `||grad u_eps||` over the fluid.
    pub grad_norm: f64,
    pub residual: f64,
    /// Largest `|div u_eps|` over fluid cells.
    pub div_defect: f64,
}

impl FineSolver {
    pub fn new(domain: &PerforatedDomain, mu: f64) -> Result<Self> {
        let layout = MacLayout::new(Grid::unit_square(domain.n()), domain.solid().to_vec())?;
        let nu = domain.epsilon().powi(2) * mu;
        let system = StokesSystem::new(&layout, nu)?;
        Ok(Self {
            domain: domain.clone(),
            mu,
            system,
        })
    }

    pub fn domain(&self) -> &PerforatedDomain {
        &self.domain
    }

    pub fn mu(&self) -> f64 {
        self.mu
    }

    pub fn layout(&self) -> &MacLayout {
        self.system.layout()
    }

    pub fn grid(&self) -> Grid {
        self.system.layout().grid
    }

    pub fn system(&self) -> &StokesSystem {
        &self.system
    }

    /// Solves with forcing `f` and outer boundary data `b`, both sampled on
    /// the grid.
    pub fn solve(&self, f: &VectorField, b: &VectorField) -> Result<FineSolution> {
        let g = self.grid();
        let data = StokesData {
            forcing: StaggeredField::from_fn(g, |x, y| f.eval(x, y)),
            boundary: StaggeredField::from_fn(g, |x, y| b.eval(x, y)),
            divergence: None,
        };
        self.solve_data(&data)
    }

    /// Solves with pre-sampled data.
    pub fn solve_data(&self, data: &StokesData) -> Result<FineSolution> {
        let sol = self.system.solve(data)?;
        let div_defect = self.system.divergence_defect(&sol, data)?;
        let extended = extend_pressure(&sol.pressure, &self.domain);
        let grad_norm = gradient_energy(&sol.velocity, self.layout()).sqrt();
        Ok(FineSolution {
            epsilon: self.domain.epsilon(),
            velocity: sol.velocity,
            pressure: sol.pressure,
            extended,
            grad_norm,
            residual: sol.residual,
            div_defect,
        })
    }
}

/// Convenience wrapper: factorize and solve once.
pub fn solve_fine(
    domain: &PerforatedDomain,
    f: &VectorField,
    b: &VectorField,
    mu: f64,
) -> Result<FineSolution> {
    FineSolver::new(domain, mu)?.solve(f, b)
}

/// Extends a fluid pressure into the obstacles: each solid cell takes the
/// mean of the fluid values in its period cell.
pub fn extend_pressure(p: &ScalarField, domain: &PerforatedDomain) -> ScalarField {
    let n = domain.n();
    let periods = domain.periods();
    let m = domain.cells_per_period();
    let mut sum = vec![0.0; periods * periods];
    let mut count = vec![0usize; periods * periods];
    for j in 0..n {
        for i in 0..n {
            if !domain.is_solid(i, j) {
                let cell = (j / m) * periods + i / m;
                sum[cell] += p.data[j * n + i];
                count[cell] += 1;
            }
        }
    }
    let mut out = p.clone();
    for j in 0..n {
        for i in 0..n {
            if domain.is_solid(i, j) {
                let cell = (j / m) * periods + i / m;
                out.data[j * n + i] = sum[cell] / count[cell] as f64;
            }
        }
    }
    out
}

impl FineSolution {
    /// `||u|| / (eps ||grad u||)` over the fluid.
    pub fn poincare_ratio(&self) -> Result<f64> {
        if self.grad_norm <= 1e-12 {
            return Err(Error::ZeroField);
        }
        Ok(l2_norm_staggered(&self.velocity, None) / (self.epsilon * self.grad_norm))
    }

    /// Writes `u.bin`, `p.bin`, `P.bin` and `manifest.json` into `dir`.
    pub fn save(&self, dir: &Path, manifest: &FineManifest) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        grid::write_staggered(&dir.join("u.bin"), &self.velocity)?;
        grid::write_scalar(&dir.join("p.bin"), &self.pressure)?;
        grid::write_scalar(&dir.join("P.bin"), &self.extended)?;
        grid::write_atomic(
            &dir.join("manifest.json"),
            serde_json::to_string_pretty(manifest)?.as_bytes(),
        )
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FineManifest {
    pub epsilon: f64,
    pub m: usize,
    pub geometry_hash: String,
    pub forcing: String,
    pub boundary: String,
    pub residual: f64,
}

/// `||h||_{H^1(dOmega)}` from face-midpoint samples, with tangential
/// derivatives by centred differences along each side (one-sided at the
/// ends of a side).
pub fn boundary_h1_norm(h: &StaggeredField) -> f64 {
    let step = h.grid.h;
    let samples = boundary_samples(h);
    let mut deriv = 0.0;
    for side in Side::ALL {
        let vals: Vec<[f64; 2]> = samples
            .iter()
            .filter(|s| s.0 == side)
            .map(|s| [s.1, s.2])
            .collect();
        let len = vals.len();
        for k in 0..len {
            let (a, b, span) = if k == 0 {
                (vals[0], vals[1], step)
            } else if k == len - 1 {
                (vals[len - 2], vals[len - 1], step)
            } else {
                (vals[k - 1], vals[k + 1], 2.0 * step)
            };
            for c in 0..2 {
                let d = (b[c] - a[c]) / span;
                deriv += step * d * d;
            }
        }
    }
    (boundary_trace_norm(h).powi(2) + deriv).sqrt()
}

/// Ratio of the solution size to the data size for the energy estimate:
/// `(eps ||grad u|| + ||u|| + ||p||) / (||f|| + ||h||_{L2} + eps sqrt(||h||_{L2} ||h||_{H1}))`.
pub fn energy_probe(
    domain: &PerforatedDomain,
    f: &VectorField,
    h: &VectorField,
    mu: f64,
) -> Result<f64> {
    let solver = FineSolver::new(domain, mu)?;
    energy_probe_with(&solver, f, h)
}

/// [`energy_probe`] on an already factorized solver.
pub fn energy_probe_with(solver: &FineSolver, f: &VectorField, h: &VectorField) -> Result<f64> {
    let g = solver.grid();
    let eps = solver.domain().epsilon();
    let fluid = solver.layout().fluid_mask();
    let fs = StaggeredField::from_fn(g, |x, y| f.eval(x, y));
    let hs = StaggeredField::from_fn(g, |x, y| h.eval(x, y));
    let h_l2 = boundary_trace_norm(&hs);
    let denom = l2_norm_staggered(&fs, Some(&fluid)) + h_l2 + eps * (h_l2 * boundary_h1_norm(&hs)).sqrt();
    if denom == 0.0 {
        return Err(Error::ZeroData);
    }
    let sol = solver.solve(f, h)?;
    let num = eps * sol.grad_norm
        + l2_norm_staggered(&sol.velocity, None)
        + l2_norm(&sol.pressure, Some(&fluid));
    Ok(num / denom)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::CellGeometry;
    use crate::grid::divergence;

    fn domain(n: usize, m: usize) -> PerforatedDomain {
        PerforatedDomain::new(&CellGeometry::named("square-half").unwrap(), n, m).unwrap()
    }

    #[test]
    fn gradient_forcing_gives_pressure_only() {
        let d = domain(4, 8);
        let s = solve_fine(&d, &VectorField::Gradient, &VectorField::Zero, 1.0).unwrap();
        assert!(s.velocity.max_abs() < 1e-9);
        let g = ScalarField::from_fn(s.pressure.grid, |x, y| x * x - y * y);
        let fluid: Vec<bool> = d.solid().iter().map(|s| !s).collect();
        let mean = g.mean(Some(&fluid));
        for (k, &f) in fluid.iter().enumerate() {
            if f {
                assert!((s.pressure.data[k] - (g.data[k] - mean)).abs() < 1e-9);
            }
        }
        assert_eq!(s.poincare_ratio().unwrap_err(), Error::ZeroField);
    }

    #[test]
    fn zero_data_gives_zero() {
        let d = domain(2, 8);
        let s = solve_fine(&d, &VectorField::Zero, &VectorField::Zero, 1.0).unwrap();
        assert_eq!(s.velocity.max_abs(), 0.0);
        assert!(s.pressure.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rotation_solution_is_discretely_exact() {
        let d = domain(4, 8);
        let s = solve_fine(&d, &VectorField::Rotation, &VectorField::Zero, 1.0).unwrap();
        assert!(s.residual <= 1e-10);
        assert!(s.div_defect <= 1e-10);
        let fluid: Vec<bool> = d.solid().iter().map(|s| !s).collect();
        assert!(s.pressure.mean(Some(&fluid)).abs() <= 1e-10);
        // extended pressure: mean zero on the square, constant on each block
        assert!(s.extended.mean(None).abs() <= 1e-10);
        let n = d.n();
        for pj in 0..4 {
            for pi in 0..4 {
                let vals: Vec<f64> = (0..8 * 8)
                    .map(|k| (pi * 8 + k % 8, pj * 8 + k / 8))
                    .filter(|&(i, j)| d.is_solid(i, j))
                    .map(|(i, j)| s.extended.data[j * n + i])
                    .collect();
                assert!(vals.iter().all(|&v| v == vals[0]));
            }
        }
        // no flux through the boundary
        let d_all = divergence(&s.velocity, None).unwrap();
        let total: f64 = d_all.data.iter().sum::<f64>() * d.h() * d.h();
        assert!(total.abs() < 1e-12);
        assert!(s.poincare_ratio().unwrap() > 0.0);
    }

    #[test]
    fn extension_bookkeeping() {
        let d = domain(2, 8);
        let s = solve_fine(&d, &VectorField::Trig, &VectorField::Zero, 1.0).unwrap();
        let h2 = d.h() * d.h();
        let fluid: Vec<bool> = d.solid().iter().map(|s| !s).collect();
        let vol = d.cell().fluid_volume();
        let whole: f64 = s.extended.data.iter().sum::<f64>() * h2;
        let fluid_sum: f64 = s
            .pressure
            .data
            .iter()
            .zip(&fluid)
            .filter(|(_, &f)| f)
            .map(|(v, _)| v)
            .sum::<f64>()
            * h2;
        assert!((whole - fluid_sum * (1.0 + (1.0 - vol) / vol)).abs() < 1e-12);
        // constant pressure extends to a constant
        let c = ScalarField {
            grid: s.pressure.grid,
            data: fluid.iter().map(|&f| if f { 2.5 } else { 0.0 }).collect(),
        };
        assert!(extend_pressure(&c, &d).data.iter().all(|&v| v == 2.5));
    }

    #[test]
    fn energy_probe_is_homogeneous() {
        let d = domain(4, 8);
        let h = VectorField::CenteredRotation;
        let r1 = energy_probe(&d, &VectorField::Trig, &h, 1.0).unwrap();
        let r2 = energy_probe(
            &d,
            &VectorField::Scaled(2.0, Box::new(VectorField::Trig)),
            &VectorField::Scaled(2.0, Box::new(h)),
            1.0,
        )
        .unwrap();
        assert!((r1 - r2).abs() < 1e-10 * r1);
        assert_eq!(
            energy_probe(&d, &VectorField::Zero, &VectorField::Zero, 1.0).unwrap_err(),
            Error::ZeroData
        );
    }

    #[test]
    fn incompatible_boundary_data_rejected() {
        let d = domain(2, 8);
        let b = VectorField::Polynomial {
            u: vec![crate::forcing::Monomial { c: 1.0, px: 1, py: 0 }],
            v: vec![],
        };
        assert!(matches!(
            solve_fine(&d, &VectorField::Zero, &b, 1.0),
            Err(Error::IncompatibleBoundaryData(_))
        ));
    }
}
