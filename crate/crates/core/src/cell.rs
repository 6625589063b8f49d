//! Periodic cell problems: velocity correctors `W_j`, permeability, flux
//! potentials and divergence correctors.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{CellGeometry, CellSpec};
use crate::grid::{
    self, gradient_inner, Comp, Grid, MacLayout, ScalarField, StaggeredField,
};
use crate::solver::PeriodicPoisson;
use crate::stokes::{StokesData, StokesSystem};

pub type Matrix2 = [[f64; 2]; 2];

/// Everything computed on the unit cell at one resolution.
///
/// Index conventions: `w[j]` solves the cell problem with forcing `e_j`;
/// its component `i` is `W_j^i`. `chi[i][k]` has divergence
/// `-W_k^i + K_avg[i][k] / |Y_f|` on fluid cells.
#[derive(Debug, Clone)]
pub struct CellSolution {
    pub geometry: CellGeometry,
    pub layout: MacLayout,
    pub w: [StaggeredField; 2],
    pub pi: [ScalarField; 2],
    /// `h^2 sum W_j^i` (row `i`, column `j`).
    pub k_avg: Matrix2,
    /// Dirichlet-form permeability, exactly symmetric. Used downstream.
    pub k_energy: Matrix2,
    /// Flux potentials `f_j` on the face grids: `f[j].u` is `f_j^1` at
    /// x-faces, `f[j].v` is `f_j^2` at y-faces.
    pub f: [StaggeredField; 2],
    /// `phi_{1j}^2` at cell vertices `(i h, j h)`.
    pub phi: [ScalarField; 2],
    pub chi: [[StaggeredField; 2]; 2],
    pub pi2: [[ScalarField; 2]; 2],
    /// Largest relative residual over all linear solves.
    pub max_residual: f64,
}

impl CellSolution {
    pub fn m(&self) -> usize {
        self.layout.grid.nx
    }

    pub fn h(&self) -> f64 {
        self.layout.grid.h
    }

    /// Permeability used downstream.
    pub fn k(&self) -> Matrix2 {
        self.k_energy
    }

    /// `phi_{ij}^l` at vertices. Zero when `i == l`; the `(2, 1)` entry is the
    /// exact negation of the `(1, 2)` entry.
    pub fn phi_component(&self, i: usize, j: usize, l: usize) -> ScalarField {
        match (i, l) {
            (0, 1) => self.phi[j].clone(),
            (1, 0) => {
                let mut p = self.phi[j].clone();
                p.data.iter_mut().for_each(|v| *v = -*v);
                p
            }
            _ => ScalarField::zeros(self.layout.grid),
        }
    }
}

/// Solves both cell problems and all derived quantities at `m` cells per
/// side.
pub fn solve_cell(geometry: &CellGeometry, m: usize) -> Result<CellSolution> {
    let mask = geometry.refined_mask(m)?;
    let grid = Grid::periodic(m);
    let layout = MacLayout::new(grid, mask)?;
    let system = StokesSystem::new(&layout, 1.0).map_err(|e| e.at_stage("cell"))?;
    let mut max_residual = 0.0f64;

    let mut w = Vec::new();
    let mut pi = Vec::new();
    for j in 0..2 {
        let mut force = StaggeredField::zeros(grid);
        force.comp_mut(Comp::BOTH[j]).iter_mut().for_each(|v| *v = 1.0);
        let sol = system
            .solve(&StokesData::forcing_only(force))
            .map_err(|e| e.at_stage("cell"))?;
        max_residual = max_residual.max(sol.residual);
        w.push(sol.velocity);
        pi.push(sol.pressure);
    }
    let w: [StaggeredField; 2] = [w[0].clone(), w[1].clone()];
    let pi: [ScalarField; 2] = [pi[0].clone(), pi[1].clone()];

    let (k_avg, k_energy) = permeability(&w, &layout)?;
    let f = potentials(&w, &k_avg).map_err(|e| e.at_stage("flux potentials"))?;
    let phi = [vertex_phi(&f[0]), vertex_phi(&f[1])];

    let fluid_volume = geometry.fluid_volume();
    let mut chi: Vec<StaggeredField> = Vec::new();
    let mut pi2: Vec<ScalarField> = Vec::new();
    for i in 0..2 {
        for k in 0..2 {
            let target = chi_divergence(&w[k], Comp::BOTH[i], k_avg[i][k], fluid_volume, &layout);
            let data = StokesData {
                forcing: StaggeredField::zeros(grid),
                boundary: StaggeredField::zeros(grid),
                divergence: Some(target),
            };
            let sol = system.solve(&data).map_err(|e| e.at_stage("divergence correctors"))?;
            max_residual = max_residual.max(sol.residual);
            chi.push(sol.velocity);
            pi2.push(sol.pressure);
        }
    }
    Ok(CellSolution {
        geometry: geometry.clone(),
        layout,
        w,
        pi,
        k_avg,
        k_energy,
        f,
        phi,
        chi: [[chi[0].clone(), chi[1].clone()], [chi[2].clone(), chi[3].clone()]],
        pi2: [[pi2[0].clone(), pi2[1].clone()], [pi2[2].clone(), pi2[3].clone()]],
        max_residual,
    })
}

/// `(K_avg, K_energy)` for correctors `w` on `layout`.
///
/// `K_energy` is accumulated for the upper triangle only and mirrored, so it
/// is symmetric bit for bit. Fails with `NotPositiveDefinite` when its
/// smaller eigenvalue is not positive.
pub fn permeability(w: &[StaggeredField; 2], layout: &MacLayout) -> Result<(Matrix2, Matrix2)> {
    let h2 = layout.grid.h * layout.grid.h;
    let mut k_avg = [[0.0; 2]; 2];
    for (i, c) in Comp::BOTH.into_iter().enumerate() {
        for j in 0..2 {
            k_avg[i][j] = h2 * w[j].comp(c).iter().sum::<f64>();
        }
    }
    let k11 = gradient_inner(&w[0], &w[0], layout);
    let k12 = gradient_inner(&w[0], &w[1], layout);
    let k22 = gradient_inner(&w[1], &w[1], layout);
    let k_energy = [[k11, k12], [k12, k22]];
    let lo = min_eigenvalue(&k_energy);
    if !(lo > 0.0) {
        return Err(Error::NotPositiveDefinite(lo));
    }
    Ok((k_avg, k_energy))
}

/// Smaller eigenvalue of a symmetric 2x2 matrix.
pub fn min_eigenvalue(k: &Matrix2) -> f64 {
    let tr = k[0][0] + k[1][1];
    let disc = ((k[0][0] - k[1][1]).powi(2) / 4.0 + k[0][1] * k[1][0]).max(0.0);
    tr / 2.0 - disc.sqrt()
}

/// Solves `lap f_j^l = W_j^l - K_avg[l][j]` on the torus of each face grid.
///
/// The x-face and y-face grids of a periodic MAC layout are shifted copies
/// of the cell grid, so one factorized Poisson operator serves all four.
fn potentials(w: &[StaggeredField; 2], k_avg: &Matrix2) -> Result<[StaggeredField; 2]> {
    let grid = w[0].grid;
    let poisson = PeriodicPoisson::new(grid)?;
    let mut out = [StaggeredField::zeros(grid), StaggeredField::zeros(grid)];
    for j in 0..2 {
        for (l, c) in Comp::BOTH.into_iter().enumerate() {
            let rhs = ScalarField {
                grid,
                data: w[j].comp(c).iter().map(|v| v - k_avg[l][j]).collect(),
            };
            let sol = poisson.solve(&rhs)?;
            *out[j].comp_mut(c) = sol.data;
        }
    }
    Ok(out)
}

/// `phi_{1j}^2 = d_1 f_j^2 - d_2 f_j^1` at vertices, by backward differences.
fn vertex_phi(f: &StaggeredField) -> ScalarField {
    let g = f.grid;
    let m = g.nx;
    let mut out = ScalarField::zeros(g);
    for j in 0..m {
        for i in 0..m {
            let im = (i + m - 1) % m;
            let jm = (j + m - 1) % m;
            let d1 = (f.v[j * m + i] - f.v[j * m + im]) / g.h;
            let d2 = (f.u[j * m + i] - f.u[jm * m + i]) / g.h;
            out.data[j * m + i] = d1 - d2;
        }
    }
    out
}

/// Discrete divergence of a flux potential field at face locations:
/// `(sum_i d_i phi_{ij}^l)` for `l` = 1 (x-faces) and 2 (y-faces).
pub fn phi_divergence(phi: &ScalarField) -> StaggeredField {
    let g = phi.grid;
    let m = g.nx;
    let mut out = StaggeredField::zeros(g);
    for j in 0..m {
        for i in 0..m {
            let ip = (i + 1) % m;
            let jp = (j + 1) % m;
            // l = 2: d_1 phi_{1j}^2 at the y-face ((i+1/2)h, jh)
            out.v[j * m + i] = (phi.data[j * m + ip] - phi.data[j * m + i]) / g.h;
            // l = 1: d_2 phi_{2j}^1 = -d_2 phi_{1j}^2 at the x-face (ih, (j+1/2)h)
            out.u[j * m + i] = -(phi.data[jp * m + i] - phi.data[j * m + i]) / g.h;
        }
    }
    out
}

/// Cell-centred value of `W_k^i`: mean of the two faces of component `i`.
pub fn face_to_center(w: &StaggeredField, c: Comp) -> ScalarField {
    let g = w.grid;
    let mut out = ScalarField::zeros(g);
    for j in 0..g.ny {
        for i in 0..g.nx {
            let (a, b) = match c {
                Comp::X => (w.at(c, i, j), w.at(c, (i + 1) % g.nx, j)),
                Comp::Y => (w.at(c, i, j), w.at(c, i, (j + 1) % g.ny)),
            };
            out.data[g.cell_index(i, j)] = 0.5 * (a + b);
        }
    }
    out
}

/// Divergence target of `chi[i][k]`: `-W_k^i + K_avg[i][k] / |Y_f|` on fluid cells.
pub fn chi_divergence(
    wk: &StaggeredField,
    c: Comp,
    k: f64,
    fluid_volume: f64,
    layout: &MacLayout,
) -> ScalarField {
    let mut d = face_to_center(wk, c);
    for (v, &s) in d.data.iter_mut().zip(&layout.solid) {
        *v = if s { 0.0 } else { -*v + k / fluid_volume };
    }
    d
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    m0: usize,
    m: usize,
    geometry_hash: String,
    fluid_volume: f64,
    k_energy: Matrix2,
    k_avg: Matrix2,
    max_residual: f64,
    cell: CellSpec,
}

fn matrix_csv(k: &Matrix2) -> String {
    format!("{:e},{:e}\n{:e},{:e}\n", k[0][0], k[0][1], k[1][0], k[1][1])
}

/// Reads a 2x2 matrix written as two comma-separated rows.
pub fn read_matrix_csv(path: &Path) -> Result<Matrix2> {
    let text = std::fs::read_to_string(path)?;
    let rows: Vec<Vec<f64>> = text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            l.split(',')
                .map(|t| {
                    t.trim()
                        .parse::<f64>()
                        .map_err(|e| Error::Config(format!("{}: {e}", path.display())))
                })
                .collect::<Result<Vec<f64>>>()
        })
        .collect::<Result<_>>()?;
    if rows.len() != 2 || rows.iter().any(|r| r.len() != 2) {
        return Err(Error::Config(format!("{}: expected a 2x2 matrix", path.display())));
    }
    Ok([[rows[0][0], rows[0][1]], [rows[1][0], rows[1][1]]])
}

const FIELD_NAMES: [&str; 2] = ["1", "2"];

impl CellSolution {
    /// Writes `K.csv`, `K_avg.csv`, the fields and `manifest.json` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        grid::write_atomic(&dir.join("K.csv"), matrix_csv(&self.k_energy).as_bytes())?;
        grid::write_atomic(&dir.join("K_avg.csv"), matrix_csv(&self.k_avg).as_bytes())?;
        for j in 0..2 {
            let s = FIELD_NAMES[j];
            grid::write_staggered(&dir.join(format!("W{s}.bin")), &self.w[j])?;
            grid::write_scalar(&dir.join(format!("pi{s}.bin")), &self.pi[j])?;
            grid::write_staggered(&dir.join(format!("f{s}.bin")), &self.f[j])?;
            grid::write_scalar(&dir.join(format!("phi{s}.bin")), &self.phi[j])?;
            for k in 0..2 {
                let t = FIELD_NAMES[k];
                grid::write_staggered(&dir.join(format!("chi{s}{t}.bin")), &self.chi[j][k])?;
                grid::write_scalar(&dir.join(format!("pi2_{s}{t}.bin")), &self.pi2[j][k])?;
            }
        }
        let manifest = Manifest {
            m0: self.geometry.m0(),
            m: self.m(),
            geometry_hash: self.geometry.hash(),
            fluid_volume: self.geometry.fluid_volume(),
            k_energy: self.k_energy,
            k_avg: self.k_avg,
            max_residual: self.max_residual,
            cell: self.geometry.to_spec(),
        };
        grid::write_atomic(
            &dir.join("manifest.json"),
            serde_json::to_string_pretty(&manifest)?.as_bytes(),
        )
    }

    /// Reads a directory written by [`CellSolution::save`]. The permeability
    /// comes from `K.csv`, so hand edits there are honoured.
    pub fn load(dir: &Path) -> Result<Self> {
        let manifest: Manifest =
            serde_json::from_str(&std::fs::read_to_string(dir.join("manifest.json"))?)?;
        let geometry = CellGeometry::from_spec(&manifest.cell)?;
        let layout = MacLayout::new(Grid::periodic(manifest.m), geometry.refined_mask(manifest.m)?)?;
        let sf = |name: String| grid::read_staggered(&dir.join(name));
        let sc = |name: String| grid::read_scalar(&dir.join(name));
        let [a, b] = FIELD_NAMES;
        Ok(Self {
            k_energy: read_matrix_csv(&dir.join("K.csv"))?,
            k_avg: read_matrix_csv(&dir.join("K_avg.csv"))?,
            w: [sf(format!("W{a}.bin"))?, sf(format!("W{b}.bin"))?],
            pi: [sc(format!("pi{a}.bin"))?, sc(format!("pi{b}.bin"))?],
            f: [sf(format!("f{a}.bin"))?, sf(format!("f{b}.bin"))?],
            phi: [sc(format!("phi{a}.bin"))?, sc(format!("phi{b}.bin"))?],
            chi: [
                [sf(format!("chi{a}{a}.bin"))?, sf(format!("chi{a}{b}.bin"))?],
                [sf(format!("chi{b}{a}.bin"))?, sf(format!("chi{b}{b}.bin"))?],
            ],
            pi2: [
                [sc(format!("pi2_{a}{a}.bin"))?, sc(format!("pi2_{a}{b}.bin"))?],
                [sc(format!("pi2_{b}{a}.bin"))?, sc(format!("pi2_{b}{b}.bin"))?],
            ],
            max_residual: manifest.max_residual,
            geometry,
            layout,
        })
    }
}
