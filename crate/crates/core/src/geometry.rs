//! Unit cell and periodically perforated square.
//!
//! Masks are row-major with row 0 at the bottom: cell `(i, j)` (column `i`,
//! row `j`) lives at index `j * width + i` and covers
//! `[i h, (i+1) h] x [j h, (j+1) h]`.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Unit cell `Y = [0,1]^2` with a grid-aligned solid part.
#[derive(Debug, Clone, PartialEq)]
pub struct CellGeometry {
    m0: usize,
    solid: Vec<bool>,
    fluid_volume: f64,
}

/// JSON form of a cell: `{"m0": 8, "solid": [[0,1,...], ...]}`, row 0 = bottom.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CellSpec {
    pub m0: usize,
    pub solid: Vec<Vec<u8>>,
}

impl CellGeometry {
    /// Validates a solid mask of `m0 * m0` entries.
    pub fn new(m0: usize, solid: Vec<bool>) -> Result<Self> {
        if m0 < 4 {
            return Err(Error::CellTooCoarse(m0));
        }
        if solid.len() != m0 * m0 {
            return Err(Error::BadMask(format!(
                "expected {} entries, got {}",
                m0 * m0,
                solid.len()
            )));
        }
        for j in 0..m0 {
            for i in 0..m0 {
                let ring = i == 0 || j == 0 || i == m0 - 1 || j == m0 - 1;
                if ring && solid[j * m0 + i] {
                    return Err(Error::SolidTouchesCellBoundary(i, j));
                }
            }
        }
        let n_solid = solid.iter().filter(|&&s| s).count();
        if n_solid == m0 * m0 {
            return Err(Error::AllSolid);
        }
        let components = periodic_components(m0, &solid);
        if components != 1 {
            return Err(Error::DisconnectedFluid(components));
        }
        let fluid_volume = 1.0 - n_solid as f64 / (m0 * m0) as f64;
        Ok(Self {
            m0,
            solid,
            fluid_volume,
        })
    }

    /// Builds a cell from rows of 0/1 values (row 0 = bottom).
    pub fn from_spec(spec: &CellSpec) -> Result<Self> {
        if spec.solid.len() != spec.m0 {
            return Err(Error::BadMask(format!(
                "expected {} rows, got {}",
                spec.m0,
                spec.solid.len()
            )));
        }
        let mut mask = Vec::with_capacity(spec.m0 * spec.m0);
        for (j, row) in spec.solid.iter().enumerate() {
            if row.len() != spec.m0 {
                return Err(Error::BadMask(format!("row {j} has {} entries", row.len())));
            }
            mask.extend(row.iter().map(|&v| v != 0));
        }
        Self::new(spec.m0, mask)
    }

    pub fn to_spec(&self) -> CellSpec {
        CellSpec {
            m0: self.m0,
            solid: self
                .solid
                .chunks(self.m0)
                .map(|r| r.iter().map(|&s| s as u8).collect())
                .collect(),
        }
    }

    /// Built-in geometries: `square-half` (central 4x4 block of an 8x8 cell)
    /// and `cross` (plus-shaped obstacle in an 8x8 cell).
    pub fn named(name: &str) -> Result<Self> {
        let m0 = 8;
        let mut solid = vec![false; m0 * m0];
        match name {
            "square-half" => {
                for j in 2..6 {
                    for i in 2..6 {
                        solid[j * m0 + i] = true;
                    }
                }
            }
            "cross" => {
                for k in 1..7 {
                    for w in 3..5 {
                        solid[k * m0 + w] = true;
                        solid[w * m0 + k] = true;
                    }
                }
            }
            other => return Err(Error::Config(format!("unknown geometry `{other}`"))),
        }
        Self::new(m0, solid)
    }

    pub fn m0(&self) -> usize {
        self.m0
    }

    pub fn solid(&self) -> &[bool] {
        &self.solid
    }

    pub fn is_solid(&self, i: usize, j: usize) -> bool {
        self.solid[j * self.m0 + i]
    }

    /// `|Y_f|`, the fluid area fraction.
    pub fn fluid_volume(&self) -> f64 {
        self.fluid_volume
    }

    /// True when the cell has no obstacle at all.
    pub fn no_obstacle(&self) -> bool {
        self.solid.iter().all(|&s| !s)
    }

    /// Solid mask refined to `m` cells per side (`m` a multiple of `m0`).
    pub fn refined_mask(&self, m: usize) -> Result<Vec<bool>> {
        if m == 0 || m % self.m0 != 0 {
            return Err(Error::ResolutionMismatch {
                fine: m,
                cell: self.m0,
            });
        }
        let r = m / self.m0;
        let mut out = vec![false; m * m];
        for j in 0..m {
            for i in 0..m {
                out[j * m + i] = self.is_solid(i / r, j / r);
            }
        }
        Ok(out)
    }

    /// The cell rotated by 90 degrees counterclockwise about its center.
    pub fn rotated(&self) -> Self {
        let m = self.m0;
        let mut solid = vec![false; m * m];
        for j in 0..m {
            for i in 0..m {
                // (x, y) -> (1 - y, x)
                solid[i * m + (m - 1 - j)] = self.solid[j * m + i];
            }
        }
        Self {
            m0: m,
            solid,
            fluid_volume: self.fluid_volume,
        }
    }

    /// Hex SHA-256 of the resolution and mask, used in manifests.
    pub fn hash(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update((self.m0 as u64).to_le_bytes());
        hasher.update(self.solid.iter().map(|&s| s as u8).collect::<Vec<_>>());
        hex::encode(hasher.finalize())
    }
}

/// Number of 4-connected fluid components on the torus.
fn periodic_components(m: usize, solid: &[bool]) -> usize {
    let mut seen = vec![false; m * m];
    let mut count = 0;
    let mut queue = VecDeque::new();
    for start in 0..m * m {
        if solid[start] || seen[start] {
            continue;
        }
        count += 1;
        seen[start] = true;
        queue.push_back(start);
        while let Some(k) = queue.pop_front() {
            let (i, j) = (k % m, k / m);
            let nbrs = [
                ((i + 1) % m, j),
                ((i + m - 1) % m, j),
                (i, (j + 1) % m),
                (i, (j + m - 1) % m),
            ];
            for (a, b) in nbrs {
                let q = b * m + a;
                if !solid[q] && !seen[q] {
                    seen[q] = true;
                    queue.push_back(q);
                }
            }
        }
    }
    count
}

/// The square `[0,1]^2` perforated by `N x N` scaled copies of the cell's
/// solid part, resolved with `M` fine cells per period.
#[derive(Debug, Clone)]
pub struct PerforatedDomain {
    cell: CellGeometry,
    periods: usize,
    cells_per_period: usize,
    solid: Vec<bool>,
}

impl PerforatedDomain {
    pub fn new(cell: &CellGeometry, periods: usize, cells_per_period: usize) -> Result<Self> {
        if periods < 2 {
            return Err(Error::BadPeriod(periods));
        }
        let local = cell.refined_mask(cells_per_period)?;
        let m = cells_per_period;
        let n = periods * m;
        let mut solid = vec![false; n * n];
        for j in 0..n {
            for i in 0..n {
                solid[j * n + i] = local[(j % m) * m + i % m];
            }
        }
        Ok(Self {
            cell: cell.clone(),
            periods,
            cells_per_period,
            solid,
        })
    }

    pub fn cell(&self) -> &CellGeometry {
        &self.cell
    }

    /// `N`, the number of periods per side.
    pub fn periods(&self) -> usize {
        self.periods
    }

    /// `M`, fine cells per period.
    pub fn cells_per_period(&self) -> usize {
        self.cells_per_period
    }

    /// Fine cells per side of the square.
    pub fn n(&self) -> usize {
        self.periods * self.cells_per_period
    }

    pub fn epsilon(&self) -> f64 {
        1.0 / self.periods as f64
    }

    pub fn h(&self) -> f64 {
        1.0 / self.n() as f64
    }

    pub fn solid(&self) -> &[bool] {
        &self.solid
    }

    pub fn is_solid(&self, i: usize, j: usize) -> bool {
        self.solid[j * self.n() + i]
    }

    pub fn solid_fraction(&self) -> f64 {
        self.solid.iter().filter(|&&s| s).count() as f64 / self.solid.len() as f64
    }

    /// Number of obstacle copies (one per period cell when the cell has a
    /// solid part).
    pub fn obstacle_count(&self) -> usize {
        if self.cell.no_obstacle() {
            0
        } else {
            self.periods * self.periods
        }
    }

    /// Index `(a, b)` of the period cell containing fine cell `(i, j)`.
    pub fn period_cell_of(&self, i: usize, j: usize) -> (usize, usize) {
        (i / self.cells_per_period, j / self.cells_per_period)
    }

    /// Cells whose center lies within sup-norm distance `rho` of the outer
    /// boundary; `rho` is clamped to `1/2`.
    pub fn boundary_strip(&self, rho: f64) -> Vec<bool> {
        let n = self.n();
        strip_mask(n, rho)
    }
}

/// Strip mask on an `n x n` grid of the unit square.
pub fn strip_mask(n: usize, rho: f64) -> Vec<bool> {
    let rho = rho.min(0.5);
    let h = 1.0 / n as f64;
    let tol = 1e-12 * h;
    let mut mask = vec![false; n * n];
    for j in 0..n {
        for i in 0..n {
            let ring = i.min(j).min(n - 1 - i).min(n - 1 - j);
            mask[j * n + i] = (ring as f64 + 0.5) * h <= rho + tol;
        }
    }
    mask
}
