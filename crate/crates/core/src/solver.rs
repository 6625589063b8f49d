//! Sparse matrices and direct LU solves, plus the periodic scalar Poisson
//! problem.

use std::fmt::Write as _;
use std::path::Path;

use faer::prelude::*;
use faer::sparse::{SparseColMat, Triplet};

use crate::error::{Error, Result};
use crate::grid::{Grid, ScalarField};

/// Relative residual above which a solve is rejected.
pub const RESIDUAL_LIMIT: f64 = 1e-8;
/// Relative residual at which iterative refinement stops early.
pub const RESIDUAL_TARGET: f64 = 1e-15;

/// Refinement steps after the first solve, at most.
const REFINE_STEPS: usize = 4;

/// Square sparse matrix collected from triplets; duplicates are summed.
#[derive(Debug, Clone, Default)]
pub struct SparseSystem {
    n: usize,
    entries: Vec<(usize, usize, f64)>,
}

impl SparseSystem {
    pub fn new(n: usize) -> Self {
        Self {
            n,
            entries: Vec::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn push(&mut self, row: usize, col: usize, value: f64) {
        debug_assert!(row < self.n && col < self.n);
        if value != 0.0 {
            self.entries.push((row, col, value));
        }
    }

    /// Entries with duplicates merged, sorted by (column, row).
    pub fn triplets(&self) -> Vec<(usize, usize, f64)> {
        let mut e = self.entries.clone();
        e.sort_by_key(|&(r, c, _)| (c, r));
        let mut out: Vec<(usize, usize, f64)> = Vec::with_capacity(e.len());
        for (r, c, v) in e {
            match out.last_mut() {
                Some(last) if last.0 == r && last.1 == c => last.2 += v,
                _ => out.push((r, c, v)),
            }
        }
        out
    }

    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.n];
        for &(r, c, v) in &self.entries {
            y[r] += v * x[c];
        }
        y
    }

    /// Writes `row,col,value` lines for cross-checking in external tools.
    pub fn dump_csv(&self, path: &Path) -> Result<()> {
        let mut s = String::from("row,col,value\n");
        for (r, c, v) in self.triplets() {
            let _ = writeln!(s, "{r},{c},{v:e}");
        }
        std::fs::write(path, s)?;
        Ok(())
    }

    pub fn factorize(&self) -> Result<Factorization> {
        if self.n == 0 {
            return Err(Error::SingularMatrix("empty system".into()));
        }
        let trip: Vec<Triplet<usize, usize, f64>> = self
            .triplets()
            .into_iter()
            .map(|(r, c, v)| Triplet::new(r, c, v))
            .collect();
        let matrix = SparseColMat::<usize, f64>::try_new_from_triplets(self.n, self.n, &trip)
            .map_err(|e| Error::SingularMatrix(format!("{e:?}")))?;
        let lu = matrix
            .as_ref()
            .sp_lu()
            .map_err(|e| Error::SingularMatrix(format!("{e:?}")))?;
        Ok(Factorization {
            n: self.n,
            matrix,
            lu,
        })
    }
}

/// LU factors of a [`SparseSystem`]; immutable and reusable across
/// right-hand sides.
pub struct Factorization {
    n: usize,
    matrix: SparseColMat<usize, f64>,
    lu: faer::sparse::linalg::solvers::Lu<usize, f64>,
}

impl std::fmt::Debug for Factorization {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Factorization").field("n", &self.n).finish()
    }
}

/// Solution vector with its relative residual `||Ax - b|| / ||b||`.
#[derive(Debug, Clone)]
pub struct Solved {
    pub x: Vec<f64>,
    pub residual: f64,
}

impl Factorization {
    pub fn dim(&self) -> usize {
        self.n
    }

    fn apply(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.n];
        let m = self.matrix.as_ref();
        for (c, &xc) in x.iter().enumerate() {
            if xc == 0.0 {
                continue;
            }
            let rows = m.row_idx_of_col_raw(c);
            let vals = m.val_of_col(c);
            for (&r, &v) in rows.iter().zip(vals) {
                y[r] += v * xc;
            }
        }
        y
    }

    fn raw_solve(&self, rhs: &[f64]) -> Vec<f64> {
        let mut col = Col::<f64>::from_fn(self.n, |i| rhs[i]);
        self.lu.solve_in_place(col.as_mat_mut());
        (0..self.n).map(|i| col[i]).collect()
    }

    /// Solves `A x = rhs` with iterative refinement, stopping once the
    /// residual no longer halves. Small relative residuals can still hide
    /// sizeable errors in the constraint rows of a badly scaled saddle
    /// system, so refinement runs past the acceptance threshold.
    pub fn solve(&self, rhs: &[f64]) -> Result<Solved> {
        if rhs.len() != self.n {
            return Err(Error::DimensionMismatch(format!(
                "rhs has {} entries, system {}",
                rhs.len(),
                self.n
            )));
        }
        let bnorm = norm(rhs);
        if bnorm == 0.0 {
            return Ok(Solved {
                x: vec![0.0; self.n],
                residual: 0.0,
            });
        }
        let mut x = self.raw_solve(rhs);
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::SingularMatrix("non-finite solution".into()));
        }
        let mut residual = f64::INFINITY;
        for step in 0..=REFINE_STEPS {
            let ax = self.apply(&x);
            let r: Vec<f64> = rhs.iter().zip(&ax).map(|(b, a)| b - a).collect();
            let previous = residual;
            residual = norm(&r) / bnorm;
            if residual <= RESIDUAL_TARGET || residual > 0.5 * previous || step == REFINE_STEPS {
                break;
            }
            let dx = self.raw_solve(&r);
            x.iter_mut().zip(&dx).for_each(|(a, d)| *a += d);
        }
        if !residual.is_finite() || residual > RESIDUAL_LIMIT {
            return Err(Error::ResidualTooLarge {
                residual,
                threshold: RESIDUAL_LIMIT,
            });
        }
        Ok(Solved { x, residual })
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Factorizes and solves in one go.
pub fn solve_linear(system: &SparseSystem, rhs: &[f64]) -> Result<Solved> {
    system.factorize()?.solve(rhs)
}

/// Mean-zero periodic solution of the 5-point Laplacian `lap f = rhs` on a
/// periodic grid. The constant nullspace is removed by a bordered
/// mean-zero row.
pub fn solve_poisson_periodic(rhs: &ScalarField) -> Result<ScalarField> {
    PeriodicPoisson::new(rhs.grid)?.solve(rhs)
}

/// Factorized periodic Poisson operator, reusable across right-hand sides.
#[derive(Debug)]
pub struct PeriodicPoisson {
    grid: Grid,
    factor: Factorization,
}

impl PeriodicPoisson {
    pub fn new(grid: Grid) -> Result<Self> {
        if !grid.periodic {
            return Err(Error::DimensionMismatch("periodic grid required".into()));
        }
        let (nx, ny) = (grid.nx, grid.ny);
        let n = nx * ny;
        let mut sys = SparseSystem::new(n + 1);
        for j in 0..ny {
            for i in 0..nx {
                let k = grid.cell_index(i, j);
                // scaled by -h^2: 4 f_k - sum of neighbours
                let nbrs = [
                    grid.cell_index((i + 1) % nx, j),
                    grid.cell_index((i + nx - 1) % nx, j),
                    grid.cell_index(i, (j + 1) % ny),
                    grid.cell_index(i, (j + ny - 1) % ny),
                ];
                sys.push(k, k, 4.0);
                for q in nbrs {
                    sys.push(k, q, -1.0);
                }
                sys.push(k, n, 1.0);
                sys.push(n, k, 1.0);
            }
        }
        Ok(Self {
            grid,
            factor: sys.factorize()?,
        })
    }

    pub fn solve(&self, rhs: &ScalarField) -> Result<ScalarField> {
        if rhs.grid.nx != self.grid.nx || rhs.grid.ny != self.grid.ny {
            return Err(Error::DimensionMismatch("poisson rhs".into()));
        }
        let n = self.grid.cells();
        let mean = rhs.data.iter().sum::<f64>() / n as f64;
        let scale = rhs.data.iter().map(|v| v * v).sum::<f64>().sqrt();
        if mean.abs() > 1e-12 * scale.max(f64::MIN_POSITIVE) && mean.abs() > 1e-300 {
            return Err(Error::IncompatibleRhs { mean });
        }
        let h2 = self.grid.h * self.grid.h;
        let mut b: Vec<f64> = rhs.data.iter().map(|v| -h2 * v).collect();
        b.push(0.0);
        let sol = self.factor.solve(&b)?;
        Ok(ScalarField {
            grid: self.grid,
            data: sol.x[..n].to_vec(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identity_returns_rhs() {
        let mut s = SparseSystem::new(5);
        for i in 0..5 {
            s.push(i, i, 1.0);
        }
        let b = [1.0, -2.0, 3.5, 0.0, 7.0];
        let x = solve_linear(&s, &b).unwrap();
        assert_eq!(x.x, b.to_vec());
    }

    #[test]
    fn tiny_poisson_matches_hand_inverse() {
        // -u'' = 1 on (0,1), u(0)=u(1)=0, h = 1/4: (2u_i - u_{i-1} - u_{i+1})/h^2 = 1
        let h: f64 = 0.25;
        let mut s = SparseSystem::new(3);
        for i in 0..3 {
            s.push(i, i, 2.0 / (h * h));
            if i > 0 {
                s.push(i, i - 1, -1.0 / (h * h));
            }
            if i < 2 {
                s.push(i, i + 1, -1.0 / (h * h));
            }
        }
        let x = solve_linear(&s, &[1.0, 1.0, 1.0]).unwrap().x;
        // exact: u = x(1-x)/2 at 1/4, 1/2, 3/4
        let expect = [3.0 / 32.0, 1.0 / 8.0, 3.0 / 32.0];
        for (a, b) in x.iter().zip(expect) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn random_spd_residual() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let n = 50;
        let mut s = SparseSystem::new(n);
        let mut diag = vec![1.0; n];
        for _ in 0..200 {
            let (i, j) = (rng.gen_range(0..n), rng.gen_range(0..n));
            if i == j {
                continue;
            }
            let v: f64 = rng.gen_range(-1.0..1.0);
            s.push(i, j, v);
            s.push(j, i, v);
            diag[i] += v.abs();
            diag[j] += v.abs();
        }
        for (i, d) in diag.iter().enumerate() {
            s.push(i, i, *d);
        }
        let b: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let sol = solve_linear(&s, &b).unwrap();
        assert!(sol.residual <= 1e-10);
        let ax = s.matvec(&sol.x);
        let r = ax.iter().zip(&b).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        assert!(r / norm(&b) <= 1e-10);
    }

    #[test]
    fn singular_matrix_reported() {
        let mut s = SparseSystem::new(2);
        s.push(0, 0, 1.0);
        s.push(1, 0, 1.0);
        assert!(matches!(
            solve_linear(&s, &[1.0, 2.0]),
            Err(Error::SingularMatrix(_)) | Err(Error::ResidualTooLarge { .. })
        ));
    }

    #[test]
    fn periodic_poisson_cases() {
        let g = Grid::periodic(32);
        let zero = solve_poisson_periodic(&ScalarField::zeros(g)).unwrap();
        assert!(zero.data.iter().all(|&v| v == 0.0));
        let one = ScalarField::from_fn(g, |_, _| 1.0);
        assert!(matches!(
            solve_poisson_periodic(&one),
            Err(Error::IncompatibleRhs { .. })
        ));
        let tau = std::f64::consts::TAU;
        let rhs = ScalarField::from_fn(g, |x, _| (tau * x).cos());
        let sol = solve_poisson_periodic(&rhs).unwrap();
        // the discrete eigenvalue of the 5-point stencil on cos(2 pi x)
        let h = g.h;
        let amp = -h * h / (2.0 - 2.0 * (tau * h).cos());
        let cont = -1.0 / (tau * tau);
        for j in 0..32 {
            for i in 0..32 {
                let (x, _) = g.cell_center(i, j);
                assert!((sol.at(i, j) - amp * (tau * x).cos()).abs() < 1e-12);
                assert!((sol.at(i, j) - cont * (tau * x).cos()).abs() < 4.0 * h * h * cont.abs());
            }
        }
        assert!(sol.mean(None).abs() < 1e-14);
    }

    #[test]
    fn triplet_dump() {
        let dir = tempfile::tempdir().unwrap();
        let mut s = SparseSystem::new(2);
        s.push(0, 0, 1.0);
        s.push(0, 0, 2.0);
        s.push(1, 1, 4.0);
        s.dump_csv(&dir.path().join("a.csv")).unwrap();
        let text = std::fs::read_to_string(dir.path().join("a.csv")).unwrap();
        assert_eq!(text.lines().count(), 3);
        assert!(text.contains("0,0,3e0"));
    }
}
