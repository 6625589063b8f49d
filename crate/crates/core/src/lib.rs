//! Two-scale homogenization toolkit for Stokes flow in periodically
//! perforated domains: unit-cell problems, the homogenized Darcy problem,
//! fine-scale Stokes solves and boundary-layer correctors on a MAC grid.

pub mod error;
pub mod geometry;
pub mod grid;
pub mod solver;
pub mod stokes;
pub mod cell;
pub mod darcy;
pub mod fine;
pub mod forcing;
pub mod correctors;
pub mod study;

pub use error::{Error, Result};
pub use geometry::{CellGeometry, PerforatedDomain};
pub use grid::{Comp, Grid, MacLayout, ScalarField, Side, StaggeredField};
pub use cell::{solve_cell, CellSolution};
pub use stokes::{StokesData, StokesSolution, StokesSystem};
pub use correctors::{build_correctors, CorrectorSet, Mollifier};
pub use darcy::{solve_p0, HomogenizedSolution};
pub use fine::{FineSolution, FineSolver};
pub use forcing::VectorField;
pub use study::{convergence_study, run_verify, StudyConfig, StudyReport, VerifyReport};
