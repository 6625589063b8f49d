use thiserror::Error;

/// Every failure mode of the toolkit, from geometry validation through the
/// linear solves to the study pipeline.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("solid cell at ({0}, {1}) touches the outer ring of the unit cell")]
    SolidTouchesCellBoundary(usize, usize),
    #[error("fluid cells form {0} periodic components; expected one")]
    DisconnectedFluid(usize),
    #[error("unit cell is entirely solid")]
    AllSolid,
    #[error("cell resolution must be at least 4, got {0}")]
    CellTooCoarse(usize),
    #[error("solid mask is not square: {0}")]
    BadMask(String),
    #[error("fine resolution {fine} is not a multiple of the cell resolution {cell}")]
    ResolutionMismatch { fine: usize, cell: usize },
    #[error("period count must be at least 2, got {0}")]
    BadPeriod(usize),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("no fluid cells to solve on")]
    EmptyFluid,
    #[error("periodic Stokes system without obstacles has no solution for a forcing with nonzero mean")]
    IncompatiblePeriodicSystem,
    #[error("matrix is singular: {0}")]
    SingularMatrix(String),
    #[error("linear solve residual {residual:.3e} exceeds {threshold:.1e}")]
    ResidualTooLarge { residual: f64, threshold: f64 },
    #[error("right-hand side mean {mean:.3e} is not zero")]
    IncompatibleRhs { mean: f64 },
    #[error("permeability is not positive definite (min eigenvalue {0:.3e})")]
    NotPositiveDefinite(f64),
    #[error("permeability is not symmetric positive definite")]
    NotSpd,
    #[error("prescribed divergence has nonzero integral {0:.3e}")]
    IncompatibleDivergenceData(f64),
    #[error("boundary data has nonzero net flux {0:.3e}")]
    IncompatibleBoundaryData(f64),
    #[error("mollifier radius {radius:.3e} is below two grid spacings ({h:.3e} each)")]
    KernelTooSmall { radius: f64, h: f64 },
    #[error("field has zero gradient")]
    ZeroField,
    #[error("probe data is identically zero")]
    ZeroData,
    #[error("rate fit needs at least 3 points, got {0}")]
    TooFewPoints(usize),
    #[error("rate fit needs positive values, got {0}")]
    NonPositiveValue(f64),
    #[error("config: {0}")]
    Config(String),
    #[error("io: {0}")]
    Io(String),
    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<Error>,
    },
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Config(e.to_string())
    }
}

impl Error {
    pub(crate) fn at_stage(self, stage: &str) -> Error {
        Error::Stage {
            stage: stage.to_string(),
            source: Box::new(self),
        }
    }

    /// The innermost error under any stage wrappers.
    pub fn root(&self) -> &Error {
        match self {
            Error::Stage { source, .. } => source.root(),
            e => e,
        }
    }

    /// Bad input rather than a numerical failure: malformed config or
    /// geometry, unreadable files, inconsistent resolutions.
    pub fn is_input_error(&self) -> bool {
        matches!(
            self.root(),
            Error::Config(_)
                | Error::Io(_)
                | Error::BadMask(_)
                | Error::BadPeriod(_)
                | Error::CellTooCoarse(_)
                | Error::SolidTouchesCellBoundary(..)
                | Error::DisconnectedFluid(_)
                | Error::AllSolid
                | Error::ResolutionMismatch { .. }
                | Error::DimensionMismatch(_)
                | Error::KernelTooSmall { .. }
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
