use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("correspondence mismatch: {0}")]
    Correspondence(String),

    #[error("at least 2 shapes are required, got {0}")]
    TooFewShapes(usize),

    #[error("invalid mesh: {0}")]
    InvalidMesh(String),

    #[error("bounding box has zero extent in every axis")]
    DegenerateExtent,

    #[error("expected {expected} labels, got {got}")]
    LabelCount { expected: usize, got: usize },

    #[error("covariance block for component {component} is singular")]
    SingularCovariance { component: usize },

    #[error("every component has zero likelihood for vertex {vertex}")]
    AllZeroLikelihood { vertex: usize },

    #[error("component {component} has vanishing responsibility mass {mass:e}")]
    EmptyComponent { component: usize, mass: f64 },

    #[error("covariance eigenvalue {0:e} is negative beyond tolerance")]
    NegativeEigenvalue(f64),

    #[error("{what} index {index} out of range (len {len})")]
    IndexOutOfRange {
        what: &'static str,
        index: usize,
        len: usize,
    },

    #[error("part {0} is not adjacent to any other part")]
    NoAdjacency(usize),

    #[error("point configuration is degenerate: {0}")]
    DegenerateConfiguration(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("model artifact: {0}")]
    Artifact(String),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// `true` for failures of the numerical pipeline, as opposed to bad input.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::SingularCovariance { .. }
                | Error::AllZeroLikelihood { .. }
                | Error::EmptyComponent { .. }
                | Error::NegativeEigenvalue(_)
                | Error::DegenerateConfiguration(_)
        )
    }
}
