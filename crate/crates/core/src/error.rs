use std::path::PathBuf;

/// Errors produced anywhere in the crate.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Shape(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error(
        "budget infeasible: minimum achievable cost is {min_flops} FLOPs / {min_params} params, \
         budget is {budget}"
    )]
    Infeasible {
        min_flops: f64,
        min_params: f64,
        budget: String,
    },

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("no circular edge found (max response {response:.4} below floor {floor:.4})")]
    NoCircularEdge { response: f64, floor: f64 },

    #[error("circle outside image: center ({x0:.1}, {y0:.1}), radius {r:.1}")]
    CircleOutOfBounds { x0: f64, y0: f64, r: f64 },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
