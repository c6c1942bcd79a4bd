use thiserror::Error;

/// Errors raised across the lab.
#[derive(Debug, Error)]
pub enum LabError {
    #[error("degenerate distribution: {0}")]
    DegenerateDistribution(String),

    #[error("numeric failure: {0}")]
    NumericFailure(String),

    #[error("degenerate seed set: {0}")]
    DegenerateSeedSet(String),

    #[error("budget exceeded: {0}")]
    Budget(String),

    #[error("insufficient data for group `{group}`")]
    InsufficientData { group: String },

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("at generation step {step}: {source}")]
    AtStep {
        step: usize,
        #[source]
        source: Box<LabError>,
    },

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl LabError {
    pub(crate) fn at_step(self, step: usize) -> Self {
        match self {
            e @ LabError::AtStep { .. } => e,
            other => LabError::AtStep {
                step,
                source: Box::new(other),
            },
        }
    }

    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        LabError::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}

pub type Result<T, E = LabError> = std::result::Result<T, E>;
