use thiserror::Error;

/// Errors raised across the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("rejected input: {0}")]
    InvalidInput(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("numeric fault in flow layer {layer}: {detail}")]
    NumericFault { layer: usize, detail: String },

    #[error("infeasible constraint at target step {step}: {detail}")]
    InfeasibleConstraint { step: usize, detail: String },

    #[error("unstable denominator: estimate {value:.3e} is below 5 standard errors ({stderr:.3e})")]
    UnstableDenominator { value: f64, stderr: f64 },

    #[error("data error: {0}")]
    Data(String),

    #[error("unimplemented: {0}")]
    Unimplemented(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::InvalidInput(_) | Error::Data(_) | Error::Io(_) | Error::Json(_) | Error::Csv(_) => 3,
            Error::NumericFault { .. }
            | Error::InfeasibleConstraint { .. }
            | Error::UnstableDenominator { .. } => 4,
            Error::Unimplemented(_) => 3,
        }
    }
}
