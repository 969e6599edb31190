use thiserror::Error;

/// Error type shared by every module in the crate.
///
/// Message strings are part of the public contract: callers (and the CLI)
/// match on them in diagnostics, so they stay stable.
#[derive(Debug, Error)]
pub enum CmmError {
    #[error("empty dataset")]
    EmptyDataset,

    #[error("dataset not discrete in z")]
    NotDiscreteInZ,

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("invalid {field}: {message}")]
    InvalidField { field: &'static str, message: String },

    #[error("f-class Gram singular; set f_ridge > 0")]
    SingularGram,

    #[error("identity requires tabular multiplier class")]
    NonTabularIdentity,

    #[error("divergence: reduce step size")]
    Divergence,

    #[error("trace too short")]
    TraceTooShort,

    #[error("constraint infeasible: best achieved slack {best_slack:.6e} exceeds kappa {kappa:.6e} + tolerance")]
    InfeasibleSlack { best_slack: f64, kappa: f64 },

    #[error("weak/irrelevant instrument")]
    WeakInstrument,

    #[error("insufficient trials")]
    InsufficientTrials,

    #[error("coverage violated")]
    CoverageViolated,

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("parse error: {0}")]
    Parse(String),
}

pub type Result<T> = std::result::Result<T, CmmError>;
