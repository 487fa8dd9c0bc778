use alloc::string::String;

/// Errors raised by the numerical core.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("validation error: {0}")]
    Validation(String),

    #[error("shape mismatch: expected {expected}, received {received}")]
    Shape { expected: String, received: String },

    #[error("degenerate volume: {0}")]
    DegenerateVolume(String),

    #[error("stratification failed: {0}")]
    Stratification(String),

    #[error("could not place anomaly blob inside the mask after {attempts} attempts")]
    Placement { attempts: usize },

    #[error("operation `{op}` is not supported by variant {variant}")]
    UnsupportedVariant { op: &'static str, variant: &'static str },

    #[error("fusion weight gamma_a > 0 but l_age is absent for subject {0}")]
    MissingScore(String),

    #[error("validation set must contain both labels")]
    DegenerateValidation,

    #[error("metric requires {0}")]
    DegenerateLabels(&'static str),

    #[error("bootstrap statistic undefined on too many resamples ({draws} draws for {n_boot} replicates)")]
    BootstrapDegeneracy { draws: usize, n_boot: usize },

    #[error("preprocessing mismatch: {0}")]
    PipelineMismatch(String),

    #[error("train split contains anomalous subject {0}")]
    Contamination(String),

    #[error("non-finite loss at epoch {epoch}, step {step}")]
    Divergence { epoch: usize, step: u64 },
}

pub type Result<T> = core::result::Result<T, Error>;

pub(crate) fn shape_err(expected: impl core::fmt::Display, received: impl core::fmt::Display) -> Error {
    use alloc::string::ToString;
    Error::Shape {
        expected: expected.to_string(),
        received: received.to_string(),
    }
}
