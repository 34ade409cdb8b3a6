use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Errors shared across the filtering pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("index out of range: {0}")]
    IndexOutOfRange(String),

    #[error("domain error: {0}")]
    Domain(String),

    /// A diagonal entry of the sample covariance fell at or below the floor,
    /// which signals ensemble collapse.
    #[error("singular covariance: diagonal entry {value:.3e} at index {index} is below floor {floor:.3e}")]
    SingularCovariance { index: usize, value: f64, floor: f64 },

    /// The step size does not resolve the stiff gain/inflation rates of the
    /// filter drift.
    #[error("stiff filter step: dt = {dt:.3e} with rate {rate:.3e} gives dt*rate = {product:.3e} > 0.5; reduce dt")]
    Stiffness { dt: f64, rate: f64, product: f64 },

    #[error("non-finite state at step {step}: {context}")]
    NonFinite { step: u64, context: String },

    #[error("filter step {step} failed: {source}")]
    AtStep {
        step: u64,
        #[source]
        source: Box<Error>,
    },

    #[error("invalid configuration: {0}")]
    Validation(String),

    #[error("bad stream format: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn at_step(self, step: u64) -> Error {
        Error::AtStep {
            step,
            source: Box::new(self),
        }
    }
}
