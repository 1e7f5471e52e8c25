//! Error type shared across the crate.
//!
//! Every error carries a stable machine-readable category; the CLI maps each
//! category to a distinct nonzero exit code and prints `error[category]: ...`
//! so scripts can dispatch on failures without parsing prose.

/// Crate-wide error with a stable category per failure class.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Invalid or inconsistent configuration values.
    #[error("{0}")]
    Config(String),
    /// Dataset layout or content problems (missing files, bad fixations).
    #[error("{0}")]
    Data(String),
    /// Tensor/array shape violates an interface contract.
    #[error("{0}")]
    Shape(String),
    /// API misuse or unmet dependency between pipeline stages.
    #[error("{0}")]
    Contract(String),
    /// Diffusion step index outside the schedule or plan.
    #[error("{0}")]
    Step(String),
    /// Checkpoint missing, corrupt, or incompatible.
    #[error("{0}")]
    Checkpoint(String),
    /// Numeric failure at runtime (NaN/Inf in latents or losses).
    #[error("{0}")]
    Numeric(String),
    /// Filesystem failure.
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    /// Failure bubbled up from the tensor backend.
    #[error("backend: {0}")]
    Backend(#[from] candle_core::Error),
}

impl Error {
    /// Stable category token for scripting against the CLI.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Config(_) => "config",
            Error::Data(_) => "data",
            Error::Shape(_) => "shape",
            Error::Contract(_) => "contract",
            Error::Step(_) => "step",
            Error::Checkpoint(_) => "checkpoint",
            Error::Numeric(_) => "numeric",
            Error::Io(_) => "io",
            Error::Backend(_) => "backend",
        }
    }

    /// Process exit code used by the CLI for this category.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Data(_) => 3,
            Error::Shape(_) => 4,
            Error::Contract(_) => 5,
            Error::Step(_) => 6,
            Error::Checkpoint(_) => 7,
            Error::Numeric(_) => 8,
            Error::Io(_) => 9,
            Error::Backend(_) => 10,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
