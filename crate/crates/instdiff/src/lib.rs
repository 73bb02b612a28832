//! Shape-world training, evaluation, command line and HTTP service for the
//! instance-conditioned diffusion model.

pub mod cli;
pub mod config;
pub mod eval;
pub mod pipeline;
pub mod service;
pub mod store;

pub use config::{LoadedConfig, RunConfig};
pub use eval::{EvalReport, TestItem, Variant};
pub use pipeline::LoadedModel;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("config error: {0}")]
    Config(String),

    #[error("session store error: {0}")]
    Store(String),

    #[error(transparent)]
    Core(#[from] instdiff_core::Error),

    #[error(transparent)]
    Shapeworld(#[from] instdiff_shapeworld::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Stable machine-readable kind for CLI and API error bodies.
    pub fn kind(&self) -> &'static str {
        use instdiff_core::Error as C;
        match self {
            Error::Config(_) => "config",
            Error::Store(_) => "store",
            Error::Core(C::Geometry(_)) => "geometry",
            Error::Core(C::Schema(_)) => "schema",
            Error::Core(C::Vocabulary(_)) => "vocabulary",
            Error::Core(C::Checkpoint(_)) => "checkpoint",
            Error::Core(_) => "model",
            Error::Shapeworld(instdiff_shapeworld::Error::Checksum) => "checksum",
            Error::Shapeworld(instdiff_shapeworld::Error::ConfigMismatch { .. }) => "config_mismatch",
            Error::Shapeworld(_) => "dataset",
            Error::Io(_) => "io",
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
