//! Benchmark harness around the `lmc` crate: experiment configuration,
//! seeded parameter sweeps, CSV tables and plain-text matrix files.

pub mod config;
pub mod experiment;
pub mod matrix_io;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("malformed TOML: {0}")]
    Toml(#[from] toml::de::Error),
    #[error("could not serialize TOML: {0}")]
    TomlSer(#[from] toml::ser::Error),
    #[error("malformed matrix file {path}: {reason}")]
    Matrix { path: String, reason: String },
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Lmc(#[from] lmc::LmcError),
}

pub type Result<T> = std::result::Result<T, BenchError>;
