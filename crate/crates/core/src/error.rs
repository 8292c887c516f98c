//! Error type shared across the crate.
//!
//! Variants are grouped by how a batch run should exit: usage problems
//! (bad arguments or configuration), data problems (files, degenerate
//! inputs), and numerical failures (factorization, overflow, stuck
//! stochastic searches).

use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration (grid/lattice setup, config files, option combinations).
    #[error("configuration error: {0}")]
    Config(String),

    /// Invalid argument to an operation.
    #[error("argument error: {0}")]
    Argument(String),

    /// A covariate layer with no variance cannot be standardized.
    #[error("degenerate covariate layer '{layer}': zero variance")]
    DegenerateCovariate { layer: String },

    /// An observed polygon with zero total population has no defined rate.
    #[error("degenerate polygon {polygon}: zero total population")]
    DegeneratePolygon { polygon: u32 },

    /// Case-count resampling never fell below the configured threshold.
    #[error(
        "threshold exhaustion: {attempts} attempts all exceeded max total cases \
         {max_total_cases} (totals {totals:?})"
    )]
    ThresholdExhausted {
        attempts: u32,
        max_total_cases: f64,
        totals: Vec<u64>,
    },

    /// Objective evaluation produced a non-finite polygon mean.
    #[error("evaluation error in polygon {polygon}: {detail}")]
    Evaluation { polygon: u32, detail: String },

    /// Contiguous growth ran out of frontier before reaching the target size.
    #[error("contiguous sampling stuck: wanted {wanted} polygons, best attempt reached {reached}")]
    GrowthStuck { wanted: usize, reached: usize },

    /// Simulation produced invalid intermediate values.
    #[error("simulation error: {0}")]
    Simulation(String),

    /// Linear-algebra failure (non-positive-definite covariance after jitter, etc).
    #[error("numerical failure: {0}")]
    Numerical(String),

    /// Malformed or inconsistent data file.
    #[error("data error: {0}")]
    Data(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for CLI front ends: 1 usage, 2 data, 3 numerical.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Argument(_) => 1,
            Error::Data(_)
            | Error::Io { .. }
            | Error::DegenerateCovariate { .. }
            | Error::DegeneratePolygon { .. } => 2,
            Error::ThresholdExhausted { .. }
            | Error::Evaluation { .. }
            | Error::GrowthStuck { .. }
            | Error::Simulation(_)
            | Error::Numerical(_) => 3,
        }
    }
}
