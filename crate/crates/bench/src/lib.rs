//! Matched-budget benchmark harness for SHAPE and the classical baselines:
//! metrics, aggregate reports, CSV, SVG plots, diagnostics and the CLI.

pub mod cli;
pub mod config;
pub mod diag;
pub mod harness;
pub mod metrics;
pub mod plot;
pub mod report;
pub mod table;

use shape_core::ShapeError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Shape(#[from] ShapeError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl From<shape_core::TaskError> for BenchError {
    fn from(e: shape_core::TaskError) -> Self {
        BenchError::Shape(e.into())
    }
}

impl BenchError {
    /// 3 for numerical failures, 2 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            BenchError::Shape(e) if e.is_numerical() => 3,
            _ => 2,
        }
    }
}
