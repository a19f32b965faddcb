//! Crate-wide error type.

use thiserror::Error;

/// Errors produced by geometry, blocks, attention, model, and data code.
///
/// Low-level tensor shape violations inside the autodiff engine panic
/// (they are programming errors, matching `ndarray` conventions); the
/// variants here cover contract violations a caller can hit with bad
/// inputs or bad files.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid curvature: expected kappa < 0, got {0}")]
    InvalidCurvature(f64),

    #[error("curvature mismatch: {left} vs {right}")]
    CurvatureMismatch { left: f64, right: f64 },

    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("domain error in {op}: {detail}")]
    Domain { op: &'static str, detail: String },

    #[error("empty input in {op}: {detail}")]
    EmptyInput { op: &'static str, detail: String },

    #[error("dataset validation failed [{code}]: {detail}")]
    DatasetInvalid { code: &'static str, detail: String },

    #[error("parse error in {file} at line {line}: {detail}")]
    Parse {
        file: String,
        line: usize,
        detail: String,
    },

    #[error("config error: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("numerical failure at epoch {epoch}: {detail}")]
    Numerical { epoch: usize, detail: String },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
