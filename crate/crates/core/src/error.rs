use std::io;

use thiserror::Error;

/// Errors raised by the library.
#[derive(Debug, Error)]
pub enum DulError {
    #[error("dimension mismatch: expected {expected}, got {actual} ({what})")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        actual: usize,
    },
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("label {label} out of range for {num_classes} classes")]
    LabelOutOfRange { label: usize, num_classes: usize },
    #[error("zero-norm vector in {0}")]
    ZeroNorm(&'static str),
    #[error("non-finite loss at step {step}: {value}")]
    Diverged { step: usize, value: f64 },
    #[error("infeasible generator spec: {0}")]
    Infeasible(String),
    #[error("invalid file format: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T> = std::result::Result<T, DulError>;

pub(crate) fn ensure_len(what: &'static str, expected: usize, actual: usize) -> Result<()> {
    if expected != actual {
        return Err(DulError::DimensionMismatch { what, expected, actual });
    }
    Ok(())
}
