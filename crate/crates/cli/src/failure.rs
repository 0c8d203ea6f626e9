//! Error classes that map to distinct exit codes.

use std::fmt;
use std::io;

use dul_core::DulError;

pub const EXIT_OTHER: u8 = 1;
pub const EXIT_CONFIG: u8 = 2;
pub const EXIT_MISSING_INPUT: u8 = 3;
pub const EXIT_NUMERICAL: u8 = 4;

#[derive(Debug)]
pub enum Failure {
    Config(String),
    MissingInput(String),
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Config(m) => write!(f, "config error: {m}"),
            Failure::MissingInput(m) => write!(f, "missing input: {m}"),
        }
    }
}

impl std::error::Error for Failure {}

/// First classifiable cause in the chain wins.
pub fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(f) = cause.downcast_ref::<Failure>() {
            return match f {
                Failure::Config(_) => EXIT_CONFIG,
                Failure::MissingInput(_) => EXIT_MISSING_INPUT,
            };
        }
        if let Some(e) = cause.downcast_ref::<DulError>() {
            match e {
                DulError::Diverged { .. } => return EXIT_NUMERICAL,
                DulError::Io(io) if io.kind() == io::ErrorKind::NotFound => return EXIT_MISSING_INPUT,
                _ => {}
            }
        }
        if let Some(io) = cause.downcast_ref::<io::Error>() {
            if io.kind() == io::ErrorKind::NotFound {
                return EXIT_MISSING_INPUT;
            }
        }
    }
    EXIT_OTHER
}
