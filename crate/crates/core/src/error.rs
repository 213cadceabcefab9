use std::io;

use thiserror::Error;

pub type Result<T, E = AifError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum AifError {
    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("matrix is not symmetric positive definite: {0}")]
    NotPositiveDefinite(&'static str),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("integration diverged at step {step}: {what}")]
    Divergence { step: u64, what: &'static str },

    #[error("simulation blew up at step {step}")]
    SimulationBlowUp { step: u64 },

    #[error("evidence window is empty")]
    EmptyWindow,

    #[error("no trial records to summarize")]
    EmptyRecords,

    #[error("trial {trial} failed: {source}")]
    Trial {
        trial: usize,
        #[source]
        source: Box<AifError>,
    },

    #[error("failed to parse {what}: {message}")]
    Parse { what: String, message: String },

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl AifError {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        AifError::InvalidConfig(msg.into())
    }

    /// True for failures of the numerical integration or simulation, as
    /// opposed to bad input or configuration.
    pub fn is_divergence(&self) -> bool {
        match self {
            AifError::Divergence { .. } | AifError::SimulationBlowUp { .. } => true,
            AifError::Trial { source, .. } => source.is_divergence(),
            _ => false,
        }
    }
}

pub(crate) fn check_dim(context: &'static str, expected: usize, actual: usize) -> Result<()> {
    if expected == actual {
        Ok(())
    } else {
        Err(AifError::DimensionMismatch {
            context,
            expected,
            actual,
        })
    }
}
