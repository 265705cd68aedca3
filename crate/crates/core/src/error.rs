use thiserror::Error;

use crate::schedule::{ActionId, PipelineConfig};

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid pipeline config: {0}")]
    Config(String),

    #[error("unsupported schedule: {kind:?} with {stages_per_rank} stage(s) per rank")]
    UnsupportedSchedule {
        kind: crate::schedule::ScheduleKind,
        stages_per_rank: usize,
    },

    #[error("{what} out of range: {value} (expected {expected})")]
    Domain {
        what: &'static str,
        value: String,
        expected: String,
    },

    #[error("schedule is inconsistent: dependency cycle through {0}")]
    Cycle(String),

    #[error("malformed pipeline graph: {0}")]
    Structure(String),

    #[error("missing duration for {0}")]
    MissingWeight(ActionId),

    #[error("insufficient monitoring for {node}: no {bucket} samples")]
    InsufficientMonitoring { node: ActionId, bucket: &'static str },

    #[error("LP solver failed: {0}")]
    Numerical(String),

    #[error("inconsistent inputs: {0}")]
    Consistency(String),

    #[error("sgd diverged at step {step} (|theta| = {norm:e})")]
    Divergence { step: usize, norm: f64 },
}

impl Error {
    pub(crate) fn domain(
        what: &'static str,
        value: impl ToString,
        expected: impl ToString,
    ) -> Self {
        Error::Domain {
            what,
            value: value.to_string(),
            expected: expected.to_string(),
        }
    }

    pub(crate) fn config(config: &PipelineConfig, msg: impl std::fmt::Display) -> Self {
        Error::Config(format!("{msg} ({config})"))
    }
}
