use thiserror::Error;

use crate::profiles::Span;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("parse error: {0}")]
    Parse(String),

    #[error("validation error: {0}")]
    Validation(String),

    #[error("no bandwidth entry for {span} groups of size <= {group_size}")]
    NoBandwidthEntry { span: Span, group_size: u64 },

    #[error("invalid device count {0}: must be a positive power of two")]
    InvalidDeviceCount(u64),

    #[error("invalid strategy constraints: {0}")]
    InvalidConstraints(String),

    #[error("inconsistent strategy: tp={tp} dp={dp} does not tile {devices_per_stage} devices")]
    InconsistentStrategy { tp: u64, dp: u64, devices_per_stage: u64 },

    #[error("microbatch {microbatch} is not divisible by data-parallel degree {dp}")]
    IndivisibleMicrobatch { microbatch: u64, dp: u64 },

    #[error("stage {stage} is infeasible: minimum achievable memory {min_memory_bytes:.0} B exceeds budget {budget_bytes:.0} B")]
    Infeasible {
        stage: usize,
        min_memory_bytes: f64,
        budget_bytes: f64,
    },

    #[error("no feasible plan: {0}")]
    NoFeasiblePlan(String),

    #[error("oracle instance too large: {0}")]
    OracleTooLarge(String),

    #[error("scheduling deadlock at stage {stage} (internal error)")]
    SchedulingDeadlock { stage: usize },

    #[error("io error: {0}")]
    Io(String),
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Parse(e.to_string())
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}
