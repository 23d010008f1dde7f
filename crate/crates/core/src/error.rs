use crate::model::{InstanceId, RequestState};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    InvalidConfig(&'static str),
    #[error("decode batch must contain at least one token")]
    InvalidBatch,
    #[error("illegal lifecycle transition {from:?} -> {to:?}")]
    InvalidTransition { from: RequestState, to: RequestState },
    #[error("invariant violated: {0}")]
    InvariantViolated(&'static str),
    #[error("no healthy instance can take the request")]
    NoCapacity,
    #[error("unknown instance {0}")]
    UnknownInstance(InstanceId),
    #[error("unknown session {0}")]
    UnknownSession(u32),
    #[error("virtual offset {offset} outside session range {max}")]
    OutOfRange { offset: u64, max: u64 },
    #[error("virtual page {0} is not mapped")]
    Unmapped(u64),
    #[error("page pool exhausted: need {need} pages, {available} available")]
    OutOfPages { need: usize, available: usize },
    #[error("session {0} already completed")]
    SessionCompleted(u32),
    #[error("more operators than compute units")]
    Infeasible,
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("block of {block} tokens exceeds tier capacity {capacity}")]
    BlockTooLarge { block: u64, capacity: u64 },
}

pub type Result<T, E = Error> = core::result::Result<T, E>;
