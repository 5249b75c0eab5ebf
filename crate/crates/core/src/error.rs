use serde::Serialize;
use thiserror::Error;

use crate::SeqId;

pub type Result<T, E = KvError> = std::result::Result<T, E>;

/// Every failure the cache, scheduler, and simulator can report.
#[derive(Debug, Clone, PartialEq, Error, Serialize)]
#[serde(tag = "error", content = "detail", rename_all = "snake_case")]
pub enum KvError {
    #[error("position {position} out of range for head with {len} live KVs")]
    Position { position: usize, len: usize },

    #[error("block table corruption: {0}")]
    Corruption(String),

    #[error("no block allocated for position {position} of seq {seq} head {head}")]
    AllocationOrder { seq: SeqId, head: usize, position: usize },

    #[error("unknown sequence {0}")]
    UnknownSequence(SeqId),

    #[error("sequence {0} already holds an allocation")]
    AlreadyAllocated(SeqId),

    #[error("preemption needed: {needed} blocks requested, {free} free")]
    PreemptionNeeded { needed: usize, free: usize },

    #[error("block {block} is not owned (double free or foreign block)")]
    Ownership { block: usize },

    #[error("no running sequence to preempt")]
    NoVictim,

    #[error("non-finite value in {0}")]
    Numeric(&'static str),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("head {head} of seq {seq} has an empty context")]
    EmptyContext { seq: SeqId, head: usize },

    #[error("attention row has {got} entries, head holds {expected} live KVs")]
    RowLength { expected: usize, got: usize },

    #[error("eviction budget {requested} exceeds {evictable} evictable blocks for seq {seq}")]
    Budget {
        seq: SeqId,
        requested: usize,
        evictable: usize,
    },

    #[error("schedule corruption: {0}")]
    ScheduleCorruption(String),

    #[error("invalid config field `{field}`: {message}")]
    Config { field: String, message: String },

    #[error("infeasible workload: {0}")]
    InfeasibleWorkload(String),

    #[error("unknown {kind} `{name}`")]
    UnknownStrategy { kind: &'static str, name: String },

    #[error("engine made no progress for {0} steps")]
    Stalled(u64),
}

impl KvError {
    pub fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        KvError::Config {
            field: field.into(),
            message: message.into(),
        }
    }
}
