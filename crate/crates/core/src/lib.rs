//! Paged KV cache with block-granular, variable-head-rate eviction.
//!
//! Every block of the unified cache holds KVs of a single `(layer, kv_head)`
//! of a single sequence, so heads can be compressed at different rates and the
//! freed memory is returned to the pool block by block. See [`compression`]
//! for the eviction scheduler and [`engine`] for the batching simulator that
//! drives it.

pub mod attention;
pub mod block_manager;
pub mod cache;
pub mod compression;
pub mod engine;
pub mod error;
pub mod metrics;
pub mod policy;
pub mod registry;
pub mod sequence;
pub mod workload;

/// Sequence (request) identifier.
pub type SeqId = u64;

pub use cache::{BlockTables, HeadId, SlotHandle, UnifiedKVCache};
pub use engine::{Engine, EngineConfig, StepReport};
pub use error::{KvError, Result};
pub use workload::{run, sweep, RunReport, WorkloadConfig};
