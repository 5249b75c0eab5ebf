//! When to compress, whom to compress, and how hard.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::sequence::SequenceState;
use crate::SeqId;

/// Scheduler events a trigger can react to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TriggerEvent {
    /// One or more sequences finished prefill this step.
    Prefilled { count: usize },
    /// Start-of-decode checkpoint, once per step.
    Tick { step: u64, uncompressed_tokens: usize },
    /// Decode allocation failed and a sequence is about to be preempted.
    PreemptionPending,
}

pub trait CompressionTrigger: Send + Sync + fmt::Debug {
    fn name(&self) -> &'static str;
    fn fires(&self, event: &TriggerEvent) -> bool;
}

#[derive(Debug, Clone, Copy)]
pub struct OnPrefill;

impl CompressionTrigger for OnPrefill {
    fn name(&self) -> &'static str {
        "on-prefill"
    }

    fn fires(&self, event: &TriggerEvent) -> bool {
        matches!(event, TriggerEvent::Prefilled { count } if *count > 0)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct OnPreempt;

impl CompressionTrigger for OnPreempt {
    fn name(&self) -> &'static str {
        "on-preempt"
    }

    fn fires(&self, event: &TriggerEvent) -> bool {
        matches!(event, TriggerEvent::PreemptionPending)
    }
}

/// Every `every` steps, counting from step 0.
#[derive(Debug, Clone, Copy)]
pub struct EveryInterval {
    pub every: u64,
}

impl CompressionTrigger for EveryInterval {
    fn name(&self) -> &'static str {
        "interval"
    }

    fn fires(&self, event: &TriggerEvent) -> bool {
        matches!(event, TriggerEvent::Tick { step, .. } if self.every > 0 && step % self.every == 0)
    }
}

/// Once the running batch holds at least `tokens` uncompressed tokens.
#[derive(Debug, Clone, Copy)]
pub struct TokenThreshold {
    pub tokens: usize,
}

impl CompressionTrigger for TokenThreshold {
    fn name(&self) -> &'static str {
        "token-threshold"
    }

    fn fires(&self, event: &TriggerEvent) -> bool {
        matches!(event, TriggerEvent::Tick { uncompressed_tokens, .. } if *uncompressed_tokens >= self.tokens)
    }
}

/// A set of triggers plus the per-round KV limit.
#[derive(Debug)]
pub struct CompressionPolicy {
    pub triggers: Vec<Box<dyn CompressionTrigger>>,
    /// Upper bound on live KVs (pairs) across one compression batch.
    pub kv_limit: usize,
}

impl CompressionPolicy {
    pub fn fires(&self, event: &TriggerEvent) -> bool {
        self.triggers.iter().any(|t| t.fires(event))
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.triggers.iter().map(|t| t.name()).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum BudgetCombine {
    /// `min(floor, L / r)`.
    #[default]
    Min,
    /// `max(floor, L / r)`.
    Max,
}

/// Target cache tokens for a sequence holding `tokens` uncompressed tokens.
/// A rate of 1 or less leaves the sequence untouched.
pub fn per_sequence_budget(tokens: usize, rate: f64, floor_tokens: usize, combine: BudgetCombine) -> usize {
    if rate <= 1.0 {
        return tokens;
    }
    let scaled = tokens as f64 / rate;
    let floor = floor_tokens as f64;
    let target = match combine {
        BudgetCombine::Min => floor.min(scaled),
        BudgetCombine::Max => floor.max(scaled),
    };
    target.floor() as usize
}

/// Blocks to evict so the sequence keeps about `cache_tokens * l * H` KVs.
pub fn budget_to_blocks(
    cache_tokens: usize,
    layers: usize,
    kv_heads: usize,
    block_size: usize,
    allocated: usize,
) -> usize {
    let target_kvs = cache_tokens * layers * kv_heads;
    allocated.saturating_sub(target_kvs.div_ceil(block_size))
}

/// How per-sequence cache budgets are derived.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case")]
pub enum BudgetRule {
    Disabled,
    Rate {
        rate: f64,
        floor_tokens: usize,
        combine: BudgetCombine,
    },
    MaxTokens {
        tokens: usize,
    },
}

impl BudgetRule {
    pub fn rate(rate: f64) -> Self {
        if rate <= 1.0 {
            BudgetRule::Disabled
        } else {
            BudgetRule::Rate {
                rate,
                floor_tokens: 128,
                combine: BudgetCombine::Min,
            }
        }
    }

    pub fn is_disabled(&self) -> bool {
        matches!(self, BudgetRule::Disabled)
    }

    pub fn target_tokens(&self, tokens: usize) -> usize {
        match *self {
            BudgetRule::Disabled => tokens,
            BudgetRule::Rate {
                rate,
                floor_tokens,
                combine,
            } => per_sequence_budget(tokens, rate, floor_tokens, combine),
            BudgetRule::MaxTokens { tokens: max } => max.min(tokens),
        }
    }
}

/// Staleness-ordered scan over running sequences: never-compressed first,
/// then oldest compression, ties by admission. Stops at the first sequence
/// that would push the batch over `kv_limit`.
pub fn select_compression_batch(running: &[(&SequenceState, usize)], kv_limit: usize) -> Vec<SeqId> {
    let mut order: Vec<&(&SequenceState, usize)> = running.iter().collect();
    order.sort_by_key(|(s, _)| {
        (
            s.last_compressed_at.is_some(),
            s.last_compressed_at,
            s.admitted_at,
            s.admission_seq,
            s.id,
        )
    });
    let mut total = 0usize;
    let mut batch = Vec::new();
    for (s, kvs) in order {
        if total + kvs > kv_limit {
            break;
        }
        total += kvs;
        batch.push(s.id);
    }
    batch
}
