//! Per-KV eviction metrics.
//!
//! Metrics aggregate the attention each key received, summed over the query
//! heads of its GQA group. Two aggregation ranges are supported: the last `w`
//! prompt queries followed by max-pooling of width `p` (window mode), or every
//! query at least `v` tokens after the key (full mode). Attention values are
//! either summed as-is (L1) or squared first (L2). During decode, the new
//! query's attention is added onto the stored metrics.

use std::fmt;

use ndarray::{Array2, ArrayView3};
use serde::{Deserialize, Serialize};

use crate::cache::{BlockTables, HeadId, SlotHandle};
use crate::error::{KvError, Result};
use crate::SeqId;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregation {
    L1,
    L2,
}

impl Aggregation {
    #[inline]
    pub fn apply(self, a: f64) -> f64 {
        match self {
            Aggregation::L1 => a,
            Aggregation::L2 => a * a,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase")]
pub enum MetricMode {
    Window { window: usize, pool: usize },
    Full { excluded: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MetricConfig {
    #[serde(flatten)]
    pub mode: MetricMode,
    pub aggregation: Aggregation,
    /// Window mode only: keys inside the observation window are never evicted.
    pub protect_window: bool,
}

impl Default for MetricConfig {
    fn default() -> Self {
        Self {
            mode: MetricMode::Window { window: 8, pool: 7 },
            aggregation: Aggregation::L2,
            protect_window: true,
        }
    }
}

impl MetricConfig {
    pub fn full(excluded: usize, aggregation: Aggregation) -> Self {
        Self {
            mode: MetricMode::Full { excluded },
            aggregation,
            protect_window: false,
        }
    }

    pub fn window(window: usize, pool: usize, aggregation: Aggregation) -> Self {
        Self {
            mode: MetricMode::Window { window, pool },
            aggregation,
            protect_window: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self.mode {
            MetricMode::Window { window, pool } => {
                if window == 0 {
                    return Err(KvError::config("window", "observation window must be >= 1"));
                }
                if pool == 0 || pool % 2 == 0 {
                    return Err(KvError::config("pool", "pooling size must be odd and >= 1"));
                }
            }
            MetricMode::Full { .. } => {}
        }
        Ok(())
    }
}

/// Metrics for one layer after prefill: `(n_k, L)` values and, per key
/// position, whether the key is protected from eviction.
#[derive(Debug, Clone, PartialEq)]
pub struct PrefillMetrics {
    pub values: Array2<f64>,
    pub protected: Vec<bool>,
}

fn group_size(attn: &ArrayView3<f64>, kv_heads: usize) -> usize {
    let nq = attn.dim().0;
    assert!(
        kv_heads > 0 && nq % kv_heads == 0,
        "{nq} query heads not divisible by {kv_heads}"
    );
    nq / kv_heads
}

/// Observation-window metrics with centered max-pooling, truncated at the
/// sequence edges. `attn` is `(n_q, L, L)`.
pub fn window_metrics(
    attn: ArrayView3<f64>,
    kv_heads: usize,
    window: usize,
    pool: usize,
    aggregation: Aggregation,
    protect: bool,
) -> PrefillMetrics {
    let r = group_size(&attn, kv_heads);
    let len = attn.dim().1;
    let start = len.saturating_sub(window);
    let mut raw = Array2::<f64>::zeros((kv_heads, len));
    // Per query head first, then across the group: the grouped value is then
    // bit-identical to summing per-head metrics.
    let mut per_head = vec![0.0; len];
    for hk in 0..kv_heads {
        for h in hk * r..(hk + 1) * r {
            per_head.fill(0.0);
            for i in start..len {
                for (j, acc) in per_head.iter_mut().enumerate().take(i + 1) {
                    *acc += aggregation.apply(attn[[h, i, j]]);
                }
            }
            for (j, v) in per_head.iter().enumerate() {
                raw[[hk, j]] += v;
            }
        }
    }
    let half = pool / 2;
    let values = Array2::from_shape_fn((kv_heads, len), |(hk, j)| {
        let lo = j.saturating_sub(half);
        let hi = (j + half).min(len - 1);
        (lo..=hi).map(|t| raw[[hk, t]]).fold(f64::NEG_INFINITY, f64::max)
    });
    let protected = (0..len).map(|j| protect && j >= start).collect();
    PrefillMetrics { values, protected }
}

/// Full-range metrics skipping the `excluded` queries nearest each key.
pub fn full_metrics(
    attn: ArrayView3<f64>,
    kv_heads: usize,
    excluded: usize,
    aggregation: Aggregation,
) -> PrefillMetrics {
    let r = group_size(&attn, kv_heads);
    let len = attn.dim().1;
    let mut values = Array2::<f64>::zeros((kv_heads, len));
    for hk in 0..kv_heads {
        for j in 0..len {
            let mut acc = 0.0;
            for h in hk * r..(hk + 1) * r {
                let mut part = 0.0;
                for i in (j + excluded)..len {
                    part += aggregation.apply(attn[[h, i, j]]);
                }
                acc += part;
            }
            values[[hk, j]] = acc;
        }
    }
    PrefillMetrics {
        values,
        protected: vec![false; len],
    }
}

/// A way of scoring KVs for eviction.
pub trait MetricStrategy: Send + Sync + fmt::Debug {
    fn name(&self) -> &'static str;
    fn aggregation(&self) -> Aggregation;
    /// Metrics for one layer from its `(n_q, L, L)` prefill attention.
    fn prefill(&self, attn: ArrayView3<f64>, kv_heads: usize) -> PrefillMetrics;
    /// Whether a decode query at token `query_pos` adds to the key at `key_pos`.
    fn observes(&self, key_pos: usize, query_pos: usize) -> bool;
}

#[derive(Debug, Clone, Copy)]
pub struct WindowMetric {
    pub window: usize,
    pub pool: usize,
    pub aggregation: Aggregation,
    pub protect: bool,
}

impl MetricStrategy for WindowMetric {
    fn name(&self) -> &'static str {
        "window"
    }

    fn aggregation(&self) -> Aggregation {
        self.aggregation
    }

    fn prefill(&self, attn: ArrayView3<f64>, kv_heads: usize) -> PrefillMetrics {
        window_metrics(attn, kv_heads, self.window, self.pool, self.aggregation, self.protect)
    }

    fn observes(&self, _key_pos: usize, _query_pos: usize) -> bool {
        true
    }
}

#[derive(Debug, Clone, Copy)]
pub struct FullMetric {
    pub excluded: usize,
    pub aggregation: Aggregation,
}

impl MetricStrategy for FullMetric {
    fn name(&self) -> &'static str {
        "full"
    }

    fn aggregation(&self) -> Aggregation {
        self.aggregation
    }

    fn prefill(&self, attn: ArrayView3<f64>, kv_heads: usize) -> PrefillMetrics {
        full_metrics(attn, kv_heads, self.excluded, self.aggregation)
    }

    fn observes(&self, key_pos: usize, query_pos: usize) -> bool {
        query_pos >= key_pos + self.excluded
    }
}

/// Bookkeeping stored alongside each physical slot.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct SlotMeta {
    pub metric: f64,
    /// Rank of this KV in its head's ordering.
    pub logical: usize,
    /// Token position the KV was generated at.
    pub position: usize,
    pub protected: bool,
    /// Created during the current step; not evictable until the next one.
    pub fresh: bool,
}

/// Slot-aligned metric storage, laid out exactly like the KV cache.
#[derive(Debug, Clone)]
pub struct MetricsStore {
    block_size: usize,
    slots: Vec<SlotMeta>,
}

impl MetricsStore {
    pub fn new(num_blocks: usize, block_size: usize) -> Self {
        Self {
            block_size,
            slots: vec![SlotMeta::default(); num_blocks * block_size],
        }
    }

    pub fn get(&self, slot: SlotHandle) -> SlotMeta {
        self.slots[slot.flat(self.block_size)]
    }

    pub fn get_mut(&mut self, slot: SlotHandle) -> &mut SlotMeta {
        &mut self.slots[slot.flat(self.block_size)]
    }

    pub fn set(&mut self, slot: SlotHandle, meta: SlotMeta) {
        self.slots[slot.flat(self.block_size)] = meta;
    }

    pub fn clear(&mut self, slot: SlotHandle) {
        self.set(slot, SlotMeta::default());
    }

    pub fn copy_slot(&mut self, src: SlotHandle, dst: SlotHandle) {
        let m = self.get(src);
        self.set(dst, m);
    }

    /// Clears the `fresh` mark on every slot.
    pub fn end_step(&mut self) {
        for s in &mut self.slots {
            s.fresh = false;
        }
    }
}

/// Adds one decode query's attention onto the metrics of a head's live KVs.
///
/// `rows` holds one attention row per query head of the KV head's group, each
/// covering live positions `0..C`.
pub fn accumulate_decode(
    store: &mut MetricsStore,
    tables: &BlockTables,
    seq: SeqId,
    head: HeadId,
    rows: &[&[f64]],
    query_pos: usize,
    strategy: &dyn MetricStrategy,
) -> Result<()> {
    let h = tables.head_index(head);
    let len = tables.context_len(seq, h)?;
    if let Some(bad) = rows.iter().find(|r| r.len() != len) {
        return Err(KvError::RowLength {
            expected: len,
            got: bad.len(),
        });
    }
    let agg = strategy.aggregation();
    for i in 0..len {
        let slot = tables.slot(seq, h, i)?;
        let meta = store.get_mut(slot);
        if strategy.observes(meta.position, query_pos) {
            meta.metric += rows.iter().map(|r| agg.apply(r[i])).sum::<f64>();
        }
    }
    Ok(())
}
