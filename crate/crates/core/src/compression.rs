//! Block-granular eviction with variable per-head rates.
//!
//! For each sequence, every head's slots are sorted by metric (empty slots
//! first, protected slots last) and cut into rows of `b`. Row `e - 1` of a head
//! holds the next `b` cheapest KVs once `e - 1` of its blocks are gone, so the
//! last entry of the row is the largest metric evicted when freeing `e` blocks.
//! Rows of all heads are then ordered by that value and the first `E_s`
//! evictable rows are marked. Finally each head is compacted so the marked
//! slots fill its trailing blocks, which are freed.

use serde::Serialize;

use crate::block_manager::BlockManager;
use crate::cache::{BlockTables, HeadId, SlotHandle, UnifiedKVCache};
use crate::error::{KvError, Result};
use crate::metrics::MetricsStore;
use crate::SeqId;

/// Metric view of one slot, as seen by the sorter.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SlotMetric {
    /// Unused slot in the head's last block.
    Empty,
    Live {
        metric: f64,
        logical: usize,
    },
    /// Never evictable; sorts after everything else.
    Protected {
        logical: usize,
    },
}

impl SlotMetric {
    pub fn sort_value(&self) -> f64 {
        match *self {
            SlotMetric::Empty => 0.0,
            SlotMetric::Live { metric, .. } => metric,
            SlotMetric::Protected { .. } => f64::INFINITY,
        }
    }

    fn cmp_key(&self, slot: usize) -> (f64, u8, usize) {
        match *self {
            SlotMetric::Empty => (0.0, 0, slot),
            SlotMetric::Live { metric, logical } => (metric, 1, logical),
            SlotMetric::Protected { logical } => (f64::INFINITY, 1, logical),
        }
    }

    pub fn is_empty(&self) -> bool {
        matches!(self, SlotMetric::Empty)
    }
}

/// One head's slots in table order (`HeadCacheView`).
#[derive(Debug, Clone, PartialEq)]
pub struct HeadView {
    /// Flat head index `layer * H + kv_head`.
    pub head: usize,
    /// Live KVs, `C_h`.
    pub live: usize,
    pub slots: Vec<SlotMetric>,
}

impl HeadView {
    pub fn blocks(&self, block_size: usize) -> usize {
        self.slots.len() / block_size
    }
}

/// All head caches of one sequence, in head order.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceView {
    pub seq: SeqId,
    pub block_size: usize,
    pub heads: Vec<HeadView>,
}

/// Builds the metric view of `seq` from the tables and the slot store.
pub fn sequence_view(tables: &BlockTables, store: &MetricsStore, seq: SeqId) -> Result<SequenceView> {
    let t = tables.sequence(seq)?;
    let heads = (0..tables.heads_per_seq())
        .map(|h| {
            let live = t.context_lens[h];
            let slots = tables
                .head_slots(seq, h)?
                .into_iter()
                .enumerate()
                .map(|(i, slot)| {
                    if i >= live {
                        return SlotMetric::Empty;
                    }
                    let m = store.get(slot);
                    if m.protected || m.fresh {
                        SlotMetric::Protected { logical: m.logical }
                    } else {
                        SlotMetric::Live {
                            metric: m.metric,
                            logical: m.logical,
                        }
                    }
                })
                .collect();
            Ok(HeadView { head: h, live, slots })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SequenceView {
        seq,
        block_size: tables.block_size(),
        heads,
    })
}

/// A head's slots after sorting by metric.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SortedHead {
    /// `order[k]` is the table-order slot holding the `k`-th smallest metric.
    pub order: Vec<usize>,
    pub values: Vec<f64>,
}

/// Sorts each head's slots ascending by metric. Empty slots come first, ties
/// are broken by logical index.
pub fn sort_by_head_metric(view: &SequenceView) -> Vec<SortedHead> {
    view.heads
        .iter()
        .map(|h| {
            let mut order: Vec<usize> = (0..h.slots.len()).collect();
            order.sort_by(|&a, &b| {
                let (va, ca, la) = h.slots[a].cmp_key(a);
                let (vb, cb, lb) = h.slots[b].cmp_key(b);
                va.total_cmp(&vb).then(ca.cmp(&cb)).then(la.cmp(&lb))
            });
            let values = order.iter().map(|&i| h.slots[i].sort_value()).collect();
            SortedHead { order, values }
        })
        .collect()
}

/// `m(h, e)` for `e = 1..=blocks`: last entry of each sorted row of `b`.
pub fn eviction_thresholds(sorted: &[SortedHead], block_size: usize) -> Vec<Vec<f64>> {
    sorted
        .iter()
        .map(|h| h.values.chunks(block_size).map(|row| row[row.len() - 1]).collect())
        .collect()
}

/// Blocks each head may give up: never its last block, never a row holding a
/// protected slot.
pub fn evictable_blocks(thresholds: &[Vec<f64>]) -> Vec<usize> {
    thresholds
        .iter()
        .map(|rows| {
            let finite = rows.iter().take_while(|m| m.is_finite()).count();
            finite.min(rows.len().saturating_sub(1))
        })
        .collect()
}

/// One row of `b` sorted slots: a candidate block eviction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CandidateBlock {
    /// Position of the head within the sequence view.
    pub head: usize,
    pub row: usize,
    pub max_metric: f64,
}

/// Orders all rows of a sequence by their largest metric; ties by
/// `(head, row)`. Rows of a head stay in row order.
pub fn order_candidate_blocks(thresholds: &[Vec<f64>]) -> Vec<CandidateBlock> {
    let mut out: Vec<CandidateBlock> = thresholds
        .iter()
        .enumerate()
        .flat_map(|(head, rows)| {
            rows.iter()
                .enumerate()
                .map(move |(row, &max_metric)| CandidateBlock { head, row, max_metric })
        })
        .collect();
    out.sort_by(|a, b| {
        a.max_metric
            .total_cmp(&b.max_metric)
            .then(a.head.cmp(&b.head))
            .then(a.row.cmp(&b.row))
    });
    out
}

/// Which slots of each head are scheduled for eviction.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvictionMask {
    /// Blocks evicted per head, `e_h`.
    pub blocks_per_head: Vec<usize>,
    /// Mask in sorted order.
    pub sorted: Vec<Vec<bool>>,
    /// Mask in table (slot) order.
    pub slots: Vec<Vec<bool>>,
}

/// Marks the first `budget` evictable candidate rows of the sequence.
pub fn eviction_mask(
    view: &SequenceView,
    sorted: &[SortedHead],
    candidates: &[CandidateBlock],
    evictable: &[usize],
    budget: usize,
) -> Result<EvictionMask> {
    let b = view.block_size;
    let mut blocks_per_head = vec![0usize; view.heads.len()];
    let mut taken = 0;
    for c in candidates {
        if taken == budget {
            break;
        }
        if c.row < evictable[c.head] {
            debug_assert_eq!(
                c.row, blocks_per_head[c.head],
                "rows must be taken as a per-head prefix"
            );
            blocks_per_head[c.head] += 1;
            taken += 1;
        }
    }
    if taken < budget {
        return Err(KvError::Budget {
            seq: view.seq,
            requested: budget,
            evictable: taken,
        });
    }
    let mut sorted_mask = Vec::with_capacity(view.heads.len());
    let mut slot_mask = Vec::with_capacity(view.heads.len());
    for (h, head) in view.heads.iter().enumerate() {
        let n = head.slots.len();
        let cut = blocks_per_head[h] * b;
        let w5: Vec<bool> = (0..n).map(|k| k < cut).collect();
        let mut w7 = vec![false; n];
        for (k, &slot) in sorted[h].order.iter().enumerate() {
            w7[slot] = w5[k];
        }
        sorted_mask.push(w5);
        slot_mask.push(w7);
    }
    Ok(EvictionMask {
        blocks_per_head,
        sorted: sorted_mask,
        slots: slot_mask,
    })
}

/// Runs sort, threshold, ordering, and masking for one sequence.
pub fn plan_eviction(view: &SequenceView, budget: usize) -> Result<EvictionMask> {
    let sorted = sort_by_head_metric(view);
    let thresholds = eviction_thresholds(&sorted, view.block_size);
    let candidates = order_candidate_blocks(&thresholds);
    eviction_mask(view, &sorted, &candidates, &evictable_blocks(&thresholds), budget)
}

/// Largest `E_s` the sequence can currently honor.
pub fn evictable_total(view: &SequenceView) -> usize {
    let sorted = sort_by_head_metric(view);
    evictable_blocks(&eviction_thresholds(&sorted, view.block_size))
        .iter()
        .sum()
}

/// A kept KV copied from one slot to another during compaction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Relocation {
    pub head: HeadId,
    pub from: SlotHandle,
    pub to: SlotHandle,
}

/// Compacts one head so that its last `evicted_blocks` blocks hold only
/// marked (evicted or empty) slots.
///
/// `slots` are the head's slots in table order and `mask` the eviction mask in
/// the same order. Walking the eviction range backwards, every kept KV found
/// there is copied (key, value, and metadata) into the earliest marked slot
/// before the range. Logical indices of the kept KVs are then renumbered to
/// `0..C'` in their original relative order.
#[allow(clippy::too_many_arguments)]
pub fn move_cache(
    cache: &mut UnifiedKVCache,
    store: &mut MetricsStore,
    head: HeadId,
    slots: &[SlotHandle],
    mask: &[bool],
    evicted_blocks: usize,
    block_size: usize,
) -> Result<Vec<Relocation>> {
    let n = slots.len();
    if mask.len() != n || !n.is_multiple_of(block_size) || evicted_blocks * block_size > n {
        return Err(KvError::ScheduleCorruption(format!(
            "{n} slots, {} mask entries, {evicted_blocks} blocks of {block_size}",
            mask.len()
        )));
    }
    let marked = mask.iter().filter(|&&m| m).count();
    if marked != evicted_blocks * block_size {
        return Err(KvError::ScheduleCorruption(format!(
            "{marked} marked slots cannot fill {evicted_blocks} blocks of {block_size}"
        )));
    }
    let mut log = Vec::new();
    if evicted_blocks == 0 {
        return Ok(log);
    }
    let end = n - evicted_blocks * block_size;
    let mut w = mask.to_vec();
    let mut i = 0;
    for j in (end..n).rev() {
        if w[j] {
            continue;
        }
        while i < end && !w[i] {
            i += 1;
        }
        if i >= end {
            return Err(KvError::ScheduleCorruption(format!(
                "kept KV at slot {j} has no evicted slot to move into"
            )));
        }
        cache.copy_slot(slots[j], slots[i]);
        store.copy_slot(slots[j], slots[i]);
        log.push(Relocation {
            head,
            from: slots[j],
            to: slots[i],
        });
        w[i] = false;
        w[j] = true;
        i += 1;
    }
    let mut kept: Vec<(usize, SlotHandle)> = slots[..end].iter().map(|&s| (store.get(s).logical, s)).collect();
    kept.sort_by_key(|&(logical, _)| logical);
    for (rank, (_, slot)) in kept.into_iter().enumerate() {
        store.get_mut(slot).logical = rank;
    }
    Ok(log)
}

/// Per-sequence outcome of one compression round.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SequenceSchedule {
    pub seq: SeqId,
    /// Block-eviction budget `E_s`.
    pub budget: usize,
    /// `(head, e_h)` for heads that gave up blocks.
    pub evicted_blocks: Vec<(HeadId, usize)>,
    /// Live KVs removed (excludes absorbed empty slots).
    pub kvs_evicted: usize,
    pub freed_blocks: Vec<usize>,
    pub relocations: Vec<Relocation>,
}

/// Output of [`compress`] for a whole compression batch.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct CompressionSchedule {
    pub sequences: Vec<SequenceSchedule>,
}

impl CompressionSchedule {
    pub fn blocks_freed(&self) -> usize {
        self.sequences.iter().map(|s| s.freed_blocks.len()).sum()
    }
}

/// Drops the trailing `e_h` blocks of every head with a nonzero count and sets
/// its context length to the kept count. Requires [`move_cache`] to have run.
pub fn free_schedule_blocks(
    tables: &mut BlockTables,
    blocks: &mut BlockManager,
    store: &mut MetricsStore,
    seq: SeqId,
    blocks_per_head: &[usize],
) -> Result<Vec<usize>> {
    let b = tables.block_size();
    let mut freed = Vec::new();
    for (h, &e) in blocks_per_head.iter().enumerate() {
        if e == 0 {
            continue;
        }
        let t = tables.sequence_mut(seq)?;
        let held = t.blocks[h].len();
        if e >= held + usize::from(held == 0) {
            return Err(KvError::ScheduleCorruption(format!(
                "head {h} of seq {seq} cannot free {e} of {held} blocks"
            )));
        }
        let tail = t.blocks[h][held - e..].to_vec();
        t.context_lens[h] = (held - e) * b;
        for &block in &tail {
            for offset in 0..b {
                store.clear(SlotHandle { block, offset });
            }
        }
        freed.extend(tail);
    }
    blocks.free_blocks(tables, &freed)?;
    Ok(freed)
}

/// Compresses every `(seq, E_s)` pair in the batch: plan, compact, free.
pub fn compress(
    batch: &[(SeqId, usize)],
    cache: &mut UnifiedKVCache,
    tables: &mut BlockTables,
    store: &mut MetricsStore,
    blocks: &mut BlockManager,
) -> Result<CompressionSchedule> {
    let mut schedule = CompressionSchedule::default();
    let b = tables.block_size();
    for &(seq, budget) in batch {
        let view = sequence_view(tables, store, seq)?;
        let mask = plan_eviction(&view, budget)?;
        let mut relocations = Vec::new();
        let mut evicted_blocks = Vec::new();
        let mut kvs_evicted = 0;
        for (h, &e) in mask.blocks_per_head.iter().enumerate() {
            if e == 0 {
                continue;
            }
            let head = tables.head_id(view.heads[h].head);
            let slots = tables.head_slots(seq, view.heads[h].head)?;
            relocations.extend(move_cache(cache, store, head, &slots, &mask.slots[h], e, b)?);
            let empties = view.heads[h].slots.len() - view.heads[h].live;
            kvs_evicted += e * b - empties;
            evicted_blocks.push((head, e));
        }
        let freed_blocks = free_schedule_blocks(tables, blocks, store, seq, &mask.blocks_per_head)?;
        schedule.sequences.push(SequenceSchedule {
            seq,
            budget,
            evicted_blocks,
            kvs_evicted,
            freed_blocks,
            relocations,
        });
    }
    Ok(schedule)
}
