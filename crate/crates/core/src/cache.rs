//! Unified physical KV store and per-head block tables.
//!
//! All layers and KV heads share one allocation of `N` blocks, each holding
//! `b` slots of `d`-dimensional keys and values. A block belongs to exactly one
//! `(sequence, layer, kv_head)` table, so heads of the same sequence can hold
//! different numbers of KVs without wasting more than `b - 1` slots each.
//!
//! Slots are addressed row-major: slot `(n, o)` lives at flat index `n * b + o`.

use std::collections::BTreeMap;

use serde::Serialize;

use crate::error::{KvError, Result};
use crate::SeqId;

/// Location of one KV slot in the unified store.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub struct SlotHandle {
    pub block: usize,
    pub offset: usize,
}

impl SlotHandle {
    #[inline]
    pub fn flat(self, block_size: usize) -> usize {
        self.block * block_size + self.offset
    }
}

/// `(layer, kv_head)` pair identifying one head cache of a sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub struct HeadId {
    pub layer: usize,
    pub kv_head: usize,
}

/// Single contiguous `N x b x d` key store plus a matching value store.
#[derive(Debug, Clone)]
pub struct UnifiedKVCache {
    num_blocks: usize,
    block_size: usize,
    head_dim: usize,
    keys: Vec<f64>,
    values: Vec<f64>,
}

impl UnifiedKVCache {
    pub fn new(num_blocks: usize, block_size: usize, head_dim: usize) -> Self {
        assert!(
            block_size > 0 && head_dim > 0,
            "block size and head dim must be positive"
        );
        let len = num_blocks * block_size * head_dim;
        Self {
            num_blocks,
            block_size,
            head_dim,
            keys: vec![0.0; len],
            values: vec![0.0; len],
        }
    }

    pub fn num_blocks(&self) -> usize {
        self.num_blocks
    }

    pub fn block_size(&self) -> usize {
        self.block_size
    }

    pub fn head_dim(&self) -> usize {
        self.head_dim
    }

    fn range(&self, slot: SlotHandle) -> std::ops::Range<usize> {
        debug_assert!(slot.block < self.num_blocks && slot.offset < self.block_size);
        let start = slot.flat(self.block_size) * self.head_dim;
        start..start + self.head_dim
    }

    pub fn key(&self, slot: SlotHandle) -> &[f64] {
        &self.keys[self.range(slot)]
    }

    pub fn value(&self, slot: SlotHandle) -> &[f64] {
        &self.values[self.range(slot)]
    }

    pub fn write(&mut self, slot: SlotHandle, key: &[f64], value: &[f64]) -> Result<()> {
        if key.len() != self.head_dim || value.len() != self.head_dim {
            return Err(KvError::Shape(format!(
                "expected {}-dim key/value, got {} and {}",
                self.head_dim,
                key.len(),
                value.len()
            )));
        }
        let r = self.range(slot);
        self.keys[r.clone()].copy_from_slice(key);
        self.values[r].copy_from_slice(value);
        Ok(())
    }

    /// Copies the key and value vectors of `src` over those of `dst`.
    pub fn copy_slot(&mut self, src: SlotHandle, dst: SlotHandle) {
        let s = self.range(src);
        let d = self.range(dst).start;
        self.keys.copy_within(s.clone(), d);
        self.values.copy_within(s, d);
    }
}

/// Block tables and live-KV counts for one sequence, indexed by flat head
/// index `layer * kv_heads + kv_head`.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SequenceTables {
    pub blocks: Vec<Vec<usize>>,
    pub context_lens: Vec<usize>,
}

impl SequenceTables {
    pub fn allocated_blocks(&self) -> usize {
        self.blocks.iter().map(Vec::len).sum()
    }

    pub fn live_kvs(&self) -> usize {
        self.context_lens.iter().sum()
    }
}

/// Per-sequence, per-layer, per-KV-head block tables.
#[derive(Debug, Clone)]
pub struct BlockTables {
    num_layers: usize,
    kv_heads: usize,
    block_size: usize,
    seqs: BTreeMap<SeqId, SequenceTables>,
}

impl BlockTables {
    pub fn new(num_layers: usize, kv_heads: usize, block_size: usize) -> Self {
        Self {
            num_layers,
            kv_heads,
            block_size,
            seqs: BTreeMap::new(),
        }
    }

    pub fn num_layers(&self) -> usize {
        self.num_layers
    }

    pub fn kv_heads(&self) -> usize {
        self.kv_heads
    }

    pub fn block_size(&self) -> usize {
        self.block_size
    }

    /// Number of head caches per sequence (`l * H`).
    pub fn heads_per_seq(&self) -> usize {
        self.num_layers * self.kv_heads
    }

    pub fn head_index(&self, head: HeadId) -> usize {
        debug_assert!(head.layer < self.num_layers && head.kv_head < self.kv_heads);
        head.layer * self.kv_heads + head.kv_head
    }

    pub fn head_id(&self, index: usize) -> HeadId {
        HeadId {
            layer: index / self.kv_heads,
            kv_head: index % self.kv_heads,
        }
    }

    pub fn contains(&self, seq: SeqId) -> bool {
        self.seqs.contains_key(&seq)
    }

    pub fn sequence(&self, seq: SeqId) -> Result<&SequenceTables> {
        self.seqs.get(&seq).ok_or(KvError::UnknownSequence(seq))
    }

    pub fn sequence_mut(&mut self, seq: SeqId) -> Result<&mut SequenceTables> {
        self.seqs.get_mut(&seq).ok_or(KvError::UnknownSequence(seq))
    }

    pub fn sequences(&self) -> impl Iterator<Item = (SeqId, &SequenceTables)> {
        self.seqs.iter().map(|(s, t)| (*s, t))
    }

    pub fn num_sequences(&self) -> usize {
        self.seqs.len()
    }

    /// Registers an empty table set for `seq`.
    pub fn insert_sequence(&mut self, seq: SeqId) -> Result<()> {
        if self.seqs.contains_key(&seq) {
            return Err(KvError::AlreadyAllocated(seq));
        }
        let heads = self.heads_per_seq();
        self.seqs.insert(
            seq,
            SequenceTables {
                blocks: vec![Vec::new(); heads],
                context_lens: vec![0; heads],
            },
        );
        Ok(())
    }

    pub fn remove_sequence(&mut self, seq: SeqId) -> Result<SequenceTables> {
        self.seqs.remove(&seq).ok_or(KvError::UnknownSequence(seq))
    }

    pub fn context_len(&self, seq: SeqId, head: usize) -> Result<usize> {
        Ok(self.sequence(seq)?.context_lens[head])
    }

    pub fn head_blocks(&self, seq: SeqId, head: usize) -> Result<&[usize]> {
        Ok(&self.sequence(seq)?.blocks[head])
    }

    /// Slot backing position `position` of a head, whether or not it is live.
    pub fn slot(&self, seq: SeqId, head: usize, position: usize) -> Result<SlotHandle> {
        let blocks = self.head_blocks(seq, head)?;
        let entry = position / self.block_size;
        let block = *blocks
            .get(entry)
            .ok_or(KvError::AllocationOrder { seq, head, position })?;
        Ok(SlotHandle {
            block,
            offset: position % self.block_size,
        })
    }

    /// Slots of a head in table order, covering every allocated slot.
    pub fn head_slots(&self, seq: SeqId, head: usize) -> Result<Vec<SlotHandle>> {
        let b = self.block_size;
        Ok(self
            .head_blocks(seq, head)?
            .iter()
            .flat_map(|&block| (0..b).map(move |offset| SlotHandle { block, offset }))
            .collect())
    }

    /// Every `(seq, block)` ownership pair currently recorded.
    pub fn owned_blocks(&self) -> impl Iterator<Item = (SeqId, usize)> + '_ {
        self.seqs
            .iter()
            .flat_map(|(s, t)| t.blocks.iter().flatten().map(move |b| (*s, *b)))
    }

    pub fn total_allocated(&self) -> usize {
        self.seqs.values().map(SequenceTables::allocated_blocks).sum()
    }
}

/// Reads the key and value at logical position `position` of a head.
pub fn lookup_kv<'c>(
    tables: &BlockTables,
    cache: &'c UnifiedKVCache,
    seq: SeqId,
    head: HeadId,
    position: usize,
) -> Result<(&'c [f64], &'c [f64])> {
    let h = tables.head_index(head);
    let t = tables.sequence(seq)?;
    let len = t.context_lens[h];
    if position >= len {
        return Err(KvError::Position { position, len });
    }
    let entry = position / tables.block_size;
    let block = *t.blocks[h].get(entry).ok_or_else(|| {
        KvError::Corruption(format!(
            "seq {seq} head {h} has {len} live KVs but no table entry {entry}"
        ))
    })?;
    if block >= cache.num_blocks() {
        return Err(KvError::Corruption(format!(
            "table entry {entry} of seq {seq} head {h} names block {block} outside the cache"
        )));
    }
    let slot = SlotHandle {
        block,
        offset: position % tables.block_size,
    };
    Ok((cache.key(slot), cache.value(slot)))
}

/// Writes a new KV at the end of a head and bumps its context length.
/// The target block must already be allocated.
pub fn append_kv(
    tables: &mut BlockTables,
    cache: &mut UnifiedKVCache,
    seq: SeqId,
    head: HeadId,
    key: &[f64],
    value: &[f64],
) -> Result<SlotHandle> {
    let h = tables.head_index(head);
    let position = tables.context_len(seq, h)?;
    let slot = tables.slot(seq, h, position)?;
    cache.write(slot, key, value)?;
    tables.sequence_mut(seq)?.context_lens[h] += 1;
    Ok(slot)
}

/// Allocated but unused slots summed over every head cache.
pub fn fragmentation(tables: &BlockTables) -> usize {
    let b = tables.block_size;
    tables
        .seqs
        .values()
        .flat_map(|t| t.context_lens.iter())
        .map(|&c| c.div_ceil(b) * b - c)
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_seq(layers: usize, heads: usize, b: usize, blocks_per_head: usize) -> BlockTables {
        let mut t = BlockTables::new(layers, heads, b);
        t.insert_sequence(0).unwrap();
        let mut next = 0;
        for h in 0..layers * heads {
            for _ in 0..blocks_per_head {
                t.sequence_mut(0).unwrap().blocks[h].push(next);
                next += 1;
            }
        }
        t
    }

    #[test]
    fn slot_arithmetic_at_block_size_16() {
        let mut t = BlockTables::new(1, 1, 16);
        t.insert_sequence(7).unwrap();
        t.sequence_mut(7).unwrap().blocks[0] = vec![40, 12];
        let s = t.slot(7, 0, 17).unwrap();
        assert_eq!(s, SlotHandle { block: 12, offset: 1 });
        let s0 = t.slot(7, 0, 0).unwrap();
        assert_eq!(s0, SlotHandle { block: 40, offset: 0 });
    }

    #[test]
    fn append_returns_expected_handles() {
        let mut t = one_seq(1, 1, 4, 2);
        let mut c = UnifiedKVCache::new(2, 4, 2);
        let head = HeadId { layer: 0, kv_head: 0 };
        let first = append_kv(&mut t, &mut c, 0, head, &[1.0, 2.0], &[3.0, 4.0]).unwrap();
        assert_eq!(first, SlotHandle { block: 0, offset: 0 });
        for _ in 0..3 {
            append_kv(&mut t, &mut c, 0, head, &[0.0, 0.0], &[0.0, 0.0]).unwrap();
        }
        let fifth = append_kv(&mut t, &mut c, 0, head, &[5.0, 6.0], &[7.0, 8.0]).unwrap();
        assert_eq!(fifth, SlotHandle { block: 1, offset: 0 });
        let (k, v) = lookup_kv(&t, &c, 0, head, 4).unwrap();
        assert_eq!(k, &[5.0, 6.0]);
        assert_eq!(v, &[7.0, 8.0]);
    }

    #[test]
    fn append_without_block_is_allocation_order_error() {
        let mut t = one_seq(1, 1, 2, 1);
        let mut c = UnifiedKVCache::new(1, 2, 1);
        let head = HeadId { layer: 0, kv_head: 0 };
        append_kv(&mut t, &mut c, 0, head, &[1.0], &[1.0]).unwrap();
        append_kv(&mut t, &mut c, 0, head, &[1.0], &[1.0]).unwrap();
        let err = append_kv(&mut t, &mut c, 0, head, &[1.0], &[1.0]).unwrap_err();
        assert!(matches!(err, KvError::AllocationOrder { position: 2, .. }));
    }

    #[test]
    fn lookup_errors() {
        let mut t = one_seq(1, 1, 2, 1);
        let c = UnifiedKVCache::new(1, 2, 1);
        let head = HeadId { layer: 0, kv_head: 0 };
        assert!(matches!(
            lookup_kv(&t, &c, 0, head, 0),
            Err(KvError::Position { position: 0, len: 0 })
        ));
        // Claim more live KVs than the table can address.
        t.sequence_mut(0).unwrap().context_lens[0] = 3;
        assert!(matches!(lookup_kv(&t, &c, 0, head, 2), Err(KvError::Corruption(_))));
    }

    #[test]
    fn fragmentation_counts_slack() {
        let mut t = one_seq(2, 2, 4, 2);
        for c in t.sequence_mut(0).unwrap().context_lens.iter_mut() {
            *c = 5;
        }
        assert_eq!(fragmentation(&t), 12);
        for c in t.sequence_mut(0).unwrap().context_lens.iter_mut() {
            *c = 8;
        }
        assert_eq!(fragmentation(&t), 0);
    }

    #[test]
    fn appending_3b_plus_2_uses_four_entries() {
        let b = 4;
        let mut t = one_seq(1, 1, b, 8);
        let mut c = UnifiedKVCache::new(8, b, 1);
        let head = HeadId { layer: 0, kv_head: 0 };
        let mut used = std::collections::BTreeSet::new();
        for _ in 0..3 * b + 2 {
            used.insert(append_kv(&mut t, &mut c, 0, head, &[0.0], &[0.0]).unwrap().block);
        }
        assert_eq!(used.len(), 4);
    }
}
