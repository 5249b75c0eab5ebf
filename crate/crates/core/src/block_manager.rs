//! Block allocation over the unified cache.
//!
//! Prefill demand is a pure function of the prompt length, and decode demand
//! is a pure function of the current context lengths, so both are computed
//! for the whole batch up front and applied all-or-nothing. New blocks are
//! always taken in ascending block-number order.

use std::collections::{BTreeMap, BTreeSet};

use crate::cache::BlockTables;
use crate::error::{KvError, Result};
use crate::sequence::SequenceState;
use crate::SeqId;

/// `l * H * ceil(L_c / b)`: blocks a fresh prefill of `token_count` tokens needs.
pub fn blocks_needed_prefill(token_count: usize, layers: usize, kv_heads: usize, block_size: usize) -> usize {
    layers * kv_heads * token_count.div_ceil(block_size)
}

/// Per-head decode demand: a head needs a block when its last block is full.
fn head_needs_block(context_len: usize, block_size: usize) -> bool {
    context_len.is_multiple_of(block_size)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AllocationKind {
    Prefill,
    Decode,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AllocationRequest {
    pub seq: SeqId,
    pub kind: AllocationKind,
    pub token_count: usize,
}

/// Free set plus an owner map used to reject double frees.
#[derive(Debug, Clone)]
pub struct BlockManager {
    num_blocks: usize,
    free: BTreeSet<usize>,
    owner: Vec<Option<(SeqId, usize)>>,
}

impl BlockManager {
    pub fn new(num_blocks: usize) -> Self {
        Self {
            num_blocks,
            free: (0..num_blocks).collect(),
            owner: vec![None; num_blocks],
        }
    }

    pub fn num_blocks(&self) -> usize {
        self.num_blocks
    }

    pub fn free_count(&self) -> usize {
        self.free.len()
    }

    pub fn allocated_count(&self) -> usize {
        self.num_blocks - self.free.len()
    }

    pub fn is_free(&self, block: usize) -> bool {
        self.free.contains(&block)
    }

    fn take(&mut self, seq: SeqId, head: usize) -> usize {
        let block = self.free.pop_first().expect("caller checked free count");
        self.owner[block] = Some((seq, head));
        block
    }

    /// Allocates `ceil(L_c / b)` blocks to every head of a new sequence.
    pub fn allocate_prefill(&mut self, tables: &mut BlockTables, req: AllocationRequest) -> Result<usize> {
        if req.kind != AllocationKind::Prefill || req.token_count == 0 {
            return Err(KvError::config("token_count", "prefill needs at least one token"));
        }
        if tables.contains(req.seq) {
            return Err(KvError::AlreadyAllocated(req.seq));
        }
        let per_head = req.token_count.div_ceil(tables.block_size());
        let needed = per_head * tables.heads_per_seq();
        if needed > self.free.len() {
            return Err(KvError::PreemptionNeeded {
                needed,
                free: self.free.len(),
            });
        }
        tables.insert_sequence(req.seq)?;
        let heads = tables.heads_per_seq();
        let mut fresh = Vec::with_capacity(heads);
        for h in 0..heads {
            fresh.push((0..per_head).map(|_| self.take(req.seq, h)).collect::<Vec<_>>());
        }
        let t = tables.sequence_mut(req.seq)?;
        for (h, blocks) in fresh.into_iter().enumerate() {
            t.blocks[h] = blocks;
        }
        Ok(needed)
    }

    /// Blocks the next decode step would allocate for `batch`, per sequence.
    pub fn decode_demand(&self, tables: &BlockTables, batch: &[SeqId]) -> Result<BTreeMap<SeqId, usize>> {
        let b = tables.block_size();
        let mut demand = BTreeMap::new();
        for &seq in batch {
            let t = tables.sequence(seq)?;
            let n = t.context_lens.iter().filter(|&&c| head_needs_block(c, b)).count();
            demand.insert(seq, n);
        }
        Ok(demand)
    }

    /// Appends one block to every head whose last block is full. Evaluated as a
    /// function of all context lengths, so batch order does not matter.
    pub fn allocate_decode_step(
        &mut self,
        tables: &mut BlockTables,
        batch: &[SeqId],
    ) -> Result<BTreeMap<SeqId, usize>> {
        let demand = self.decode_demand(tables, batch)?;
        let needed: usize = demand.values().sum();
        if needed > self.free.len() {
            return Err(KvError::PreemptionNeeded {
                needed,
                free: self.free.len(),
            });
        }
        let b = tables.block_size();
        for &seq in demand.keys() {
            let heads = tables.heads_per_seq();
            for h in 0..heads {
                if head_needs_block(tables.sequence(seq)?.context_lens[h], b) {
                    let block = self.take(seq, h);
                    tables.sequence_mut(seq)?.blocks[h].push(block);
                }
            }
        }
        Ok(demand)
    }

    /// Returns blocks to the free set and drops their table entries. All blocks
    /// are validated before any is released.
    pub fn free_blocks(&mut self, tables: &mut BlockTables, blocks: &[usize]) -> Result<usize> {
        let mut seen = BTreeSet::new();
        for &block in blocks {
            if block >= self.num_blocks || self.owner[block].is_none() || !seen.insert(block) {
                return Err(KvError::Ownership { block });
            }
        }
        for &block in blocks {
            let (seq, head) = self.owner[block].take().expect("validated above");
            if let Ok(t) = tables.sequence_mut(seq) {
                t.blocks[head].retain(|&b| b != block);
            }
            self.free.insert(block);
        }
        Ok(blocks.len())
    }

    /// Releases every block of a sequence and removes its tables.
    pub fn free_sequence(&mut self, tables: &mut BlockTables, seq: SeqId) -> Result<usize> {
        let t = tables.remove_sequence(seq)?;
        let blocks: Vec<usize> = t.blocks.into_iter().flatten().collect();
        for &block in &blocks {
            match self.owner[block] {
                Some((s, _)) if s == seq => {
                    self.owner[block] = None;
                    self.free.insert(block);
                }
                _ => return Err(KvError::Ownership { block }),
            }
        }
        Ok(blocks.len())
    }

    /// Checks that the free set and the tables partition `[0, N)`.
    pub fn check_conservation(&self, tables: &BlockTables) -> Result<()> {
        let mut seen = vec![false; self.num_blocks];
        for (seq, block) in tables.owned_blocks() {
            if block >= self.num_blocks || seen[block] {
                return Err(KvError::Corruption(format!("block {block} owned twice (seq {seq})")));
            }
            if self.free.contains(&block) {
                return Err(KvError::Corruption(format!(
                    "block {block} owned by seq {seq} but free"
                )));
            }
            seen[block] = true;
        }
        let owned = seen.iter().filter(|&&s| s).count();
        if owned + self.free.len() != self.num_blocks {
            return Err(KvError::Corruption(format!(
                "{owned} owned + {} free != {} blocks",
                self.free.len(),
                self.num_blocks
            )));
        }
        Ok(())
    }
}

/// Chooses which running sequence gives up its cache when allocation fails.
pub trait PreemptionPolicy: Send + Sync + std::fmt::Debug {
    fn name(&self) -> &'static str;
    fn select(&self, running: &[&SequenceState]) -> Result<SeqId>;
}

/// Most recently admitted running sequence.
#[derive(Debug, Clone, Copy, Default)]
pub struct LifoPreemption;

impl PreemptionPolicy for LifoPreemption {
    fn name(&self) -> &'static str {
        "lifo"
    }

    fn select(&self, running: &[&SequenceState]) -> Result<SeqId> {
        running
            .iter()
            .max_by_key(|s| (s.admitted_at, s.admission_seq, s.id))
            .map(|s| s.id)
            .ok_or(KvError::NoVictim)
    }
}

/// Victim choice under the default (LIFO) policy.
pub fn preempt_select(running: &[&SequenceState]) -> Result<SeqId> {
    LifoPreemption.select(running)
}
