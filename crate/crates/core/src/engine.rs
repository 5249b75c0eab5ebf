//! Deterministic prefill/decode scheduler with compression rounds.
//!
//! One call to [`Engine::step`] is one scheduler iteration:
//!
//! 1. admit waiting sequences (FIFO) while the pool covers their prefill plus
//!    one decode step of headroom for the batch;
//! 2. compress if a trigger fires on the new prefills, then on the step tick;
//! 3. allocate decode blocks, compressing and then preempting (recompute) on
//!    shortfall;
//! 4. decode one token for every running sequence and fold its attention
//!    into the eviction metrics;
//! 5. retire finished sequences.

use std::collections::{BTreeMap, VecDeque};

use ndarray::{Array2, Array3, Axis};
use serde::{Deserialize, Serialize};

use crate::attention::{gqa_attention_with_weights, paged_attention, AttentionConfig};
use crate::block_manager::{blocks_needed_prefill, AllocationKind, AllocationRequest, BlockManager, PreemptionPolicy};
use crate::cache::{append_kv, fragmentation, BlockTables, HeadId, SlotHandle, UnifiedKVCache};
use crate::compression::{compress, evictable_total, sequence_view, CompressionSchedule};
use crate::error::{KvError, Result};
use crate::metrics::{accumulate_decode, MetricConfig, MetricStrategy, MetricsStore, SlotMeta};
use crate::policy::{budget_to_blocks, select_compression_batch, BudgetRule, CompressionPolicy, TriggerEvent};
use crate::registry::{build_metric, preemption_policies, trigger_presets, TriggerParams};
use crate::sequence::{SeqStatus, SequenceState};
use crate::SeqId;

/// Query, key, and value vectors one token produces at one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenActivations {
    /// `(n_q, d)`
    pub query: Array2<f64>,
    /// `(n_k, d)`
    pub key: Array2<f64>,
    /// `(n_k, d)`
    pub value: Array2<f64>,
}

/// Supplies activations for `(sequence, token position, layer)`. Must be a
/// pure function so that recomputation after preemption reproduces the cache.
pub trait ActivationSource: Send + Sync {
    fn token(&self, seq: SeqId, position: usize, layer: usize) -> TokenActivations;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EngineConfig {
    pub attention: AttentionConfig,
    pub block_size: usize,
    pub num_blocks: usize,
    pub metric: MetricConfig,
    pub budget: BudgetRule,
    pub policy: String,
    pub triggers: TriggerParams,
    /// Max live KVs per compression batch; `None` means unlimited.
    pub kv_limit: Option<usize>,
    pub preemption: String,
}

impl EngineConfig {
    pub fn validate(&self) -> Result<()> {
        self.attention.validate()?;
        self.metric.validate()?;
        if self.block_size == 0 {
            return Err(KvError::config("block_size", "must be >= 1"));
        }
        if self.num_blocks == 0 {
            return Err(KvError::config("num_blocks", "must be >= 1"));
        }
        if let BudgetRule::Rate { rate, .. } = self.budget {
            if !(rate.is_finite() && rate >= 1.0) {
                return Err(KvError::config("rate", "compression rate must be finite and >= 1"));
            }
        }
        Ok(())
    }

    pub fn heads_per_seq(&self) -> usize {
        self.attention.num_layers * self.attention.kv_heads
    }
}

/// Counters for one scheduler iteration.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepReport {
    pub step: u64,
    /// Sequences that decoded a token this step.
    pub batch_size: usize,
    pub admitted: usize,
    pub waiting: usize,
    pub free_blocks: usize,
    pub allocated_blocks: usize,
    pub fragmentation: usize,
    pub compressions: usize,
    pub sequences_compressed: usize,
    pub blocks_freed: usize,
    pub kvs_evicted: usize,
    pub preemptions: usize,
    pub tokens_generated: usize,
    pub finished: usize,
}

/// One sequence's share of a compression round.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CompressionRecord {
    pub step: u64,
    pub seq: SeqId,
    pub budget_blocks: usize,
    pub blocks_freed: usize,
    pub kvs_evicted: usize,
}

pub struct Engine {
    cfg: EngineConfig,
    cache: UnifiedKVCache,
    tables: BlockTables,
    blocks: BlockManager,
    store: MetricsStore,
    metric: Box<dyn MetricStrategy>,
    policy: CompressionPolicy,
    victim: Box<dyn PreemptionPolicy>,
    source: Box<dyn ActivationSource>,
    seqs: BTreeMap<SeqId, SequenceState>,
    waiting: VecDeque<SeqId>,
    running: Vec<SeqId>,
    step: u64,
    admissions: u64,
    records: Vec<CompressionRecord>,
    last_schedule: Option<CompressionSchedule>,
}

impl Engine {
    pub fn new(cfg: EngineConfig, source: Box<dyn ActivationSource>) -> Result<Self> {
        cfg.validate()?;
        let metric = build_metric(&cfg.metric)?;
        let triggers = trigger_presets().build(&cfg.policy, &cfg.triggers)?;
        let victim = preemption_policies().build(&cfg.preemption, &())?;
        let a = cfg.attention;
        Ok(Self {
            cache: UnifiedKVCache::new(cfg.num_blocks, cfg.block_size, a.head_dim),
            tables: BlockTables::new(a.num_layers, a.kv_heads, cfg.block_size),
            blocks: BlockManager::new(cfg.num_blocks),
            store: MetricsStore::new(cfg.num_blocks, cfg.block_size),
            metric,
            policy: CompressionPolicy {
                triggers,
                kv_limit: cfg.kv_limit.unwrap_or(usize::MAX),
            },
            victim,
            source,
            seqs: BTreeMap::new(),
            waiting: VecDeque::new(),
            running: Vec::new(),
            step: 0,
            admissions: 0,
            records: Vec::new(),
            last_schedule: None,
            cfg,
        })
    }

    pub fn config(&self) -> &EngineConfig {
        &self.cfg
    }

    pub fn cache(&self) -> &UnifiedKVCache {
        &self.cache
    }

    pub fn tables(&self) -> &BlockTables {
        &self.tables
    }

    pub fn blocks(&self) -> &BlockManager {
        &self.blocks
    }

    pub fn metrics(&self) -> &MetricsStore {
        &self.store
    }

    pub fn sequences(&self) -> impl Iterator<Item = &SequenceState> {
        self.seqs.values()
    }

    pub fn sequence(&self, id: SeqId) -> Option<&SequenceState> {
        self.seqs.get(&id)
    }

    pub fn running(&self) -> &[SeqId] {
        &self.running
    }

    pub fn waiting(&self) -> impl Iterator<Item = SeqId> + '_ {
        self.waiting.iter().copied()
    }

    pub fn compression_records(&self) -> &[CompressionRecord] {
        &self.records
    }

    /// Schedule produced by the most recent compression round.
    pub fn last_schedule(&self) -> Option<&CompressionSchedule> {
        self.last_schedule.as_ref()
    }

    pub fn current_step(&self) -> u64 {
        self.step
    }

    pub fn is_idle(&self) -> bool {
        self.waiting.is_empty() && self.running.is_empty()
    }

    pub fn add_request(&mut self, id: SeqId, prompt_len: usize, max_output: usize) -> Result<()> {
        if prompt_len == 0 {
            return Err(KvError::config("prompt_len", "must be >= 1"));
        }
        if self.seqs.contains_key(&id) {
            return Err(KvError::AlreadyAllocated(id));
        }
        let a = self.cfg.attention;
        let full = blocks_needed_prefill(prompt_len + max_output, a.num_layers, a.kv_heads, self.cfg.block_size);
        if full > self.cfg.num_blocks {
            return Err(KvError::InfeasibleWorkload(format!(
                "request {id} needs {full} blocks uncompressed but the cache has {}",
                self.cfg.num_blocks
            )));
        }
        self.seqs.insert(id, SequenceState::new(id, prompt_len, max_output));
        self.waiting.push_back(id);
        Ok(())
    }

    /// Runs one scheduler iteration.
    pub fn step(&mut self) -> Result<StepReport> {
        let mut report = StepReport {
            step: self.step,
            ..Default::default()
        };
        self.store.end_step();

        let admitted = self.admit()?;
        report.admitted = admitted;
        if self.policy.fires(&TriggerEvent::Prefilled { count: admitted }) {
            self.compression_round(&mut report)?;
        }
        let tick = TriggerEvent::Tick {
            step: self.step,
            uncompressed_tokens: self.running.iter().map(|id| self.seqs[id].uncompressed_tokens).sum(),
        };
        if !self.running.is_empty() && self.policy.fires(&tick) {
            self.compression_round(&mut report)?;
        }

        self.allocate_decode(&mut report)?;
        let batch = self.running.clone();
        for &id in &batch {
            self.decode_token(id)?;
        }
        report.batch_size = batch.len();
        report.tokens_generated = batch.len();

        for id in batch {
            if self.seqs[&id].is_finished() {
                self.release(id)?;
                self.running.retain(|&r| r != id);
                self.seqs.get_mut(&id).expect("known sequence").status = SeqStatus::Finished;
                report.finished += 1;
            }
        }

        report.waiting = self.waiting.len();
        report.free_blocks = self.blocks.free_count();
        report.allocated_blocks = self.blocks.allocated_count();
        report.fragmentation = fragmentation(&self.tables);
        self.step += 1;
        Ok(report)
    }

    /// Steps until every request has finished.
    pub fn run_to_completion(&mut self, max_idle_steps: u64) -> Result<Vec<StepReport>> {
        let mut reports = Vec::new();
        let mut idle = 0;
        while !self.is_idle() {
            let r = self.step()?;
            if r.tokens_generated == 0 && r.admitted == 0 {
                idle += 1;
                if idle > max_idle_steps {
                    return Err(KvError::Stalled(idle));
                }
            } else {
                idle = 0;
            }
            reports.push(r);
        }
        Ok(reports)
    }

    fn decode_demand_running(&self) -> Result<usize> {
        Ok(self.blocks.decode_demand(&self.tables, &self.running)?.values().sum())
    }

    fn admit(&mut self) -> Result<usize> {
        let a = self.cfg.attention;
        let heads = self.cfg.heads_per_seq();
        let mut admitted = 0;
        while let Some(&id) = self.waiting.front() {
            let tokens = self.seqs[&id].total_tokens();
            let need = blocks_needed_prefill(tokens, a.num_layers, a.kv_heads, self.cfg.block_size);
            let headroom = if self.running.is_empty() {
                0
            } else {
                self.decode_demand_running()? + heads
            };
            if need + headroom > self.blocks.free_count() {
                break;
            }
            self.waiting.pop_front();
            self.prefill(id)?;
            admitted += 1;
        }
        Ok(admitted)
    }

    fn prefill(&mut self, id: SeqId) -> Result<()> {
        let a = self.cfg.attention;
        let tokens = self.seqs[&id].total_tokens();
        self.blocks.allocate_prefill(
            &mut self.tables,
            AllocationRequest {
                seq: id,
                kind: AllocationKind::Prefill,
                token_count: tokens,
            },
        )?;
        for layer in 0..a.num_layers {
            let mut q = Array3::<f64>::zeros((a.query_heads, tokens, a.head_dim));
            let mut k = Array3::<f64>::zeros((a.kv_heads, tokens, a.head_dim));
            let mut v = Array3::<f64>::zeros((a.kv_heads, tokens, a.head_dim));
            for pos in 0..tokens {
                let t = self.source.token(id, pos, layer);
                q.index_axis_mut(Axis(1), pos).assign(&t.query);
                k.index_axis_mut(Axis(1), pos).assign(&t.key);
                v.index_axis_mut(Axis(1), pos).assign(&t.value);
            }
            let (_, attn) = gqa_attention_with_weights(q.view(), k.view(), v.view(), &a)?;
            let metrics = self.metric.prefill(attn.view(), a.kv_heads);
            for kv_head in 0..a.kv_heads {
                let head = HeadId { layer, kv_head };
                for pos in 0..tokens {
                    let key = k.slice(ndarray::s![kv_head, pos, ..]);
                    let value = v.slice(ndarray::s![kv_head, pos, ..]);
                    let slot = append_kv(
                        &mut self.tables,
                        &mut self.cache,
                        id,
                        head,
                        key.as_slice().expect("contiguous row"),
                        value.as_slice().expect("contiguous row"),
                    )?;
                    self.store.set(
                        slot,
                        SlotMeta {
                            metric: metrics.values[[kv_head, pos]],
                            logical: pos,
                            position: pos,
                            protected: metrics.protected[pos],
                            fresh: false,
                        },
                    );
                }
            }
        }
        let admission_seq = self.admissions;
        self.admissions += 1;
        let s = self.seqs.get_mut(&id).expect("known sequence");
        s.status = SeqStatus::Running;
        s.admitted_at = self.step;
        s.admission_seq = admission_seq;
        s.last_compressed_at = None;
        s.uncompressed_tokens = tokens;
        self.running.push(id);
        Ok(())
    }

    /// One compression round over a staleness-ordered batch. Returns blocks freed.
    fn compression_round(&mut self, report: &mut StepReport) -> Result<usize> {
        if self.cfg.budget.is_disabled() || self.running.is_empty() {
            return Ok(0);
        }
        let candidates: Vec<(&SequenceState, usize)> = self
            .running
            .iter()
            .map(|id| Ok((&self.seqs[id], self.tables.sequence(*id)?.live_kvs())))
            .collect::<Result<_>>()?;
        let batch = select_compression_batch(&candidates, self.policy.kv_limit);
        if batch.is_empty() {
            return Ok(0);
        }
        let a = self.cfg.attention;
        let mut requests = Vec::with_capacity(batch.len());
        for &id in &batch {
            let target = self.cfg.budget.target_tokens(self.seqs[&id].total_tokens());
            let allocated = self.tables.sequence(id)?.allocated_blocks();
            let wanted = budget_to_blocks(target, a.num_layers, a.kv_heads, self.cfg.block_size, allocated);
            let view = sequence_view(&self.tables, &self.store, id)?;
            requests.push((id, wanted.min(evictable_total(&view))));
        }
        let schedule = compress(
            &requests,
            &mut self.cache,
            &mut self.tables,
            &mut self.store,
            &mut self.blocks,
        )?;
        let freed = schedule.blocks_freed();
        for s in &schedule.sequences {
            self.records.push(CompressionRecord {
                step: self.step,
                seq: s.seq,
                budget_blocks: s.budget,
                blocks_freed: s.freed_blocks.len(),
                kvs_evicted: s.kvs_evicted,
            });
            report.kvs_evicted += s.kvs_evicted;
        }
        for id in &batch {
            let s = self.seqs.get_mut(id).expect("known sequence");
            s.last_compressed_at = Some(self.step);
            s.uncompressed_tokens = 0;
        }
        report.compressions += 1;
        report.sequences_compressed += batch.len();
        report.blocks_freed += freed;
        self.last_schedule = Some(schedule);
        Ok(freed)
    }

    fn allocate_decode(&mut self, report: &mut StepReport) -> Result<()> {
        let mut compress_allowed = true;
        let mut rounds = 0;
        loop {
            if self.running.is_empty() {
                return Ok(());
            }
            match self.blocks.allocate_decode_step(&mut self.tables, &self.running) {
                Ok(_) => return Ok(()),
                Err(KvError::PreemptionNeeded { .. }) => {}
                Err(e) => return Err(e),
            }
            if compress_allowed && rounds <= self.running.len() && self.policy.fires(&TriggerEvent::PreemptionPending) {
                rounds += 1;
                if self.compression_round(report)? > 0 {
                    continue;
                }
                compress_allowed = false;
            }
            let running: Vec<&SequenceState> = self.running.iter().map(|id| &self.seqs[id]).collect();
            let victim = self.victim.select(&running)?;
            self.release(victim)?;
            self.running.retain(|&r| r != victim);
            self.seqs.get_mut(&victim).expect("known sequence").status = SeqStatus::Preempted;
            self.waiting.push_front(victim);
            report.preemptions += 1;
        }
    }

    fn decode_token(&mut self, id: SeqId) -> Result<()> {
        let a = self.cfg.attention;
        let pos = self.seqs[&id].total_tokens();
        let r = a.group_size();
        for layer in 0..a.num_layers {
            let t = self.source.token(id, pos, layer);
            for kv_head in 0..a.kv_heads {
                let head = HeadId { layer, kv_head };
                let logical = self.tables.context_len(id, self.tables.head_index(head))?;
                let key = t.key.row(kv_head).to_vec();
                let value = t.value.row(kv_head).to_vec();
                let slot = append_kv(&mut self.tables, &mut self.cache, id, head, &key, &value)?;
                self.store.set(
                    slot,
                    SlotMeta {
                        metric: 0.0,
                        logical,
                        position: pos,
                        protected: false,
                        fresh: true,
                    },
                );
            }
            let out = paged_attention(&self.cache, &self.tables, id, layer, t.query.view(), &a)?;
            for kv_head in 0..a.kv_heads {
                let rows: Vec<&[f64]> = out.weights[kv_head * r..(kv_head + 1) * r]
                    .iter()
                    .map(Vec::as_slice)
                    .collect();
                accumulate_decode(
                    &mut self.store,
                    &self.tables,
                    id,
                    HeadId { layer, kv_head },
                    &rows,
                    pos,
                    self.metric.as_ref(),
                )?;
            }
        }
        let s = self.seqs.get_mut(&id).expect("known sequence");
        s.generated += 1;
        s.uncompressed_tokens += 1;
        Ok(())
    }

    /// Frees every block of `id` and zeroes its slot metadata.
    fn release(&mut self, id: SeqId) -> Result<usize> {
        let b = self.cfg.block_size;
        let t = self.tables.sequence(id)?;
        for &block in t.blocks.iter().flatten() {
            for offset in 0..b {
                self.store.clear(SlotHandle { block, offset });
            }
        }
        self.blocks.free_sequence(&mut self.tables, id)
    }
}
