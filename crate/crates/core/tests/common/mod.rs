//! Fixtures shared by the integration tests: a hand-driven cache (tables,
//! store, allocator) and small dense reference helpers.

#![allow(dead_code)]

use kvcompress::block_manager::{AllocationKind, AllocationRequest, BlockManager};
use kvcompress::cache::append_kv;
use kvcompress::metrics::{MetricsStore, SlotMeta};
use kvcompress::{BlockTables, HeadId, SeqId, UnifiedKVCache};
use ndarray::Array3;
use rand::Rng;

/// Everything a compression round touches, driven directly by the tests.
pub struct Fixture {
    pub cache: UnifiedKVCache,
    pub tables: BlockTables,
    pub store: MetricsStore,
    pub blocks: BlockManager,
    pub layers: usize,
    pub kv_heads: usize,
    pub block_size: usize,
    pub head_dim: usize,
}

/// One live KV as read back from the cache, with its metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    pub key: Vec<f64>,
    pub value: Vec<f64>,
    pub meta: SlotMeta,
}

impl Fixture {
    pub fn new(layers: usize, kv_heads: usize, block_size: usize, head_dim: usize, num_blocks: usize) -> Self {
        Self {
            cache: UnifiedKVCache::new(num_blocks, block_size, head_dim),
            tables: BlockTables::new(layers, kv_heads, block_size),
            store: MetricsStore::new(num_blocks, block_size),
            blocks: BlockManager::new(num_blocks),
            layers,
            kv_heads,
            block_size,
            head_dim,
        }
    }

    pub fn heads(&self) -> usize {
        self.layers * self.kv_heads
    }

    /// Allocates `len` tokens for every head of a new sequence without writing.
    pub fn allocate(&mut self, seq: SeqId, len: usize) {
        self.blocks
            .allocate_prefill(
                &mut self.tables,
                AllocationRequest {
                    seq,
                    kind: AllocationKind::Prefill,
                    token_count: len,
                },
            )
            .expect("prefill allocation");
    }

    /// Writes one KV at the end of head `h`, whose block must exist.
    pub fn write(&mut self, seq: SeqId, h: usize, key: &[f64], value: &[f64], meta: SlotMeta) {
        let head = self.tables.head_id(h);
        let slot = append_kv(&mut self.tables, &mut self.cache, seq, head, key, value).expect("append");
        self.store.set(slot, meta);
    }

    /// Allocates decode blocks for `seq` as needed and appends one KV per head.
    pub fn decode(&mut self, seq: SeqId, mut kv: impl FnMut(usize, usize) -> (Vec<f64>, Vec<f64>, SlotMeta)) {
        self.blocks
            .allocate_decode_step(&mut self.tables, &[seq])
            .expect("decode allocation");
        for h in 0..self.heads() {
            let pos = self.tables.context_len(seq, h).unwrap();
            let (k, v, meta) = kv(h, pos);
            self.write(seq, h, &k, &v, meta);
        }
    }

    /// Live KVs of head `h` in slot order.
    pub fn entries(&self, seq: SeqId, h: usize) -> Vec<Entry> {
        let len = self.tables.context_len(seq, h).unwrap();
        (0..len)
            .map(|i| {
                let slot = self.tables.slot(seq, h, i).unwrap();
                Entry {
                    key: self.cache.key(slot).to_vec(),
                    value: self.cache.value(slot).to_vec(),
                    meta: self.store.get(slot),
                }
            })
            .collect()
    }

    pub fn head_id(&self, h: usize) -> HeadId {
        self.tables.head_id(h)
    }
}

pub fn meta(metric: f64, position: usize) -> SlotMeta {
    SlotMeta {
        metric,
        logical: position,
        position,
        protected: false,
        fresh: false,
    }
}

pub fn random_tensor(rng: &mut impl Rng, shape: (usize, usize, usize)) -> Array3<f64> {
    Array3::from_shape_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

/// Single-query softmax attention over an explicit list of KVs.
pub fn naive_attention(q: &[f64], kvs: &[(Vec<f64>, Vec<f64>)]) -> Vec<f64> {
    let scale = 1.0 / (q.len() as f64).sqrt();
    let logits: Vec<f64> = kvs
        .iter()
        .map(|(k, _)| k.iter().zip(q).map(|(a, b)| a * b).sum::<f64>() * scale)
        .collect();
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
    let z: f64 = e.iter().sum();
    let mut out = vec![0.0; kvs[0].1.len()];
    for (w, (_, v)) in e.iter().zip(kvs) {
        for (o, x) in out.iter_mut().zip(v) {
            *o += w / z * x;
        }
    }
    out
}

pub fn max_abs_diff(a: impl IntoIterator<Item = f64>, b: impl IntoIterator<Item = f64>) -> f64 {
    a.into_iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}
