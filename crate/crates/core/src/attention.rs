//! Reference attention in double precision.
//!
//! Tensors are `(heads, len, dim)`. Softmax subtracts the row maximum before
//! exponentiating. Grouped-query attention indexes the shared KV head
//! (`h / r`) instead of materialising repeated keys and values.

use ndarray::{s, Array2, Array3, ArrayView2, ArrayView3, Axis};
use serde::{Deserialize, Serialize};

use crate::cache::{lookup_kv, BlockTables, HeadId, UnifiedKVCache};
use crate::error::{KvError, Result};
use crate::SeqId;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttentionConfig {
    pub query_heads: usize,
    pub kv_heads: usize,
    pub head_dim: usize,
    pub num_layers: usize,
}

impl AttentionConfig {
    pub fn new(query_heads: usize, kv_heads: usize, head_dim: usize, num_layers: usize) -> Result<Self> {
        let cfg = Self {
            query_heads,
            kv_heads,
            head_dim,
            num_layers,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.kv_heads == 0 || self.query_heads == 0 {
            return Err(KvError::config("kv_heads", "head counts must be >= 1"));
        }
        if !self.query_heads.is_multiple_of(self.kv_heads) {
            return Err(KvError::config(
                "query_heads",
                format!(
                    "{} query heads not divisible by {} kv heads",
                    self.query_heads, self.kv_heads
                ),
            ));
        }
        if self.head_dim == 0 || self.num_layers == 0 {
            return Err(KvError::config("head_dim", "head_dim and layers must be >= 1"));
        }
        Ok(())
    }

    /// Query heads per KV head.
    pub fn group_size(&self) -> usize {
        self.query_heads / self.kv_heads
    }

    /// KV head serving query head `q`.
    pub fn kv_head_of(&self, q: usize) -> usize {
        q / self.group_size()
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in row.iter_mut() {
        *x /= sum;
    }
}

fn check_finite(name: &'static str, view: ArrayView3<f64>) -> Result<()> {
    if view.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(KvError::Numeric(name))
    }
}

/// Causal attention for one query head against one key/value head.
fn causal_head(q: ArrayView2<f64>, k: ArrayView2<f64>, v: ArrayView2<f64>) -> (Array2<f64>, Array2<f64>) {
    let (len, dim) = q.dim();
    let scale = 1.0 / (dim as f64).sqrt();
    let mut weights = Array2::<f64>::zeros((len, len));
    let mut out = Array2::<f64>::zeros((len, v.ncols()));
    let mut row = Vec::with_capacity(len);
    for i in 0..len {
        row.clear();
        let qi = q.row(i);
        row.extend((0..=i).map(|j| qi.dot(&k.row(j)) * scale));
        softmax_in_place(&mut row);
        let mut o = out.row_mut(i);
        for (j, &a) in row.iter().enumerate() {
            weights[[i, j]] = a;
            o.scaled_add(a, &v.row(j));
        }
    }
    (out, weights)
}

/// Dense causal multi-head attention. Returns the output and the per-head
/// attention matrices.
pub fn dense_attention(
    q: ArrayView3<f64>,
    k: ArrayView3<f64>,
    v: ArrayView3<f64>,
) -> Result<(Array3<f64>, Array3<f64>)> {
    if q.dim() != k.dim() || k.dim().0 != v.dim().0 || k.dim().1 != v.dim().1 {
        return Err(KvError::Shape(format!(
            "dense attention needs matching Q {:?}, K {:?}, V {:?}",
            q.dim(),
            k.dim(),
            v.dim()
        )));
    }
    let cfg = AttentionConfig {
        query_heads: q.dim().0,
        kv_heads: q.dim().0,
        head_dim: q.dim().2,
        num_layers: 1,
    };
    gqa_attention_with_weights(q, k, v, &cfg)
}

/// Grouped-query attention; query head `h` reads KV head `h / r`.
pub fn gqa_attention(
    q: ArrayView3<f64>,
    k: ArrayView3<f64>,
    v: ArrayView3<f64>,
    cfg: &AttentionConfig,
) -> Result<Array3<f64>> {
    gqa_attention_with_weights(q, k, v, cfg).map(|(o, _)| o)
}

/// [`gqa_attention`] that also returns the `(n_q, L, L)` attention weights.
pub fn gqa_attention_with_weights(
    q: ArrayView3<f64>,
    k: ArrayView3<f64>,
    v: ArrayView3<f64>,
    cfg: &AttentionConfig,
) -> Result<(Array3<f64>, Array3<f64>)> {
    cfg.validate()?;
    let (nq, len, dim) = q.dim();
    let (nk, klen, kdim) = k.dim();
    if nq != cfg.query_heads || nk != cfg.kv_heads || klen != len || kdim != dim || v.dim().0 != nk || v.dim().1 != len
    {
        return Err(KvError::Shape(format!(
            "Q {:?}, K {:?}, V {:?} do not match {} query / {} kv heads",
            q.dim(),
            k.dim(),
            v.dim(),
            cfg.query_heads,
            cfg.kv_heads
        )));
    }
    check_finite("queries", q)?;
    check_finite("keys", k)?;
    check_finite("values", v)?;
    let mut out = Array3::<f64>::zeros((nq, len, v.dim().2));
    let mut weights = Array3::<f64>::zeros((nq, len, len));
    for h in 0..nq {
        let kv = cfg.kv_head_of(h);
        let (o, a) = causal_head(
            q.index_axis(Axis(0), h),
            k.index_axis(Axis(0), kv),
            v.index_axis(Axis(0), kv),
        );
        out.slice_mut(s![h, .., ..]).assign(&o);
        weights.slice_mut(s![h, .., ..]).assign(&a);
    }
    Ok((out, weights))
}

/// Result of attending one decode query per head over a paged cache.
#[derive(Debug, Clone)]
pub struct PagedAttentionOutput {
    /// `(n_q, d)` attention output.
    pub output: Array2<f64>,
    /// Per query head, weights over live positions `0..C` of its KV head.
    pub weights: Vec<Vec<f64>>,
}

/// Attention of one query per head over the live KVs of `seq` at `layer`.
/// Each KV head may hold a different number of KVs.
pub fn paged_attention(
    cache: &UnifiedKVCache,
    tables: &BlockTables,
    seq: SeqId,
    layer: usize,
    queries: ArrayView2<f64>,
    cfg: &AttentionConfig,
) -> Result<PagedAttentionOutput> {
    cfg.validate()?;
    if queries.dim() != (cfg.query_heads, cfg.head_dim) {
        return Err(KvError::Shape(format!(
            "queries {:?}, expected ({}, {})",
            queries.dim(),
            cfg.query_heads,
            cfg.head_dim
        )));
    }
    if queries.iter().any(|x| !x.is_finite()) {
        return Err(KvError::Numeric("queries"));
    }
    let scale = 1.0 / (cfg.head_dim as f64).sqrt();
    let mut output = Array2::<f64>::zeros((cfg.query_heads, cfg.head_dim));
    let mut weights = Vec::with_capacity(cfg.query_heads);
    for h in 0..cfg.query_heads {
        let head = HeadId {
            layer,
            kv_head: cfg.kv_head_of(h),
        };
        let hi = tables.head_index(head);
        let len = tables.context_len(seq, hi)?;
        if len == 0 {
            return Err(KvError::EmptyContext { seq, head: hi });
        }
        let q = queries.row(h);
        let mut kvs = Vec::with_capacity(len);
        let mut row = Vec::with_capacity(len);
        for i in 0..len {
            let (key, value) = lookup_kv(tables, cache, seq, head, i)?;
            row.push(key.iter().zip(q.iter()).map(|(a, b)| a * b).sum::<f64>() * scale);
            kvs.push(value);
        }
        softmax_in_place(&mut row);
        let mut o = output.row_mut(h);
        for (a, value) in row.iter().zip(kvs) {
            for (oi, vi) in o.iter_mut().zip(value) {
                *oi += a * vi;
            }
        }
        weights.push(row);
    }
    Ok(PagedAttentionOutput { output, weights })
}
