//! Synthetic workloads and the run/sweep harness.
//!
//! Activations are drawn from a ChaCha stream keyed by
//! `(seed, sequence, position, layer)`, so every token is reproducible on its
//! own and recomputation after preemption rebuilds an identical cache.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::attention::AttentionConfig;
use crate::block_manager::blocks_needed_prefill;
use crate::engine::{ActivationSource, CompressionRecord, Engine, EngineConfig, StepReport, TokenActivations};
use crate::error::{KvError, Result};
use crate::metrics::{Aggregation, MetricConfig, MetricMode};
use crate::policy::{BudgetCombine, BudgetRule};
use crate::registry::{preemption_policies, trigger_presets, TriggerParams, DEFAULT_POLICY};
use crate::SeqId;

/// Prompt lengths: one fixed value or a uniform inclusive range.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PromptLength {
    Fixed(usize),
    Uniform { min: usize, max: usize },
}

impl PromptLength {
    pub fn max(&self) -> usize {
        match *self {
            PromptLength::Fixed(n) => n,
            PromptLength::Uniform { max, .. } => max,
        }
    }

    pub fn min(&self) -> usize {
        match *self {
            PromptLength::Fixed(n) => n,
            PromptLength::Uniform { min, .. } => min,
        }
    }

    fn sample(&self, rng: &mut impl Rng) -> usize {
        match *self {
            PromptLength::Fixed(n) => n,
            PromptLength::Uniform { min, max } => rng.gen_range(min..=max),
        }
    }
}

impl fmt::Display for PromptLength {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PromptLength::Fixed(n) => write!(f, "{n}"),
            PromptLength::Uniform { min, max } => write!(f, "{min}..{max}"),
        }
    }
}

impl FromStr for PromptLength {
    type Err = KvError;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || KvError::config("prompt-len", format!("expected N or MIN..MAX, got `{s}`"));
        match s.split_once("..") {
            None => s.trim().parse().map(PromptLength::Fixed).map_err(|_| bad()),
            Some((lo, hi)) => {
                let min = lo.trim().parse().map_err(|_| bad())?;
                let max = hi.trim().parse().map_err(|_| bad())?;
                if min > max {
                    return Err(bad());
                }
                Ok(PromptLength::Uniform { min, max })
            }
        }
    }
}

impl Serialize for PromptLength {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for PromptLength {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            N(usize),
            S(String),
        }
        match Raw::deserialize(d)? {
            Raw::N(n) => Ok(PromptLength::Fixed(n)),
            Raw::S(s) => s.parse().map_err(serde::de::Error::custom),
        }
    }
}

/// Everything needed to reproduce a simulation run. Keys match the CLI flags.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", default, deny_unknown_fields)]
pub struct WorkloadConfig {
    pub seed: u64,
    pub layers: usize,
    pub query_heads: usize,
    pub kv_heads: usize,
    pub head_dim: usize,
    pub block_size: usize,
    pub num_blocks: usize,
    pub prompt_len: PromptLength,
    pub requests: usize,
    pub output_tokens: usize,
    /// Compression rate `r`; 1 disables eviction.
    pub rate: f64,
    /// Explicit per-sequence cache size `C` in tokens; overrides `rate`.
    pub max_cache_tokens: Option<usize>,
    pub floor_tokens: usize,
    pub budget_combine: BudgetCombine,
    pub policy: String,
    pub interval: Option<u64>,
    pub token_threshold: Option<usize>,
    /// KV pairs per compression batch; defaults to `L_max * l * H`.
    pub kv_limit: Option<usize>,
    pub metric_mode: String,
    pub aggregation: Aggregation,
    pub window: usize,
    pub pool: usize,
    pub excluded_window: usize,
    pub protect_window: bool,
    pub preemption: String,
}

impl Default for WorkloadConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            layers: 4,
            query_heads: 8,
            kv_heads: 2,
            head_dim: 16,
            block_size: 4,
            num_blocks: 4096,
            prompt_len: PromptLength::Fixed(128),
            requests: 32,
            output_tokens: 64,
            rate: 1.0,
            max_cache_tokens: None,
            floor_tokens: 128,
            budget_combine: BudgetCombine::Min,
            policy: DEFAULT_POLICY.to_string(),
            interval: None,
            token_threshold: None,
            kv_limit: None,
            metric_mode: "window".to_string(),
            aggregation: Aggregation::L2,
            window: 8,
            pool: 7,
            excluded_window: 10,
            protect_window: true,
            preemption: "lifo".to_string(),
        }
    }
}

impl WorkloadConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("layers", self.layers),
            ("query-heads", self.query_heads),
            ("kv-heads", self.kv_heads),
            ("head-dim", self.head_dim),
            ("block-size", self.block_size),
            ("num-blocks", self.num_blocks),
            ("output-tokens", self.output_tokens),
            ("prompt-len", self.prompt_len.min()),
        ];
        for (field, v) in positive {
            if v == 0 {
                return Err(KvError::config(field, "must be >= 1"));
            }
        }
        if !self.query_heads.is_multiple_of(self.kv_heads) {
            return Err(KvError::config("query-heads", "must be divisible by kv-heads"));
        }
        if !(self.rate.is_finite() && self.rate >= 1.0) {
            return Err(KvError::config("rate", "must be finite and >= 1"));
        }
        if self.max_cache_tokens == Some(0) {
            return Err(KvError::config("max-cache-tokens", "must be >= 1"));
        }
        if !trigger_presets().contains(&self.policy) {
            return Err(KvError::config(
                "policy",
                format!(
                    "unknown preset `{}` (known: {})",
                    self.policy,
                    trigger_presets().names().join(", ")
                ),
            ));
        }
        if !preemption_policies().contains(&self.preemption) {
            return Err(KvError::config(
                "preemption",
                format!("unknown policy `{}`", self.preemption),
            ));
        }
        self.metric_config()?.validate()?;
        trigger_presets().build(&self.policy, &self.trigger_params())?;
        Ok(())
    }

    pub fn metric_config(&self) -> Result<MetricConfig> {
        let mode = match self.metric_mode.as_str() {
            "window" => MetricMode::Window {
                window: self.window,
                pool: self.pool,
            },
            "full" => MetricMode::Full {
                excluded: self.excluded_window,
            },
            other => {
                return Err(KvError::config(
                    "metric-mode",
                    format!("expected window or full, got `{other}`"),
                ))
            }
        };
        Ok(MetricConfig {
            mode,
            aggregation: self.aggregation,
            protect_window: self.protect_window,
        })
    }

    fn trigger_params(&self) -> TriggerParams {
        TriggerParams {
            interval: self.interval,
            token_threshold: self.token_threshold,
        }
    }

    pub fn attention(&self) -> Result<AttentionConfig> {
        AttentionConfig::new(self.query_heads, self.kv_heads, self.head_dim, self.layers)
    }

    pub fn budget_rule(&self) -> BudgetRule {
        match self.max_cache_tokens {
            Some(tokens) => BudgetRule::MaxTokens { tokens },
            None if self.rate <= 1.0 => BudgetRule::Disabled,
            None => BudgetRule::Rate {
                rate: self.rate,
                floor_tokens: self.floor_tokens,
                combine: self.budget_combine,
            },
        }
    }

    /// Longest sequence (prompt plus output) the workload can produce.
    pub fn max_sequence_len(&self) -> usize {
        self.prompt_len.max() + self.output_tokens
    }

    pub fn engine_config(&self) -> Result<EngineConfig> {
        self.validate()?;
        let kv_limit = self
            .kv_limit
            .unwrap_or(self.max_sequence_len() * self.layers * self.kv_heads);
        Ok(EngineConfig {
            attention: self.attention()?,
            block_size: self.block_size,
            num_blocks: self.num_blocks,
            metric: self.metric_config()?,
            budget: self.budget_rule(),
            policy: self.policy.clone(),
            triggers: self.trigger_params(),
            kv_limit: Some(kv_limit),
            preemption: self.preemption.clone(),
        })
    }

    /// Applies `key=value` overrides; keys are the kebab-case field names.
    pub fn with_overrides<'a>(&self, pairs: impl IntoIterator<Item = (&'a str, &'a str)>) -> Result<Self> {
        let mut map = match serde_json::to_value(self).expect("config serializes") {
            serde_json::Value::Object(m) => m,
            _ => unreachable!("config is a struct"),
        };
        for (key, raw) in pairs {
            let key = key.trim().trim_start_matches("--").to_string();
            if !map.contains_key(&key) {
                return Err(KvError::config(key, "unknown config key"));
            }
            map.insert(key, parse_scalar(raw.trim()));
        }
        serde_json::from_value(serde_json::Value::Object(map)).map_err(|e| KvError::config("config", e.to_string()))
    }

    /// Parses a config file: a JSON object, or `key=value` lines with `#`
    /// comments.
    pub fn parse(text: &str) -> Result<Self> {
        let trimmed = text.trim_start();
        if trimmed.starts_with('{') {
            let value: serde_json::Value =
                serde_json::from_str(trimmed).map_err(|e| KvError::config("config", e.to_string()))?;
            let pairs: Vec<(String, String)> = match value {
                serde_json::Value::Object(m) => m
                    .into_iter()
                    .map(|(k, v)| {
                        let s = match v {
                            serde_json::Value::String(s) => s,
                            serde_json::Value::Null => "null".to_string(),
                            other => other.to_string(),
                        };
                        (k, s)
                    })
                    .collect(),
                _ => return Err(KvError::config("config", "expected a JSON object")),
            };
            return Self::default().with_overrides(pairs.iter().map(|(k, v)| (k.as_str(), v.as_str())));
        }
        let mut pairs = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| KvError::config("config", format!("line {}: expected key=value", n + 1)))?;
            pairs.push((k.trim(), v.trim()));
        }
        Self::default().with_overrides(pairs)
    }
}

fn parse_scalar(raw: &str) -> serde_json::Value {
    use serde_json::Value;
    if raw == "null" || raw == "none" {
        return Value::Null;
    }
    if let Ok(b) = raw.parse::<bool>() {
        return Value::Bool(b);
    }
    if let Ok(u) = raw.parse::<u64>() {
        return Value::from(u);
    }
    if let Ok(f) = raw.parse::<f64>() {
        if f.is_finite() {
            return Value::from(f);
        }
    }
    Value::String(raw.to_string())
}

fn mix(mut x: u64) -> u64 {
    // splitmix64 finalizer
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Seeded stand-in for model activations; values are uniform in `[-1, 1)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SyntheticActivations {
    pub seed: u64,
    pub query_heads: usize,
    pub kv_heads: usize,
    pub head_dim: usize,
}

impl ActivationSource for SyntheticActivations {
    fn token(&self, seq: SeqId, position: usize, layer: usize) -> TokenActivations {
        let key = mix(mix(mix(self.seed) ^ seq) ^ position as u64) ^ mix(layer as u64 + 1);
        let mut rng = ChaCha8Rng::seed_from_u64(key);
        let mut draw = |rows: usize| Array2::from_shape_fn((rows, self.head_dim), |_| rng.gen_range(-1.0..1.0));
        TokenActivations {
            query: draw(self.query_heads),
            key: draw(self.kv_heads),
            value: draw(self.kv_heads),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Request {
    pub id: SeqId,
    pub prompt_len: usize,
    pub output_tokens: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Workload {
    pub requests: Vec<Request>,
    pub activations: SyntheticActivations,
}

pub fn generate_workload(cfg: &WorkloadConfig) -> Result<Workload> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(mix(cfg.seed ^ 0x5E_ED0F_1E4E));
    let requests = (0..cfg.requests as u64)
        .map(|id| Request {
            id,
            prompt_len: cfg.prompt_len.sample(&mut rng),
            output_tokens: cfg.output_tokens,
        })
        .collect();
    Ok(Workload {
        requests,
        activations: SyntheticActivations {
            seed: cfg.seed,
            query_heads: cfg.query_heads,
            kv_heads: cfg.kv_heads,
            head_dim: cfg.head_dim,
        },
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub requests: usize,
    pub max_batch_size: usize,
    pub total_steps: u64,
    pub tokens_generated: usize,
    /// Generated tokens per engine step.
    pub throughput_proxy: f64,
    pub peak_fragmentation: usize,
    pub preemptions: usize,
    pub compression_rounds: usize,
    pub blocks_freed: usize,
    pub kvs_evicted: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub seed: u64,
    pub config: WorkloadConfig,
    pub summary: RunSummary,
    pub steps: Vec<StepReport>,
    pub compressions: Vec<CompressionRecord>,
}

impl RunReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Per-step series as CSV.
    pub fn steps_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        for s in &self.steps {
            w.serialize(s).expect("in-memory csv write");
        }
        String::from_utf8(w.into_inner().expect("flush")).expect("utf8 csv")
    }
}

/// Steps without admissions or decoded tokens before a run is declared stuck.
const MAX_IDLE_STEPS: u64 = 64;

/// Builds a fresh engine loaded with the workload's requests.
pub fn build_engine(cfg: &WorkloadConfig) -> Result<Engine> {
    let workload = generate_workload(cfg)?;
    let mut engine = Engine::new(cfg.engine_config()?, Box::new(workload.activations))?;
    for r in &workload.requests {
        let full = blocks_needed_prefill(r.prompt_len, cfg.layers, cfg.kv_heads, cfg.block_size);
        if full > cfg.num_blocks {
            return Err(KvError::InfeasibleWorkload(format!(
                "request {} prompt needs {full} blocks, cache has {}",
                r.id, cfg.num_blocks
            )));
        }
        engine.add_request(r.id, r.prompt_len, r.output_tokens)?;
    }
    Ok(engine)
}

/// Runs the workload to completion.
pub fn run(cfg: &WorkloadConfig) -> Result<RunReport> {
    let mut engine = build_engine(cfg)?;
    let steps = engine.run_to_completion(MAX_IDLE_STEPS)?;
    let summary = RunSummary {
        requests: cfg.requests,
        max_batch_size: steps.iter().map(|s| s.batch_size).max().unwrap_or(0),
        total_steps: steps.len() as u64,
        tokens_generated: steps.iter().map(|s| s.tokens_generated).sum(),
        throughput_proxy: if steps.is_empty() {
            0.0
        } else {
            steps.iter().map(|s| s.tokens_generated).sum::<usize>() as f64 / steps.len() as f64
        },
        peak_fragmentation: steps.iter().map(|s| s.fragmentation).max().unwrap_or(0),
        preemptions: steps.iter().map(|s| s.preemptions).sum(),
        compression_rounds: steps.iter().map(|s| s.compressions).sum(),
        blocks_freed: steps.iter().map(|s| s.blocks_freed).sum(),
        kvs_evicted: steps.iter().map(|s| s.kvs_evicted).sum(),
    };
    Ok(RunReport {
        seed: cfg.seed,
        config: cfg.clone(),
        summary,
        steps,
        compressions: engine.compression_records().to_vec(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub rate: f64,
    pub max_batch: usize,
    pub steps: u64,
    pub throughput_proxy: f64,
    pub peak_fragmentation: usize,
}

impl From<(f64, &RunSummary)> for SweepRow {
    fn from((rate, s): (f64, &RunSummary)) -> Self {
        Self {
            rate,
            max_batch: s.max_batch_size,
            steps: s.total_steps,
            throughput_proxy: s.throughput_proxy,
            peak_fragmentation: s.peak_fragmentation,
        }
    }
}

/// One run per rate with the same seed; rate points run on separate threads.
pub fn sweep(cfg: &WorkloadConfig, rates: &[f64]) -> Result<Vec<SweepRow>> {
    if rates.is_empty() {
        return Err(KvError::config("rates", "need at least one rate"));
    }
    let configs: Vec<WorkloadConfig> = rates
        .iter()
        .map(|&rate| WorkloadConfig { rate, ..cfg.clone() })
        .collect();
    for c in &configs {
        c.validate()?;
    }
    let results: Vec<Result<RunSummary>> = std::thread::scope(|scope| {
        let handles: Vec<_> = configs
            .iter()
            .map(|c| scope.spawn(move || run(c).map(|r| r.summary)))
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("sweep worker panicked"))
            .collect()
    });
    rates
        .iter()
        .zip(results)
        .map(|(&rate, r)| r.map(|s| SweepRow::from((rate, &s))))
        .collect()
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).expect("in-memory csv write");
    }
    if rows.is_empty() {
        w.write_record(["rate", "max_batch", "steps", "throughput_proxy", "peak_fragmentation"])
            .expect("in-memory csv write");
    }
    String::from_utf8(w.into_inner().expect("flush")).expect("utf8 csv")
}

/// Helper for callers that want to inspect a request's first-token keys.
pub fn first_token_keys(workload: &Workload) -> BTreeMap<SeqId, Array2<f64>> {
    workload
        .requests
        .iter()
        .map(|r| (r.id, workload.activations.token(r.id, 0, 0).key))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn prompt_length_parsing() {
        assert_eq!("64".parse::<PromptLength>().unwrap(), PromptLength::Fixed(64));
        assert_eq!(
            "16..32".parse::<PromptLength>().unwrap(),
            PromptLength::Uniform { min: 16, max: 32 }
        );
        assert!("32..16".parse::<PromptLength>().is_err());
        assert!("abc".parse::<PromptLength>().is_err());
    }

    #[test]
    fn key_value_and_json_configs_agree() {
        let kv = WorkloadConfig::parse("# desk run\nseed = 7\nrate=4\nprompt-len=16..32\naggregation=l1\n").unwrap();
        let js =
            WorkloadConfig::parse(r#"{"seed": 7, "rate": 4, "prompt-len": "16..32", "aggregation": "l1"}"#).unwrap();
        assert_eq!(kv, js);
        assert_eq!(kv.seed, 7);
        assert_eq!(kv.rate, 4.0);
        assert_eq!(kv.aggregation, Aggregation::L1);
    }

    #[test]
    fn unknown_key_is_named() {
        let err = WorkloadConfig::parse("bogus=1").unwrap_err();
        assert!(matches!(err, KvError::Config { ref field, .. } if field == "bogus"));
    }

    #[test]
    fn invalid_config_names_field() {
        let cfg = WorkloadConfig {
            query_heads: 6,
            kv_heads: 4,
            ..Default::default()
        };
        assert!(matches!(cfg.validate(), Err(KvError::Config { ref field, .. }) if field == "query-heads"));
        let cfg = WorkloadConfig {
            pool: 4,
            ..Default::default()
        };
        assert!(matches!(cfg.validate(), Err(KvError::Config { ref field, .. }) if field == "pool"));
    }

    #[test]
    fn workload_is_deterministic() {
        let cfg = WorkloadConfig {
            prompt_len: PromptLength::Uniform { min: 8, max: 40 },
            requests: 5,
            ..Default::default()
        };
        let a = generate_workload(&cfg).unwrap();
        let b = generate_workload(&cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(first_token_keys(&a), first_token_keys(&b));
        assert_eq!(a.activations.token(3, 17, 2), b.activations.token(3, 17, 2));
        let empty = generate_workload(&WorkloadConfig {
            requests: 0,
            ..Default::default()
        })
        .unwrap();
        assert!(empty.requests.is_empty());
    }

    #[test]
    fn distinct_seeds_give_distinct_keys() {
        let mut seen = std::collections::BTreeSet::new();
        for seed in 0..100u64 {
            let act = SyntheticActivations {
                seed,
                query_heads: 8,
                kv_heads: 2,
                head_dim: 16,
            };
            let k = act.token(0, 0, 0).key;
            seen.insert(k.iter().map(|x| x.to_bits()).collect::<Vec<_>>());
        }
        assert_eq!(seen.len(), 100);
    }
}
