//! Named constructors for the interchangeable pieces of the engine: eviction
//! metrics, compression trigger presets, and preemption policies. The CLI and
//! config files select entries by name.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::block_manager::{LifoPreemption, PreemptionPolicy};
use crate::error::{KvError, Result};
use crate::metrics::{FullMetric, MetricConfig, MetricMode, MetricStrategy, WindowMetric};
use crate::policy::{CompressionTrigger, EveryInterval, OnPreempt, OnPrefill, TokenThreshold};

pub type Constructor<T, P> = fn(&P) -> Result<T>;

/// Name-keyed table of constructors producing `T` from parameters `P`.
pub struct Registry<T, P> {
    kind: &'static str,
    entries: BTreeMap<&'static str, Constructor<T, P>>,
}

impl<T, P> Registry<T, P> {
    pub fn new(kind: &'static str) -> Self {
        Self {
            kind,
            entries: BTreeMap::new(),
        }
    }

    /// Later registrations under the same name replace earlier ones.
    pub fn register(&mut self, name: &'static str, ctor: Constructor<T, P>) -> &mut Self {
        self.entries.insert(name, ctor);
        self
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.entries.keys().copied().collect()
    }

    pub fn build(&self, name: &str, params: &P) -> Result<T> {
        let ctor = self.entries.get(name).ok_or_else(|| KvError::UnknownStrategy {
            kind: self.kind,
            name: name.to_string(),
        })?;
        ctor(params)
    }
}

pub fn metric_strategies() -> Registry<Box<dyn MetricStrategy>, MetricConfig> {
    let mut r = Registry::new("metric strategy");
    r.register("window", |cfg: &MetricConfig| match cfg.mode {
        MetricMode::Window { window, pool } => Ok(Box::new(WindowMetric {
            window,
            pool,
            aggregation: cfg.aggregation,
            protect: cfg.protect_window,
        }) as Box<dyn MetricStrategy>),
        MetricMode::Full { .. } => Err(KvError::config(
            "metric-mode",
            "window strategy needs window parameters",
        )),
    });
    r.register("full", |cfg: &MetricConfig| match cfg.mode {
        MetricMode::Full { excluded } => Ok(Box::new(FullMetric {
            excluded,
            aggregation: cfg.aggregation,
        }) as Box<dyn MetricStrategy>),
        MetricMode::Window { .. } => Err(KvError::config("metric-mode", "full strategy needs an excluded window")),
    });
    r
}

/// Builds the strategy matching `cfg.mode`.
pub fn build_metric(cfg: &MetricConfig) -> Result<Box<dyn MetricStrategy>> {
    cfg.validate()?;
    let name = match cfg.mode {
        MetricMode::Window { .. } => "window",
        MetricMode::Full { .. } => "full",
    };
    metric_strategies().build(name, cfg)
}

/// Knobs consumed by trigger presets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct TriggerParams {
    pub interval: Option<u64>,
    pub token_threshold: Option<usize>,
}

pub type TriggerSet = Vec<Box<dyn CompressionTrigger>>;

pub const DEFAULT_POLICY: &str = "prefill-preempt";

pub fn trigger_presets() -> Registry<TriggerSet, TriggerParams> {
    let mut r = Registry::new("policy preset");
    r.register("none", |_| Ok(Vec::new()));
    r.register("prefill", |_| {
        Ok(vec![Box::new(OnPrefill) as Box<dyn CompressionTrigger>])
    });
    r.register("preempt", |_| {
        Ok(vec![Box::new(OnPreempt) as Box<dyn CompressionTrigger>])
    });
    r.register(DEFAULT_POLICY, |_| {
        Ok(vec![
            Box::new(OnPrefill) as Box<dyn CompressionTrigger>,
            Box::new(OnPreempt),
        ])
    });
    r.register("continual", |_| {
        Ok(vec![
            Box::new(EveryInterval { every: 1 }) as Box<dyn CompressionTrigger>,
            Box::new(OnPreempt),
        ])
    });
    r.register("interval", |p: &TriggerParams| {
        let every = p
            .interval
            .filter(|&c| c > 0)
            .ok_or_else(|| KvError::config("interval", "interval preset needs a positive interval"))?;
        Ok(vec![
            Box::new(EveryInterval { every }) as Box<dyn CompressionTrigger>,
            Box::new(OnPreempt),
        ])
    });
    r.register("threshold", |p: &TriggerParams| {
        let tokens = p
            .token_threshold
            .filter(|&t| t > 0)
            .ok_or_else(|| KvError::config("token-threshold", "threshold preset needs a positive token threshold"))?;
        Ok(vec![
            Box::new(TokenThreshold { tokens }) as Box<dyn CompressionTrigger>,
            Box::new(OnPreempt),
        ])
    });
    r
}

pub fn preemption_policies() -> Registry<Box<dyn PreemptionPolicy>, ()> {
    let mut r = Registry::new("preemption policy");
    r.register("lifo", |_| Ok(Box::new(LifoPreemption) as Box<dyn PreemptionPolicy>));
    r
}
