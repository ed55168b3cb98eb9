//! Prefix-level memoization of step outputs under a byte budget.
//!
//! A prefix of length `k` is keyed by the digest of
//! `[dataset_id, [alg₁, {hp₁}], …, [alg_k, {hp_k}]]` in canonical JSON (sorted
//! keys, shortest round-trip floats, `-0` folded into `0`).

use std::collections::{BTreeMap, HashMap};

use serde_json::{Map, Value};
use sha2::{Digest, Sha256};

use crate::executor::{Executor, ExecutorError, RunResult, StepDisposition, StepOutput, StepRecord, StepRequest};
use crate::graph::{HyperparamAssignment, PipelinePath, PipelineSpec};

pub const DEFAULT_CACHE_BYTES: u64 = 1 << 30;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct CacheKey(pub u128);

fn canonical(v: &Value) -> Value {
    match v {
        Value::Number(n) if n.as_f64() == Some(0.0) && n.is_f64() => Value::from(0.0),
        Value::Array(a) => Value::Array(a.iter().map(canonical).collect()),
        Value::Object(m) => Value::Object(m.iter().map(|(k, v)| (k.clone(), canonical(v))).collect()),
        other => other.clone(),
    }
}

/// Canonical serialization of a prefix.
pub fn prefix_bytes(dataset_id: &str, steps: &[(&str, &Map<String, Value>)]) -> Vec<u8> {
    let mut doc = vec![Value::from(dataset_id)];
    for (alg, hp) in steps {
        doc.push(Value::Array(vec![Value::from(*alg), canonical(&Value::Object((*hp).clone()))]));
    }
    Value::Array(doc).to_string().into_bytes()
}

pub fn prefix_key(dataset_id: &str, steps: &[(&str, &Map<String, Value>)]) -> CacheKey {
    let digest = Sha256::digest(prefix_bytes(dataset_id, steps));
    CacheKey(u128::from_be_bytes(digest[..16].try_into().expect("digest has 32 bytes")))
}

#[derive(Debug, Clone, PartialEq)]
pub struct CacheEntry<V> {
    pub payload: V,
    pub size_bytes: u64,
    pub last_used: u64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct CacheStats {
    pub hits: u64,
    pub misses: u64,
    pub evictions: u64,
    pub used_bytes: u64,
    pub entries: usize,
}

/// LRU pool. Eviction happens only on insert.
#[derive(Debug, Clone)]
pub struct CachePool<V> {
    entries: HashMap<CacheKey, CacheEntry<V>>,
    by_tick: BTreeMap<u64, CacheKey>,
    budget_bytes: u64,
    used_bytes: u64,
    tick: u64,
    hits: u64,
    misses: u64,
    evictions: u64,
}

impl<V: Clone> CachePool<V> {
    pub fn new(budget_bytes: u64) -> Self {
        Self {
            entries: HashMap::new(),
            by_tick: BTreeMap::new(),
            budget_bytes,
            used_bytes: 0,
            tick: 0,
            hits: 0,
            misses: 0,
            evictions: 0,
        }
    }

    pub fn budget_bytes(&self) -> u64 {
        self.budget_bytes
    }

    pub fn used_bytes(&self) -> u64 {
        self.used_bytes
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn contains(&self, key: &CacheKey) -> bool {
        self.entries.contains_key(key)
    }

    pub fn entry(&self, key: &CacheKey) -> Option<&CacheEntry<V>> {
        self.entries.get(key)
    }

    pub fn stats(&self) -> CacheStats {
        CacheStats {
            hits: self.hits,
            misses: self.misses,
            evictions: self.evictions,
            used_bytes: self.used_bytes,
            entries: self.entries.len(),
        }
    }

    fn touch(&mut self, key: CacheKey) -> u64 {
        self.tick += 1;
        let entry = self.entries.get_mut(&key).expect("touch of resident key");
        self.by_tick.remove(&entry.last_used);
        entry.last_used = self.tick;
        self.by_tick.insert(self.tick, key);
        self.tick
    }

    pub fn lookup(&mut self, key: &CacheKey) -> Option<V> {
        if self.entries.contains_key(key) {
            self.hits += 1;
            self.touch(*key);
            Some(self.entries[key].payload.clone())
        } else {
            self.misses += 1;
            None
        }
    }

    /// Stores `payload`; a payload larger than the whole budget (or of size 0)
    /// is silently not cached.
    pub fn insert(&mut self, key: CacheKey, payload: V, size_bytes: u64) {
        if size_bytes == 0 || size_bytes > self.budget_bytes {
            return;
        }
        if let Some(old) = self.entries.remove(&key) {
            self.by_tick.remove(&old.last_used);
            self.used_bytes -= old.size_bytes;
        }
        while self.used_bytes + size_bytes > self.budget_bytes {
            let (_, victim) = self.by_tick.pop_first().expect("over budget implies a resident entry");
            let old = self.entries.remove(&victim).expect("tick index matches entries");
            self.used_bytes -= old.size_bytes;
            self.evictions += 1;
        }
        self.used_bytes += size_bytes;
        self.entries.insert(key, CacheEntry { payload, size_bytes, last_used: 0 });
        self.touch(key);
    }

    pub fn clear(&mut self) {
        self.entries.clear();
        self.by_tick.clear();
        self.used_bytes = 0;
    }
}

/// Cached output of a prefix together with the executed seconds of the whole
/// prefix when it was first computed.
#[derive(Debug, Clone, PartialEq)]
pub struct CachedPrefix {
    pub output: StepOutput,
    pub prefix_seconds: f64,
}

/// A run that did not produce a metric.
#[derive(Debug, Clone, PartialEq)]
pub struct RunFailure {
    pub error: ExecutorError,
    /// Executed seconds including the failing step's consumption.
    pub charged_seconds: f64,
    pub hits: usize,
    pub misses: usize,
}

/// Runs `path` under `hp`, reusing the longest cached prefix. `per_run_timeout`
/// bounds the executed seconds of the whole run.
pub fn run_pipeline_with_cache<E: Executor + ?Sized>(
    spec: &PipelineSpec,
    path: &PipelinePath,
    hp: &HyperparamAssignment,
    pool: &mut CachePool<CachedPrefix>,
    executor: &mut E,
    per_run_timeout: f64,
) -> Result<RunResult, RunFailure> {
    let ids = spec.decode_path(path);
    let params: Vec<Map<String, Value>> = ids.iter().map(|id| hp.step_json(spec, id)).collect();
    let dataset = executor.dataset_id();
    let steps: Vec<(&str, &Map<String, Value>)> = ids.iter().map(String::as_str).zip(params.iter()).collect();
    let keys: Vec<CacheKey> = (1..=steps.len()).map(|k| prefix_key(&dataset, &steps[..k])).collect();

    let resume = (1..=keys.len()).rev().find(|&k| pool.contains(&keys[k - 1])).unwrap_or(0);
    let mut per_step = Vec::with_capacity(keys.len());
    let mut last: Option<CachedPrefix> = None;
    for key in &keys[..resume] {
        if pool.contains(key) {
            last = pool.lookup(key);
        }
        per_step.push(StepRecord { disposition: StepDisposition::Cached, seconds: 0.0 });
    }

    let mut handle = last.as_ref().map(|c| c.output.handle.clone()).unwrap_or_else(|| executor.input_handle());
    // Accumulated step by step so the total is bitwise independent of
    // where the cached prefix ends.
    let mut nominal = last.as_ref().map_or(0.0, |c| c.prefix_seconds);
    let mut metric = last.as_ref().and_then(|c| c.output.metric);
    let mut charged = 0.0;
    for k in resume..keys.len() {
        pool.lookup(&keys[k]);
        let request = StepRequest {
            step: k + 1,
            algorithm: steps[k].0,
            hyperparams: steps[k].1,
            input: &handle,
            is_last: k + 1 == keys.len(),
        };
        match executor.run_step(&request, (per_run_timeout - charged).max(0.0)) {
            Ok(out) => {
                charged += out.seconds;
                nominal += out.seconds;
                per_step.push(StepRecord { disposition: StepDisposition::Executed, seconds: out.seconds });
                let size = out.handle.size_bytes;
                handle = out.handle.clone();
                metric = out.metric;
                pool.insert(keys[k], CachedPrefix { output: out, prefix_seconds: nominal }, size);
            }
            Err(error) => {
                if let ExecutorError::StepTimeout { seconds } = error {
                    charged += seconds;
                }
                return Err(RunFailure { error, charged_seconds: charged, hits: resume, misses: k + 1 - resume });
            }
        }
    }
    match metric {
        Some(metric) if metric.is_finite() => {
            Ok(RunResult { metric, cost_seconds: charged, nominal_cost_seconds: nominal, per_step })
        }
        _ => Err(RunFailure {
            error: ExecutorError::ProtocolViolation("last step produced no finite metric".into()),
            charged_seconds: charged,
            hits: resume,
            misses: keys.len() - resume,
        }),
    }
}
