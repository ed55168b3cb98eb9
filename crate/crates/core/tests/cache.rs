use std::collections::HashMap;

use flash_core::cache::{prefix_key, run_pipeline_with_cache, CacheKey, CachePool, CachedPrefix};
use flash_core::executor::synthetic::benchmark_family_spec;
use flash_core::executor::{
    make_synthetic, DatasetHandle, Executor, ExecutorError, StepOutput, StepRequest, SyntheticBenchmark, TimeMode,
};
use flash_core::graph::{HyperparamAssignment, PipelinePath, PipelineSpec};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Map, Value};

/// Synthetic executor that counts invocations per step.
struct Counting {
    inner: SyntheticBenchmark,
    calls: HashMap<usize, usize>,
}

impl Counting {
    fn new(spec: &PipelineSpec, seed: u64) -> Self {
        Self { inner: make_synthetic(spec, seed, 0.0), calls: HashMap::new() }
    }

    fn calls(&self, step: usize) -> usize {
        self.calls.get(&step).copied().unwrap_or(0)
    }

    fn total(&self) -> usize {
        self.calls.values().sum()
    }
}

impl Executor for Counting {
    fn time_mode(&self) -> TimeMode {
        self.inner.time_mode()
    }
    fn dataset_id(&self) -> String {
        self.inner.dataset_id()
    }
    fn input_handle(&self) -> DatasetHandle {
        self.inner.input_handle()
    }
    fn run_step(&mut self, request: &StepRequest<'_>, timeout_seconds: f64) -> Result<StepOutput, ExecutorError> {
        *self.calls.entry(request.step).or_default() += 1;
        self.inner.run_step(request, timeout_seconds)
    }
}

fn random_configs(spec: &PipelineSpec, n: usize, seed: u64) -> Vec<(PipelinePath, HyperparamAssignment)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let p = spec.sample_random_path(&mut rng);
            let h = spec.sample_random_hyperparams(&p, &mut rng);
            (p, h)
        })
        .collect()
}

/// Same hyperparameters as `hp` for the first `keep` steps of `path`, then
/// `other`'s algorithms and values.
fn splice(
    spec: &PipelineSpec,
    path: &PipelinePath,
    hp: &HyperparamAssignment,
    other: &PipelinePath,
    other_hp: &HyperparamAssignment,
    keep: usize,
) -> (PipelinePath, HyperparamAssignment) {
    let a = spec.decode_path(path);
    let b = spec.decode_path(other);
    let ids: Vec<String> = a[..keep].iter().chain(&b[keep..]).cloned().collect();
    let p = spec.encode_path(&ids).unwrap();
    let mut h = HyperparamAssignment::default();
    for (k, id) in ids.iter().enumerate() {
        let src = if k < keep { hp } else { other_hp };
        h.values.insert(id.clone(), src.values.get(id).cloned().unwrap_or_default());
    }
    (p, h)
}

#[test]
fn repeated_configuration_executes_nothing() {
    let spec = benchmark_family_spec();
    let mut exec = Counting::new(&spec, 1);
    let mut pool = CachePool::<CachedPrefix>::new(1 << 30);
    for (path, hp) in random_configs(&spec, 20, 1) {
        let first = run_pipeline_with_cache(&spec, &path, &hp, &mut pool, &mut exec, 1e9).unwrap();
        let before = exec.total();
        let again = run_pipeline_with_cache(&spec, &path, &hp, &mut pool, &mut exec, 1e9).unwrap();
        assert_eq!(exec.total(), before);
        assert_eq!(again.metric.to_bits(), first.metric.to_bits());
        assert_eq!(again.cost_seconds, 0.0);
        assert_eq!(again.cache_hits(), 4);
        assert_eq!(again.nominal_cost_seconds, first.nominal_cost_seconds);
    }
}

#[test]
fn resumes_from_longest_shared_prefix() {
    let spec = benchmark_family_spec();
    let configs = random_configs(&spec, 2, 2);
    let (p0, h0) = &configs[0];
    for keep in 1..=3 {
        let (p1, h1) = splice(&spec, p0, h0, &configs[1].0, &configs[1].1, keep);
        let mut exec = Counting::new(&spec, 2);
        let mut pool = CachePool::<CachedPrefix>::new(1 << 30);
        run_pipeline_with_cache(&spec, p0, h0, &mut pool, &mut exec, 1e9).unwrap();
        let r = run_pipeline_with_cache(&spec, &p1, &h1, &mut pool, &mut exec, 1e9).unwrap();
        for step in 1..=4 {
            assert_eq!(exec.calls(step), if step <= keep { 1 } else { 2 }, "keep {keep}, step {step}");
        }
        assert_eq!(r.cache_hits(), keep);
    }
}

#[test]
fn zero_budget_is_transparent() {
    let spec = benchmark_family_spec();
    let mut off = Counting::new(&spec, 3);
    let mut on = Counting::new(&spec, 3);
    let mut pool_off = CachePool::<CachedPrefix>::new(0);
    let mut pool_on = CachePool::<CachedPrefix>::new(1 << 30);
    let mut configs = random_configs(&spec, 100, 3);
    configs.extend(configs.clone());
    for (path, hp) in &configs {
        let a = run_pipeline_with_cache(&spec, path, hp, &mut pool_off, &mut off, 1e9).unwrap();
        let b = run_pipeline_with_cache(&spec, path, hp, &mut pool_on, &mut on, 1e9).unwrap();
        assert_eq!(a.metric.to_bits(), b.metric.to_bits());
        assert_eq!(a.nominal_cost_seconds, b.nominal_cost_seconds);
        assert!(b.cost_seconds <= a.cost_seconds);
    }
    assert_eq!(off.total(), 4 * configs.len());
    assert!(on.total() < off.total());
    assert!(pool_off.is_empty());
}

#[test]
fn small_budget_evicts_but_stays_correct() {
    let spec = benchmark_family_spec();
    let mut exec = Counting::new(&spec, 4);
    let mut reference = Counting::new(&spec, 4);
    // Room for two 1 MiB step outputs.
    let mut pool = CachePool::<CachedPrefix>::new(2 << 20);
    let mut none = CachePool::<CachedPrefix>::new(0);
    for (path, hp) in random_configs(&spec, 50, 4) {
        let a = run_pipeline_with_cache(&spec, &path, &hp, &mut pool, &mut exec, 1e9).unwrap();
        let b = run_pipeline_with_cache(&spec, &path, &hp, &mut none, &mut reference, 1e9).unwrap();
        assert_eq!(a.metric.to_bits(), b.metric.to_bits());
        assert!(pool.used_bytes() <= pool.budget_bytes());
        assert!(pool.len() <= 2);
    }
    assert!(pool.stats().evictions > 0);
}

#[test]
fn timeout_counts_executed_seconds_only() {
    let spec = benchmark_family_spec();
    let (path, hp) = random_configs(&spec, 1, 5).pop().unwrap();
    let mut exec = Counting::new(&spec, 5);
    let full = exec.inner.path_cost(&spec, &path);
    let mut pool = CachePool::<CachedPrefix>::new(1 << 30);
    let fail = run_pipeline_with_cache(&spec, &path, &hp, &mut pool, &mut exec, full * 0.999).unwrap_err();
    assert!(matches!(fail.error, ExecutorError::StepTimeout { .. }));
    assert!(fail.charged_seconds <= full * 0.999 + 1e-12);
    // The first three steps are now cached, so the last step alone fits.
    let ok = run_pipeline_with_cache(&spec, &path, &hp, &mut pool, &mut exec, full * 0.999).unwrap();
    assert!(ok.cost_seconds < full);
    assert_eq!(ok.nominal_cost_seconds, full);
}

#[test]
fn prefix_keys_are_canonical() {
    let mut h1 = Map::new();
    h1.insert("b".into(), json!(1.5));
    h1.insert("a".into(), json!(-0.0));
    let mut h2 = Map::new();
    h2.insert("a".into(), json!(0.0));
    h2.insert("b".into(), json!(1.5));
    assert_eq!(prefix_key("d", &[("x", &h1)]), prefix_key("d", &[("x", &h2)]));
    assert_ne!(prefix_key("d", &[("x", &h1)]), prefix_key("e", &[("x", &h1)]));
    assert_ne!(prefix_key("d", &[("x", &h1)]), prefix_key("d", &[("y", &h1)]));
    let empty = Map::<String, Value>::new();
    assert_ne!(prefix_key("d", &[("x", &empty)]), prefix_key("d", &[("x", &empty), ("z", &empty)]));
}

#[derive(Debug, Clone)]
enum Op {
    Insert(u8, u64),
    Lookup(u8),
}

fn op() -> impl Strategy<Value = Op> {
    prop_oneof![(0u8..8, 0u64..50).prop_map(|(k, s)| Op::Insert(k, s)), (0u8..8).prop_map(Op::Lookup)]
}

proptest! {
    /// Against a recency-ordered list model: same residents, same order,
    /// same byte count, never over budget.
    #[test]
    fn lru_matches_model(budget in 0u64..120, ops in proptest::collection::vec(op(), 1..80)) {
        let mut pool = CachePool::<u8>::new(budget);
        let mut model: Vec<(u8, u64)> = Vec::new();
        for op in ops {
            match op {
                Op::Insert(k, size) => {
                    pool.insert(CacheKey(k as u128), k, size);
                    if size > 0 && size <= budget {
                        model.retain(|&(m, _)| m != k);
                        while model.iter().map(|e| e.1).sum::<u64>() + size > budget {
                            model.remove(0);
                        }
                        model.push((k, size));
                    }
                }
                Op::Lookup(k) => {
                    let got = pool.lookup(&CacheKey(k as u128));
                    match model.iter().position(|&(m, _)| m == k) {
                        Some(i) => {
                            prop_assert_eq!(got, Some(k));
                            let e = model.remove(i);
                            model.push(e);
                        }
                        None => prop_assert_eq!(got, None),
                    }
                }
            }
            prop_assert!(pool.used_bytes() <= budget);
            prop_assert_eq!(pool.used_bytes(), model.iter().map(|e| e.1).sum::<u64>());
            let mut resident: Vec<(u64, u8)> = (0..8u8)
                .filter_map(|k| pool.entry(&CacheKey(k as u128)).map(|e| (e.last_used, k)))
                .collect();
            resident.sort();
            let order: Vec<u8> = resident.into_iter().map(|(_, k)| k).collect();
            prop_assert_eq!(order, model.iter().map(|e| e.0).collect::<Vec<_>>());
        }
    }
}
