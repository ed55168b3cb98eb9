use std::fs::File;

use flash_core::executor::synthetic::benchmark_family_spec;
use flash_core::executor::{make_synthetic, DatasetHandle, Executor, ExecutorError, StepOutput, StepRequest, TimeMode};
use flash_core::graph::PipelineSpec;
use flash_core::orchestrator::report::summarize;
use flash_core::orchestrator::trace::{parse_trace, read_trace_file, Phase, TraceWriter};
use flash_core::orchestrator::{run_flash, run_random_search, Budget, BudgetConfig, Tuner};

fn toy() -> PipelineSpec {
    PipelineSpec::from_json_str(
        r#"{"name":"toy","steps":[
          {"index":1,"algorithms":[{"id":"a","hyperparams":[{"name":"x","kind":"continuous","bounds":[0,1]}]},{"id":"b"},{"id":"c"}]},
          {"index":2,"algorithms":[{"id":"d"},{"id":"e","hyperparams":[{"name":"y","kind":"continuous","bounds":[1e-3,1],"scale":"log"}]},{"id":"f"}]},
          {"index":3,"algorithms":[{"id":"g"},{"id":"h"}]}]}"#,
    )
    .unwrap()
}

/// Metric is the number of path algorithms outside `good`, so the path made
/// of `good` is the unique optimum at 0 and every other path scores ≥ 1.
struct Dominant {
    good: Vec<&'static str>,
}

impl Executor for Dominant {
    fn time_mode(&self) -> TimeMode {
        TimeMode::Simulated
    }
    fn dataset_id(&self) -> String {
        "dominant".into()
    }
    fn input_handle(&self) -> DatasetHandle {
        DatasetHandle::input("0", 1)
    }
    fn run_step(&mut self, req: &StepRequest<'_>, _timeout: f64) -> Result<StepOutput, ExecutorError> {
        let so_far: f64 = req.input.id.parse().unwrap();
        let value = so_far + if self.good.contains(&req.algorithm) { 0.0 } else { 1.0 };
        Ok(StepOutput {
            handle: DatasetHandle::output(value.to_string(), 1),
            seconds: 0.5,
            metric: req.is_last.then_some(value),
        })
    }
}

#[test]
fn dominant_path_ranks_first() {
    let spec = toy();
    let cfg = BudgetConfig {
        t_init: Budget::Iterations(8),
        t_prune: Budget::Iterations(8),
        t_total: 30.0,
        top_r: 3,
        xi: 0.0,
        ..BudgetConfig::default()
    };
    let mut tuner = Tuner::new(Dominant { good: vec!["c", "e", "h"] }, cfg).unwrap();
    let s1 = tuner.phase1_initialize(&spec).unwrap();
    let r = tuner.phase2_prune(&spec, s1).unwrap();
    assert_eq!(spec.path_label(&r.top_paths[0]), "c-e-h");
    assert_eq!(r.state.observations.len(), 16);
}

#[test]
fn noise_free_search_reaches_optimum() {
    let spec = toy();
    for seed in 0..3 {
        let bench = make_synthetic(&spec, seed, 0.0);
        let optimum = bench.optimum_value();
        let label = spec.path_label(&bench.optimal_path());
        let cfg = BudgetConfig { t_init: Budget::Iterations(10), t_prune: Budget::Iterations(10), t_total: 400.0, top_r: 3, seed, ..BudgetConfig::default() };
        let out = run_flash(&spec, bench, cfg, None, None).unwrap();
        let best = out.best.unwrap();
        // Right path; bowl residue on the continuous dimensions stays small.
        assert_eq!(best.path_label, label, "seed {seed}");
        assert!(best.metric >= optimum - 1e-12 && best.metric - optimum < 0.05, "seed {seed}: {} vs {optimum}", best.metric);
    }
}

#[test]
fn trace_file_matches_outcome_and_report() {
    let spec = benchmark_family_spec();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("trace.csv");
    let cfg = BudgetConfig { t_total: 120.0, seed: 4, ..BudgetConfig::default() };
    let out = run_flash(&spec, make_synthetic(&spec, 4, 0.02), cfg, Some(TraceWriter::create(&path).unwrap()), None).unwrap();
    let rows = read_trace_file(&path).unwrap();
    assert_eq!(rows, out.rows);
    assert_eq!(rows.iter().filter(|r| r.phase == Phase::Init as u8).count(), 30);
    assert_eq!(rows.iter().filter(|r| r.phase == Phase::Prune as u8).count(), 30);
    for (i, r) in rows.iter().enumerate() {
        assert_eq!(r.iter, i + 1);
        let ids: Vec<&str> = r.path.split('-').collect();
        let active = if r.phase == Phase::Finetune as u8 { &out.searched_spec } else { &spec };
        active.encode_path(&ids).unwrap();
    }
    let s = summarize(&rows).unwrap();
    let hits: usize = rows.iter().map(|r| r.cache_hits).sum();
    let misses: usize = rows.iter().map(|r| r.cache_misses).sum();
    assert_eq!(s.hit_rate(), hits as f64 / (hits + misses) as f64);
    let mut running = f64::INFINITY;
    for (row, &(_, b)) in rows.iter().zip(&s.best_series) {
        running = running.min(row.metric);
        assert_eq!(b, running);
    }
    assert_eq!(parse_trace(File::open(&path).unwrap()).unwrap().len(), out.rows.len());
}

#[test]
fn seconds_budgets_for_early_phases() {
    let spec = benchmark_family_spec();
    let cfg = BudgetConfig { t_init: Budget::Seconds(20.0), t_prune: Budget::Seconds(15.0), t_total: 60.0, seed: 1, ..BudgetConfig::default() };
    let out = run_flash(&spec, make_synthetic(&spec, 1, 0.02), cfg, None, None).unwrap();
    let last_init = out.rows.iter().rfind(|r| r.phase == 1).unwrap();
    let last_prune = out.rows.iter().rfind(|r| r.phase == 2).unwrap();
    // Each phase stops at the first run that crosses its allowance.
    assert!(last_init.wall_clock_s >= 20.0);
    assert!(last_init.wall_clock_s - last_init.cost_s < 20.0 + 0.01 + 1e-9);
    assert!(last_prune.wall_clock_s >= 35.0 - 1e-9);
    let last = out.rows.last().unwrap();
    assert!(last.wall_clock_s - last.cost_s < 60.0 + 0.01 + 1e-9);
}

#[test]
fn random_baseline_writes_phase_zero() {
    let spec = toy();
    let cfg = BudgetConfig { t_total: 20.0, ..BudgetConfig::default() };
    let out = run_random_search(&spec, make_synthetic(&spec, 2, 0.0), cfg, None).unwrap();
    assert!(!out.rows.is_empty());
    assert!(out.rows.iter().all(|r| r.phase == 0));
    assert_eq!(out.best_metric(), out.rows.iter().map(|r| r.metric).fold(f64::INFINITY, f64::min));
}
