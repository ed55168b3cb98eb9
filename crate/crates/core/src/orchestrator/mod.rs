//! The three-phase search loop, its budgets, and the random-search baseline.
//!
//! All phases share one executor, one prefix cache, one seeded RNG stream and
//! one clock. With a simulated-time executor the clock is the sum of charged
//! run seconds, which makes traces reproducible bit for bit.

pub mod report;
pub mod trace;

use std::fmt;
use std::str::FromStr;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::Instant;

use log::{info, warn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Deserializer};
use thiserror::Error;

use crate::cache::{run_pipeline_with_cache, CachePool, CacheStats, CachedPrefix, DEFAULT_CACHE_BYTES};
use crate::design::{default_candidate_count, generate_candidates, greedy_online_next, DesignState};
use crate::executor::{Executor, ExecutorError, TimeMode};
use crate::finetune::{build_model, DensityModel, HistoryRecord, HistorySet, DEFAULT_CANDIDATES, DEFAULT_GAMMA};
use crate::graph::{HyperparamAssignment, PipelinePath, PipelineSpec};
use crate::surrogate::{
    fit_cost_model, fit_ridge, rank_paths, select_next_path, Acquisition, LinearSurrogate, ObservationSet,
    DEFAULT_RIDGE_LAMBDA,
};
use trace::{Phase, TraceRow, TraceWriter};

/// Smallest cost fed to the cost model; runs served from cache may report 0.
const MIN_MODEL_COST: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum OrchestratorError {
    #[error("budget too small: {0}")]
    BudgetTooSmall(String),
    #[error("invalid configuration: {0}")]
    ConfigParse(String),
    #[error("invalid trace: {0}")]
    TraceParse(String),
    #[error("executor failure: {0}")]
    Executor(ExecutorError),
    #[error("interrupted before the first completed run")]
    Interrupted,
    #[error("i/o: {0}")]
    Io(String),
    #[error("internal error: {0}")]
    Internal(String),
}

pub type Result<T, E = OrchestratorError> = std::result::Result<T, E>;

/// Phase budget: a run count or seconds on the tuning clock.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Budget {
    Iterations(usize),
    Seconds(f64),
}

impl FromStr for Budget {
    type Err = OrchestratorError;

    /// `"30"` is 30 runs, `"45s"` or `"45.5s"` is seconds.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let bad = || OrchestratorError::ConfigParse(format!("budget `{s}` is neither <runs> nor <seconds>s"));
        if let Some(secs) = s.strip_suffix('s') {
            let v: f64 = secs.trim().parse().map_err(|_| bad())?;
            if !(v.is_finite() && v >= 0.0) {
                return Err(bad());
            }
            Ok(Budget::Seconds(v))
        } else {
            s.parse().map(Budget::Iterations).map_err(|_| bad())
        }
    }
}

impl fmt::Display for Budget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Budget::Iterations(n) => write!(f, "{n}"),
            Budget::Seconds(s) => write!(f, "{s}s"),
        }
    }
}

impl<'de> Deserialize<'de> for Budget {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Repr {
            Runs(usize),
            Text(String),
        }
        match Repr::deserialize(d)? {
            Repr::Runs(n) => Ok(Budget::Iterations(n)),
            Repr::Text(s) => s.parse().map_err(serde::de::Error::custom),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BudgetConfig {
    pub t_init: Budget,
    pub t_prune: Budget,
    /// Seconds on the tuning clock for all three phases together.
    pub t_total: f64,
    pub per_run_timeout: f64,
    pub top_r: usize,
    pub xi: f64,
    pub ridge_lambda: f64,
    pub cache_budget_bytes: u64,
    pub candidate_budget: usize,
    pub seed: u64,
    pub gamma: f64,
    pub finetune_candidates: usize,
    /// Added to the worst successful metric to score a failed run.
    pub failure_penalty: f64,
    /// Bookkeeping seconds charged to a simulated clock for every run, so
    /// fully cached runs still advance time.
    pub run_overhead_seconds: f64,
}

impl Default for BudgetConfig {
    fn default() -> Self {
        Self {
            t_init: Budget::Iterations(30),
            t_prune: Budget::Iterations(30),
            t_total: 36_000.0,
            per_run_timeout: 900.0,
            top_r: 10,
            xi: 100.0,
            ridge_lambda: DEFAULT_RIDGE_LAMBDA,
            cache_budget_bytes: DEFAULT_CACHE_BYTES,
            candidate_budget: 10_000,
            seed: 0,
            gamma: DEFAULT_GAMMA,
            finetune_candidates: DEFAULT_CANDIDATES,
            failure_penalty: 1.0,
            run_overhead_seconds: 0.01,
        }
    }
}

impl BudgetConfig {
    pub fn from_json_str(text: &str) -> Result<Self> {
        let cfg: BudgetConfig = serde_json::from_str(text).map_err(|e| OrchestratorError::ConfigParse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(OrchestratorError::ConfigParse(m.to_string()));
        if !(self.t_total.is_finite() && self.t_total > 0.0) {
            return fail("t_total must be positive");
        }
        if !(self.per_run_timeout.is_finite() && self.per_run_timeout > 0.0) {
            return fail("per_run_timeout must be positive");
        }
        if self.top_r == 0 {
            return fail("top_r must be at least 1");
        }
        if !(self.xi.is_finite() && self.xi >= 0.0) {
            return fail("xi must be finite and nonnegative");
        }
        if !(self.ridge_lambda.is_finite() && self.ridge_lambda > 0.0) {
            return fail("ridge_lambda must be positive");
        }
        if self.candidate_budget == 0 {
            return fail("candidate_budget must be at least 1");
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return fail("gamma must lie in (0, 1)");
        }
        if self.finetune_candidates == 0 {
            return fail("finetune_candidates must be at least 1");
        }
        if !(self.failure_penalty.is_finite() && self.failure_penalty >= 0.0) {
            return fail("failure_penalty must be finite and nonnegative");
        }
        if !(self.run_overhead_seconds.is_finite() && self.run_overhead_seconds > 0.0) {
            return fail("run_overhead_seconds must be positive");
        }
        for b in [self.t_init, self.t_prune] {
            if b == Budget::Iterations(0) || b == Budget::Seconds(0.0) {
                return Err(OrchestratorError::BudgetTooSmall("phase budgets must be positive".into()));
            }
        }
        Ok(())
    }
}

/// One completed (or penalized) run, stored by algorithm ids so it can be
/// re-encoded in any spec that contains those algorithms.
#[derive(Debug, Clone, PartialEq)]
pub struct RunRecord {
    pub iter: usize,
    pub phase: Phase,
    pub ids: Vec<String>,
    pub hyperparams: HyperparamAssignment,
    pub metric: f64,
    pub failed: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub metric: f64,
    pub charged_seconds: f64,
    /// Cost fed to the cost model: the uncached cost of the path.
    pub model_cost: f64,
    pub failed: bool,
}

/// Observations and both linear models after phases 1 or 2.
#[derive(Debug, Clone)]
pub struct SurrogateState {
    pub observations: ObservationSet,
    pub metric_model: LinearSurrogate,
    pub cost_model: LinearSurrogate,
}

#[derive(Debug, Clone)]
pub struct PruneResult {
    pub state: SurrogateState,
    /// Top-r paths at ξ = 0, best first, encoded in the unpruned spec.
    pub top_paths: Vec<PipelinePath>,
    pub pruned: PipelineSpec,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BestConfig {
    pub phase: Phase,
    pub iter: usize,
    pub path_label: String,
    pub hyperparams_json: String,
    pub metric: f64,
}

#[derive(Debug, Clone)]
pub struct TuningOutcome {
    /// Best configuration whose path lies in the searched (pruned) spec.
    pub best: Option<BestConfig>,
    /// Best configuration over every run, wherever its path lies.
    pub global_best: Option<BestConfig>,
    pub searched_spec: PipelineSpec,
    pub top_paths: Vec<String>,
    pub rows: Vec<TraceRow>,
    pub cache: CacheStats,
    pub elapsed_seconds: f64,
    pub interrupted: bool,
}

impl TuningOutcome {
    pub fn best_metric(&self) -> f64 {
        self.best.as_ref().map_or(f64::INFINITY, |b| b.metric)
    }

    pub fn summary(&self) -> String {
        let mut s = String::new();
        match &self.best {
            Some(b) => {
                s += &format!("best metric: {}\n", b.metric);
                s += &format!("best path: {}\n", b.path_label);
                s += &format!("best hyperparameters: {}\n", b.hyperparams_json);
                s += &format!("found in phase {} at run {}\n", b.phase as u8, b.iter);
            }
            None => s += "no successful run inside the pruned subgraph\n",
        }
        if let (Some(g), Some(b)) = (&self.global_best, &self.best) {
            if g.metric < b.metric {
                s += &format!(
                    "note: run {} on pruned-away path {} scored {} but is excluded from the outcome\n",
                    g.iter, g.path_label, g.metric
                );
            }
        }
        if !self.top_paths.is_empty() {
            s += &format!("pruned subgraph built from {} paths: {}\n", self.top_paths.len(), self.top_paths.join(", "));
        }
        let total = self.cache.hits + self.cache.misses;
        let rate = if total == 0 { 0.0 } else { self.cache.hits as f64 / total as f64 };
        s += &format!(
            "runs: {}, elapsed: {:.3} s, cache hit rate: {:.4}\n",
            self.rows.len(),
            self.elapsed_seconds,
            rate
        );
        if self.interrupted {
            s += "interrupted: search stopped early\n";
        }
        s
    }
}

/// Shared state of one tuning session.
pub struct Tuner<E: Executor> {
    executor: E,
    config: BudgetConfig,
    cache: CachePool<CachedPrefix>,
    rng: ChaCha8Rng,
    started: Instant,
    simulated_elapsed: f64,
    rows: Vec<TraceRow>,
    records: Vec<RunRecord>,
    writer: Option<TraceWriter>,
    stop: Option<Arc<AtomicBool>>,
    best_so_far: f64,
    worst_success: Option<f64>,
}

impl<E: Executor> Tuner<E> {
    pub fn new(executor: E, config: BudgetConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            executor,
            cache: CachePool::new(config.cache_budget_bytes),
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            config,
            started: Instant::now(),
            simulated_elapsed: 0.0,
            rows: Vec::new(),
            records: Vec::new(),
            writer: None,
            stop: None,
            best_so_far: f64::INFINITY,
            worst_success: None,
        })
    }

    pub fn with_trace_writer(mut self, writer: TraceWriter) -> Self {
        self.writer = Some(writer);
        self
    }

    pub fn with_stop_flag(mut self, flag: Arc<AtomicBool>) -> Self {
        self.stop = Some(flag);
        self
    }

    pub fn config(&self) -> &BudgetConfig {
        &self.config
    }

    pub fn executor(&self) -> &E {
        &self.executor
    }

    pub fn rows(&self) -> &[TraceRow] {
        &self.rows
    }

    pub fn records(&self) -> &[RunRecord] {
        &self.records
    }

    pub fn cache_stats(&self) -> CacheStats {
        self.cache.stats()
    }

    /// Seconds on the tuning clock.
    pub fn elapsed(&self) -> f64 {
        match self.executor.time_mode() {
            TimeMode::Simulated => self.simulated_elapsed,
            TimeMode::Wall => self.started.elapsed().as_secs_f64(),
        }
    }

    fn out_of_time(&self) -> bool {
        self.elapsed() >= self.config.t_total
    }

    fn stopped(&self) -> bool {
        self.stop.as_ref().is_some_and(|f| f.load(Ordering::SeqCst))
    }

    fn phase_done(&self, budget: Budget, runs: usize, phase_start: f64) -> bool {
        let exhausted = match budget {
            Budget::Iterations(n) => runs >= n,
            Budget::Seconds(s) => self.elapsed() - phase_start >= s,
        };
        exhausted || self.out_of_time() || self.stopped()
    }

    /// Runs one configuration, appends a trace row, and scores failures with
    /// the penalty metric. Errors that are not local to the run abort.
    pub fn evaluate(
        &mut self,
        phase: Phase,
        spec: &PipelineSpec,
        path: &PipelinePath,
        hp: &HyperparamAssignment,
    ) -> Result<Evaluation> {
        let outcome =
            run_pipeline_with_cache(spec, path, hp, &mut self.cache, &mut self.executor, self.config.per_run_timeout);
        let (eval, hits, misses) = match outcome {
            Ok(r) => {
                self.worst_success = Some(self.worst_success.map_or(r.metric, |w| w.max(r.metric)));
                let (h, m) = (r.cache_hits(), r.cache_misses());
                let eval = Evaluation {
                    metric: r.metric,
                    charged_seconds: r.cost_seconds,
                    model_cost: r.nominal_cost_seconds.max(MIN_MODEL_COST),
                    failed: false,
                };
                (eval, h, m)
            }
            Err(f) if f.error.is_run_local() => {
                warn!("run on {} failed: {}", spec.path_label(path), f.error);
                let metric = self.worst_success.unwrap_or(0.0) + self.config.failure_penalty;
                let eval = Evaluation {
                    metric,
                    charged_seconds: f.charged_seconds,
                    model_cost: f.charged_seconds.max(MIN_MODEL_COST),
                    failed: true,
                };
                (eval, f.hits, f.misses)
            }
            Err(f) => {
                self.simulated_elapsed += f.charged_seconds;
                return Err(OrchestratorError::Executor(f.error));
            }
        };
        self.simulated_elapsed += eval.charged_seconds + self.config.run_overhead_seconds;
        self.best_so_far = self.best_so_far.min(eval.metric);
        let iter = self.rows.len() + 1;
        let row = TraceRow {
            iter,
            phase: phase as u8,
            wall_clock_s: self.elapsed(),
            path: spec.path_label(path),
            hyperparams_json: hp.to_json(spec).to_string(),
            metric: eval.metric,
            cost_s: eval.charged_seconds,
            best_so_far: self.best_so_far,
            cache_hits: hits,
            cache_misses: misses,
        };
        if let Some(w) = self.writer.as_mut() {
            w.append(&row)?;
        }
        self.rows.push(row);
        self.records.push(RunRecord {
            iter,
            phase,
            ids: spec.decode_path(path),
            hyperparams: hp.clone(),
            metric: eval.metric,
            failed: eval.failed,
        });
        Ok(eval)
    }

    fn fit(&self, observations: ObservationSet) -> Result<SurrogateState> {
        let lambda = self.config.ridge_lambda;
        let metric_model = fit_ridge(&observations, observations.metrics(), lambda)
            .map_err(|e| OrchestratorError::Internal(e.to_string()))?;
        let cost_model = fit_cost_model(&observations, lambda).map_err(|e| OrchestratorError::Internal(e.to_string()))?;
        Ok(SurrogateState { observations, metric_model, cost_model })
    }

    /// Greedy D-optimal paths with random hyperparameters until the init
    /// budget runs out.
    pub fn phase1_initialize(&mut self, spec: &PipelineSpec) -> Result<SurrogateState> {
        let b = default_candidate_count(spec, self.config.candidate_budget);
        let candidates = generate_candidates(spec, b, &mut self.rng);
        let mut design = DesignState::new(spec.n_algorithms());
        let mut obs = ObservationSet::new(spec.n_algorithms());
        let start = self.elapsed();
        while !self.phase_done(self.config.t_init, obs.len(), start) {
            let path = if design.step_count() == 0 {
                candidates[self.rng.random_range(0..candidates.len())].clone()
            } else {
                greedy_online_next(&candidates, design.gram()).map_err(|e| OrchestratorError::Internal(e.to_string()))?
            };
            let hp = spec.sample_random_hyperparams(&path, &mut self.rng);
            let ev = self.evaluate(Phase::Init, spec, &path, &hp)?;
            obs.push(path.clone(), ev.metric, ev.model_cost).map_err(|e| OrchestratorError::Internal(e.to_string()))?;
            design.add(path);
        }
        if obs.is_empty() {
            return Err(if self.stopped() {
                OrchestratorError::Interrupted
            } else {
                OrchestratorError::BudgetTooSmall("no run completed in phase 1".into())
            });
        }
        info!("phase 1: {} runs, elapsed {:.3} s", obs.len(), self.elapsed());
        self.fit(obs)
    }

    /// EIPS-driven runs, then pruning to the union of the top-r paths ranked
    /// with ξ = 0.
    pub fn phase2_prune(&mut self, spec: &PipelineSpec, mut state: SurrogateState) -> Result<PruneResult> {
        let start = self.elapsed();
        let mut runs = 0;
        while !self.phase_done(self.config.t_prune, runs, start) {
            let acq = Acquisition {
                metric_model: &state.metric_model,
                cost_model: &state.cost_model,
                best_metric: state.observations.best_metric().unwrap_or(f64::INFINITY),
                xi: self.config.xi,
            };
            let path = select_next_path(spec, &acq, self.config.candidate_budget, &mut self.rng)
                .map_err(|e| OrchestratorError::Internal(e.to_string()))?;
            let hp = spec.sample_random_hyperparams(&path, &mut self.rng);
            let ev = self.evaluate(Phase::Prune, spec, &path, &hp)?;
            let mut obs = state.observations;
            obs.push(path, ev.metric, ev.model_cost).map_err(|e| OrchestratorError::Internal(e.to_string()))?;
            state = self.fit(obs)?;
            runs += 1;
        }
        let acq = Acquisition {
            metric_model: &state.metric_model,
            cost_model: &state.cost_model,
            best_metric: state.observations.best_metric().unwrap_or(f64::INFINITY),
            xi: 0.0,
        };
        let top_paths = rank_paths(spec, &acq, self.config.candidate_budget, self.config.top_r, &mut self.rng)
            .map_err(|e| OrchestratorError::Internal(e.to_string()))?;
        let pruned = spec.prune_to_subgraph(&top_paths).map_err(|e| OrchestratorError::Internal(e.to_string()))?;
        info!(
            "phase 2: {} runs, pruned to {} algorithms / {} paths",
            runs,
            pruned.n_algorithms(),
            pruned.path_count()
        );
        Ok(PruneResult { state, top_paths, pruned })
    }

    /// Records from earlier phases whose paths lie in `pruned`.
    pub fn seeded_history(&self, pruned: &PipelineSpec) -> HistorySet {
        let mut history = HistorySet::new();
        for rec in &self.records {
            if let Ok(path) = pruned.encode_path(&rec.ids) {
                let record = HistoryRecord { path, hyperparams: rec.hyperparams.clone(), metric: rec.metric };
                if history.push_checked(pruned, record).is_err() {
                    warn!("skipping run {} when seeding the tuner", rec.iter);
                }
            }
        }
        history
    }

    /// Density-ratio tuning inside `pruned` until the total budget runs out.
    pub fn phase3_finetune(&mut self, pruned: &PipelineSpec) -> Result<()> {
        let mut history = self.seeded_history(pruned);
        let gamma = self.config.gamma;
        let mut model: Option<DensityModel> =
            (!history.is_empty()).then(|| build_model(pruned, &history, gamma)).transpose().map_err(internal)?;
        let mut runs = 0;
        while !self.out_of_time() && !self.stopped() {
            let (path, hp) = match &model {
                Some(m) => m.propose(pruned, self.config.finetune_candidates, &mut self.rng),
                None => {
                    let path = pruned.sample_random_path(&mut self.rng);
                    let hp = pruned.sample_random_hyperparams(&path, &mut self.rng);
                    (path, hp)
                }
            };
            let ev = self.evaluate(Phase::Finetune, pruned, &path, &hp)?;
            let record = HistoryRecord { path, hyperparams: hp, metric: ev.metric };
            match &mut model {
                Some(m) => m.insert(pruned, record).map_err(internal)?,
                None => {
                    history.push_checked(pruned, record).map_err(internal)?;
                    model = Some(build_model(pruned, &history, gamma).map_err(internal)?);
                }
            }
            runs += 1;
        }
        info!("phase 3: {} runs, elapsed {:.3} s", runs, self.elapsed());
        Ok(())
    }

    /// Best successful record (earliest on ties), optionally restricted to
    /// paths of `within`.
    pub fn best_record(&self, within: Option<&PipelineSpec>) -> Option<BestConfig> {
        let mut best: Option<&RunRecord> = None;
        for rec in self.records.iter().filter(|r| !r.failed) {
            if within.is_some_and(|s| s.encode_path(&rec.ids).is_err()) {
                continue;
            }
            if best.is_none_or(|b| rec.metric < b.metric) {
                best = Some(rec);
            }
        }
        best.map(|r| BestConfig {
            phase: r.phase,
            iter: r.iter,
            path_label: r.ids.join("-"),
            hyperparams_json: self.rows[r.iter - 1].hyperparams_json.clone(),
            metric: r.metric,
        })
    }

    fn outcome(&self, searched: &PipelineSpec, top_paths: Vec<String>) -> TuningOutcome {
        TuningOutcome {
            best: self.best_record(Some(searched)),
            global_best: self.best_record(None),
            searched_spec: searched.clone(),
            top_paths,
            rows: self.rows.clone(),
            cache: self.cache.stats(),
            elapsed_seconds: self.elapsed(),
            interrupted: self.stopped(),
        }
    }

    /// Phases 1 to 3 over `spec`.
    pub fn run(&mut self, spec: &PipelineSpec) -> Result<TuningOutcome> {
        let state = self.phase1_initialize(spec)?;
        let pruned = self.phase2_prune(spec, state)?;
        self.phase3_finetune(&pruned.pruned)?;
        let labels = pruned.top_paths.iter().map(|p| spec.path_label(p)).collect();
        Ok(self.outcome(&pruned.pruned, labels))
    }

    /// Uniform random paths and hyperparameters until the total budget runs out.
    pub fn random_search(&mut self, spec: &PipelineSpec) -> Result<TuningOutcome> {
        while !self.out_of_time() && !self.stopped() {
            let path = spec.sample_random_path(&mut self.rng);
            let hp = spec.sample_random_hyperparams(&path, &mut self.rng);
            self.evaluate(Phase::Baseline, spec, &path, &hp)?;
        }
        Ok(self.outcome(spec, Vec::new()))
    }
}

fn internal<E: fmt::Display>(e: E) -> OrchestratorError {
    OrchestratorError::Internal(e.to_string())
}

/// Runs the full search, writing the trace to `writer` as it goes.
pub fn run_flash<E: Executor>(
    spec: &PipelineSpec,
    executor: E,
    config: BudgetConfig,
    writer: Option<TraceWriter>,
    stop: Option<Arc<AtomicBool>>,
) -> Result<TuningOutcome> {
    let mut tuner = Tuner::new(executor, config)?;
    if let Some(w) = writer {
        tuner = tuner.with_trace_writer(w);
    }
    if let Some(s) = stop {
        tuner = tuner.with_stop_flag(s);
    }
    tuner.run(spec)
}

/// Random-search baseline under the same clock, cache and seed conventions.
pub fn run_random_search<E: Executor>(
    spec: &PipelineSpec,
    executor: E,
    config: BudgetConfig,
    writer: Option<TraceWriter>,
) -> Result<TuningOutcome> {
    let mut tuner = Tuner::new(executor, config)?;
    if let Some(w) = writer {
        tuner = tuner.with_trace_writer(w);
    }
    tuner.random_search(spec)
}
