//! Synthetic pipeline benchmark with closed-form ground truth.
//!
//! Each algorithm carries an additive error contribution `β*`, a fixed
//! simulated runtime, and a quadratic bowl over its continuous
//! hyperparameters. A path's metric is
//! `Σ β* + Σ bowl(λ) + noise`, where the noise is a deterministic function of
//! the benchmark seed and the full configuration. Bowl coordinates are
//! normalized to the unit interval (in log10 space for log-scaled dimensions).

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};

use super::{DatasetHandle, Executor, ExecutorError, StepOutput, StepRequest, TimeMode};
use crate::graph::{
    AlgorithmSpec, Domain, HpValue, HyperparamAssignment, HyperparamSpec, PipelinePath, PipelineSpec, Scale, Step,
};

pub const MIN_COST_SECONDS: f64 = 0.01;
pub const MAX_COST_SECONDS: f64 = 2.0;
/// Bowl weights are drawn uniformly from this range.
pub const BOWL_WEIGHT_RANGE: (f64, f64) = (0.05, 0.15);
/// Nominal size of a simulated intermediate dataset.
pub const DEFAULT_OUTPUT_BYTES: u64 = 1 << 20;

#[derive(Debug, Clone, PartialEq)]
pub struct Bowl {
    pub name: String,
    /// Optimum in native units.
    pub center: f64,
    lo: f64,
    hi: f64,
    scale: Scale,
}

impl Bowl {
    fn coord(&self, v: f64) -> f64 {
        match self.scale {
            Scale::Linear => (v - self.lo) / (self.hi - self.lo),
            Scale::Log => (v.log10() - self.lo.log10()) / (self.hi.log10() - self.lo.log10()),
        }
    }

    /// Squared normalized distance from the optimum.
    pub fn value(&self, v: f64) -> f64 {
        (self.coord(v) - self.coord(self.center)).powi(2)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AlgorithmTruth {
    pub beta: f64,
    pub cost_seconds: f64,
    pub weight: f64,
    pub bowls: Vec<Bowl>,
}

impl AlgorithmTruth {
    /// `weight · Σ (x − x*)²` over continuous hyperparameters; missing values
    /// are an error.
    pub fn bowl_value(&self, hyperparams: &Map<String, Value>) -> Result<f64, String> {
        let mut sum = 0.0;
        for bowl in &self.bowls {
            let v = hyperparams
                .get(&bowl.name)
                .and_then(Value::as_f64)
                .ok_or_else(|| format!("missing continuous hyperparameter `{}`", bowl.name))?;
            sum += bowl.value(v);
        }
        Ok(self.weight * sum)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticBenchmark {
    spec: PipelineSpec,
    truths: BTreeMap<String, AlgorithmTruth>,
    noise_sd: f64,
    seed: u64,
    output_bytes: u64,
}

/// Draws a benchmark instance for `spec`.
pub fn make_synthetic(spec: &PipelineSpec, seed: u64, noise_sd: f64) -> SyntheticBenchmark {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut truths = BTreeMap::new();
    for g in 0..spec.n_algorithms() {
        let alg = spec.algorithm(g);
        let beta = rng.random_range(0.0..=1.0);
        let cost_seconds = 10f64.powf(rng.random_range(MIN_COST_SECONDS.log10()..=MAX_COST_SECONDS.log10()));
        let weight = rng.random_range(BOWL_WEIGHT_RANGE.0..=BOWL_WEIGHT_RANGE.1);
        let bowls = alg
            .hyperparams
            .iter()
            .filter_map(|hp| match hp.domain {
                Domain::Continuous { lo, hi, scale } => {
                    let HpValue::Float(center) = hp.sample(&mut rng) else { unreachable!() };
                    Some(Bowl { name: hp.name.clone(), center, lo, hi, scale })
                }
                _ => None,
            })
            .collect();
        truths.insert(alg.id.clone(), AlgorithmTruth { beta, cost_seconds, weight, bowls });
    }
    SyntheticBenchmark { spec: spec.clone(), truths, noise_sd: noise_sd.max(0.0), seed, output_bytes: DEFAULT_OUTPUT_BYTES }
}

impl SyntheticBenchmark {
    pub fn spec(&self) -> &PipelineSpec {
        &self.spec
    }

    pub fn noise_sd(&self) -> f64 {
        self.noise_sd
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn with_output_bytes(mut self, bytes: u64) -> Self {
        self.output_bytes = bytes.max(1);
        self
    }

    pub fn truth(&self, algorithm: &str) -> Option<&AlgorithmTruth> {
        self.truths.get(algorithm)
    }

    /// β* in the global algorithm order of the benchmark's spec.
    pub fn true_beta(&self) -> Vec<f64> {
        (0..self.spec.n_algorithms()).map(|g| self.truths[&self.spec.algorithm(g).id].beta).collect()
    }

    /// Per-algorithm simulated seconds in global order.
    pub fn true_cost(&self) -> Vec<f64> {
        (0..self.spec.n_algorithms()).map(|g| self.truths[&self.spec.algorithm(g).id].cost_seconds).collect()
    }

    /// `β*ᵀp` for a path of `spec` (any spec whose ids exist in the benchmark).
    pub fn path_beta(&self, spec: &PipelineSpec, path: &PipelinePath) -> f64 {
        spec.decode_path(path).iter().map(|id| self.truths[id].beta).sum()
    }

    pub fn path_cost(&self, spec: &PipelineSpec, path: &PipelinePath) -> f64 {
        spec.decode_path(path).iter().map(|id| self.truths[id].cost_seconds).sum()
    }

    /// Noise-free metric `β*ᵀp + Σ bowls`.
    pub fn expected_metric(&self, spec: &PipelineSpec, path: &PipelinePath, hp: &HyperparamAssignment) -> f64 {
        spec.decode_path(path)
            .iter()
            .map(|id| {
                let t = &self.truths[id];
                t.beta + t.bowl_value(&hp.step_json(spec, id)).unwrap_or(f64::INFINITY)
            })
            .sum()
    }

    /// The path minimizing `β*ᵀp` (ties to the smaller path), by dynamic
    /// programming over the DAG.
    pub fn optimal_path(&self) -> PipelinePath {
        let spec = &self.spec;
        let n = spec.n_algorithms();
        let last = spec.n_steps() - 1;
        let mut best = vec![f64::INFINITY; n];
        let mut next: Vec<Option<usize>> = vec![None; n];
        for g in (0..n).rev() {
            let beta = self.truths[&spec.algorithm(g).id].beta;
            if spec.step_of(g) == last {
                best[g] = beta;
            } else {
                for &s in spec.successors(g) {
                    if beta + best[s] < best[g] {
                        best[g] = beta + best[s];
                        next[g] = Some(s);
                    }
                }
            }
        }
        let mut g = (0..spec.step_len(0)).fold(0, |acc, g| if best[g] < best[acc] { g } else { acc });
        let mut ids = vec![spec.algorithm(g).id.clone()];
        while let Some(s) = next[g] {
            ids.push(spec.algorithm(s).id.clone());
            g = s;
        }
        spec.encode_path(&ids).expect("dp walks valid edges")
    }

    /// Bowl optima for continuous dimensions, defaults elsewhere.
    pub fn optimal_hyperparams(&self, spec: &PipelineSpec, path: &PipelinePath) -> HyperparamAssignment {
        let mut hp = spec.default_hyperparams(path);
        for id in spec.decode_path(path) {
            for bowl in &self.truths[&id].bowls {
                hp.set(&id, &bowl.name, HpValue::Float(bowl.center));
            }
        }
        hp
    }

    /// Smallest achievable noise-free metric.
    pub fn optimum_value(&self) -> f64 {
        self.path_beta(&self.spec, &self.optimal_path())
    }

    fn noise(&self, lineage: u64) -> f64 {
        if self.noise_sd == 0.0 {
            return 0.0;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(lineage);
        let z: f64 = rng.sample(StandardNormal);
        self.noise_sd * z
    }
}

fn lineage_hash(parent: u64, algorithm: &str, hyperparams: &Map<String, Value>) -> u64 {
    let mut h = Sha256::new();
    h.update(parent.to_be_bytes());
    h.update(algorithm.as_bytes());
    h.update([0u8]);
    h.update(Value::Object(hyperparams.clone()).to_string().as_bytes());
    let d = h.finalize();
    u64::from_be_bytes(d[..8].try_into().expect("sha256 digest is 32 bytes"))
}

/// Handle tokens carry the running partial metric and a configuration hash.
fn encode_token(partial: f64, lineage: u64) -> String {
    format!("syn:{:016x}:{lineage:016x}", partial.to_bits())
}

fn decode_token(token: &str) -> Option<(f64, u64)> {
    let mut parts = token.split(':');
    if parts.next()? != "syn" {
        return None;
    }
    let partial = f64::from_bits(u64::from_str_radix(parts.next()?, 16).ok()?);
    let lineage = u64::from_str_radix(parts.next()?, 16).ok()?;
    parts.next().is_none().then_some((partial, lineage))
}

impl Executor for SyntheticBenchmark {
    fn time_mode(&self) -> TimeMode {
        TimeMode::Simulated
    }

    fn dataset_id(&self) -> String {
        format!("synthetic-{}", self.seed)
    }

    fn input_handle(&self) -> DatasetHandle {
        DatasetHandle::input(encode_token(0.0, self.seed), self.output_bytes)
    }

    fn run_step(&mut self, request: &StepRequest<'_>, timeout_seconds: f64) -> Result<StepOutput, ExecutorError> {
        let (partial, lineage) = decode_token(&request.input.id)
            .ok_or_else(|| ExecutorError::Failure(format!("foreign handle `{}`", request.input.id)))?;
        let truth = self
            .truths
            .get(request.algorithm)
            .ok_or_else(|| ExecutorError::StepFailed(format!("unknown algorithm `{}`", request.algorithm)))?;
        let step = self.spec.algorithm_by_id(request.algorithm).map(|a| a.step);
        if step != Some(request.step) {
            return Err(ExecutorError::StepFailed(format!("`{}` is not a step-{} algorithm", request.algorithm, request.step)));
        }
        if truth.cost_seconds > timeout_seconds {
            return Err(ExecutorError::StepTimeout { seconds: timeout_seconds.max(0.0) });
        }
        let bowl = truth.bowl_value(request.hyperparams).map_err(ExecutorError::StepFailed)?;
        let partial = partial + truth.beta + bowl;
        let lineage = lineage_hash(lineage, request.algorithm, request.hyperparams);
        let metric = request.is_last.then(|| partial + self.noise(lineage));
        Ok(StepOutput {
            handle: DatasetHandle::output(encode_token(partial, lineage), self.output_bytes),
            seconds: truth.cost_seconds,
            metric,
        })
    }
}

/// Four-step family shaped like a typical classification pipeline: rescaling
/// (4), balancing (2), feature preprocessing (13), classifier (14), for 1,456
/// fully connected paths and 102 hyperparameters (30 categorical, 72
/// continuous).
pub fn benchmark_family_spec() -> PipelineSpec {
    const LAYOUT: [&[(&str, usize, usize)]; 4] = [
        &[("minmax_scaler", 0, 0), ("rescale_none", 0, 0), ("normalizer", 0, 0), ("standardizer", 0, 0)],
        &[("class_weighting", 0, 0), ("balance_none", 0, 0)],
        &[
            ("extra_trees_preproc", 2, 3),
            ("fast_ica", 3, 1),
            ("feature_agglomeration", 2, 1),
            ("kernel_pca", 1, 6),
            ("random_kitchen_sinks", 0, 2),
            ("linear_svm_preproc", 0, 2),
            ("preproc_none", 0, 0),
            ("nystroem_sampler", 1, 8),
            ("pca", 1, 1),
            ("polynomial", 1, 2),
            ("random_trees_embedding", 0, 4),
            ("select_percentile", 1, 1),
            ("select_rates", 1, 2),
        ],
        &[
            ("adaboost", 1, 3),
            ("decision_tree", 1, 3),
            ("extra_trees", 2, 3),
            ("gaussian_nb", 0, 0),
            ("gradient_boosting", 0, 6),
            ("knn", 2, 1),
            ("lda", 1, 3),
            ("linear_svc", 0, 2),
            ("kernel_svc", 2, 5),
            ("multinomial_nb", 1, 1),
            ("passive_aggressive", 1, 2),
            ("qda", 0, 1),
            ("random_forest", 2, 3),
            ("sgd", 4, 6),
        ],
    ];
    let steps = LAYOUT
        .iter()
        .enumerate()
        .map(|(k, algs)| Step {
            index: k + 1,
            algorithms: algs
                .iter()
                .map(|&(id, n_cat, n_cont)| {
                    let mut hyperparams = Vec::new();
                    for i in 0..n_cat {
                        let n_choices = 2 + i % 2;
                        hyperparams.push(HyperparamSpec {
                            name: format!("cat_{i}"),
                            domain: Domain::Categorical {
                                choices: (0..n_choices).map(|c| Value::from(format!("opt{c}"))).collect(),
                            },
                            default: HpValue::Choice(0),
                        });
                    }
                    for i in 0..n_cont {
                        let (domain, default) = if i % 2 == 0 {
                            (Domain::Continuous { lo: 0.0, hi: 1.0, scale: Scale::Linear }, 0.5)
                        } else {
                            (Domain::Continuous { lo: 1e-4, hi: 1.0, scale: Scale::Log }, 1e-2)
                        };
                        hyperparams.push(HyperparamSpec { name: format!("cont_{i}"), domain, default: HpValue::Float(default) });
                    }
                    AlgorithmSpec { id: id.to_string(), step: k + 1, hyperparams }
                })
                .collect(),
        })
        .collect();
    PipelineSpec::new("benchmark-family", steps, None).expect("static layout is valid")
}
