//! Ridge-regression surrogates over one-hot path encodings, their Gaussian
//! predictive distribution, and the EI / EIPS acquisition functions.
//!
//! The fit uses the normal-equation form `(PᵀP + λI) β = Pᵀt`, so the
//! user-facing `λ` already absorbs the `1/n` of the empirical-risk form and the
//! predictive variance `σ²(1 + pᵀ(PᵀP + λI)⁻¹p)` uses the same matrix.

use std::f64::consts::{PI, SQRT_2};

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use statrs::function::erf::erfc;
use thiserror::Error;

use crate::graph::{PipelinePath, PipelineSpec};

pub const NOISE_FLOOR: f64 = 1e-6;
/// Lower bound on the EIPS denominator.
pub const COST_FLOOR: f64 = 1e-3;
pub const DEFAULT_RIDGE_LAMBDA: f64 = 1.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SurrogateError {
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("no observations to fit")]
    Empty,
    #[error("ridge lambda must be positive and finite, got {0}")]
    InvalidRidge(f64),
    #[error("regularized gram matrix is not positive definite")]
    NotPositiveDefinite,
    #[error("costs must be positive, got {0}")]
    NonPositiveCost(f64),
    #[error("non-finite target {0}")]
    NonFiniteTarget(f64),
}

pub type Result<T, E = SurrogateError> = std::result::Result<T, E>;

/// Stacked path encodings with their metrics and costs.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationSet {
    n_algorithms: usize,
    paths: Vec<PipelinePath>,
    metrics: Vec<f64>,
    costs: Vec<f64>,
}

impl ObservationSet {
    pub fn new(n_algorithms: usize) -> Self {
        Self { n_algorithms, paths: Vec::new(), metrics: Vec::new(), costs: Vec::new() }
    }

    pub fn push(&mut self, path: PipelinePath, metric: f64, cost: f64) -> Result<()> {
        if path.n_algorithms() != self.n_algorithms {
            return Err(SurrogateError::DimensionMismatch { expected: self.n_algorithms, actual: path.n_algorithms() });
        }
        if cost.is_nan() || cost <= 0.0 {
            return Err(SurrogateError::NonPositiveCost(cost));
        }
        if !metric.is_finite() {
            return Err(SurrogateError::NonFiniteTarget(metric));
        }
        self.paths.push(path);
        self.metrics.push(metric);
        self.costs.push(cost);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.paths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.paths.is_empty()
    }

    pub fn n_algorithms(&self) -> usize {
        self.n_algorithms
    }

    pub fn paths(&self) -> &[PipelinePath] {
        &self.paths
    }

    pub fn metrics(&self) -> &[f64] {
        &self.metrics
    }

    pub fn costs(&self) -> &[f64] {
        &self.costs
    }

    pub fn best_metric(&self) -> Option<f64> {
        self.metrics.iter().copied().reduce(f64::min)
    }

    /// Dense n×N design matrix P.
    pub fn design_matrix(&self) -> DMatrix<f64> {
        let mut p = DMatrix::zeros(self.len(), self.n_algorithms);
        for (i, path) in self.paths.iter().enumerate() {
            for &g in path.selected() {
                p[(i, g)] = 1.0;
            }
        }
        p
    }

    /// PᵀP accumulated from the sparse rows.
    pub fn gram(&self) -> DMatrix<f64> {
        let mut h = DMatrix::zeros(self.n_algorithms, self.n_algorithms);
        for path in &self.paths {
            for &a in path.selected() {
                for &b in path.selected() {
                    h[(a, b)] += 1.0;
                }
            }
        }
        h
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Prediction {
    pub mean: f64,
    pub variance: f64,
}

impl Prediction {
    pub fn std_dev(&self) -> f64 {
        self.variance.max(0.0).sqrt()
    }
}

/// A fitted ridge model. Immutable; refitting produces a new value.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearSurrogate {
    beta: DVector<f64>,
    ridge_lambda: f64,
    gram_inverse: DMatrix<f64>,
    noise_var: f64,
}

impl LinearSurrogate {
    pub fn beta(&self) -> &DVector<f64> {
        &self.beta
    }

    pub fn ridge_lambda(&self) -> f64 {
        self.ridge_lambda
    }

    /// (PᵀP + λI)⁻¹.
    pub fn gram_inverse(&self) -> &DMatrix<f64> {
        &self.gram_inverse
    }

    pub fn noise_var(&self) -> f64 {
        self.noise_var
    }

    pub fn n_algorithms(&self) -> usize {
        self.beta.len()
    }

    /// Gaussian predictive distribution at `path`.
    pub fn predict(&self, path: &PipelinePath) -> Result<Prediction> {
        if path.n_algorithms() != self.n_algorithms() {
            return Err(SurrogateError::DimensionMismatch { expected: self.n_algorithms(), actual: path.n_algorithms() });
        }
        let sel = path.selected();
        let mean: f64 = sel.iter().map(|&g| self.beta[g]).sum();
        let mut quad = 0.0;
        for &a in sel {
            for &b in sel {
                quad += self.gram_inverse[(a, b)];
            }
        }
        Ok(Prediction { mean, variance: self.noise_var * (1.0 + quad.max(0.0)) })
    }
}

/// Solves `(PᵀP + λI) β = Pᵀt` by Cholesky and estimates the noise variance as
/// the (population) variance of the residuals, floored at [`NOISE_FLOOR`].
pub fn fit_ridge(obs: &ObservationSet, targets: &[f64], ridge_lambda: f64) -> Result<LinearSurrogate> {
    if obs.is_empty() {
        return Err(SurrogateError::Empty);
    }
    if targets.len() != obs.len() {
        return Err(SurrogateError::DimensionMismatch { expected: obs.len(), actual: targets.len() });
    }
    if !(ridge_lambda > 0.0 && ridge_lambda.is_finite()) {
        return Err(SurrogateError::InvalidRidge(ridge_lambda));
    }
    if let Some(&t) = targets.iter().find(|t| !t.is_finite()) {
        return Err(SurrogateError::NonFiniteTarget(t));
    }
    let n_alg = obs.n_algorithms();
    let mut a = obs.gram();
    for i in 0..n_alg {
        a[(i, i)] += ridge_lambda;
    }
    let mut rhs = DVector::zeros(n_alg);
    for (path, &t) in obs.paths().iter().zip(targets) {
        for &g in path.selected() {
            rhs[g] += t;
        }
    }
    let chol = a.cholesky().ok_or(SurrogateError::NotPositiveDefinite)?;
    let beta = chol.solve(&rhs);
    let inv = chol.inverse();
    let gram_inverse = (&inv + inv.transpose()) * 0.5;

    let residuals: Vec<f64> = obs
        .paths()
        .iter()
        .zip(targets)
        .map(|(p, &t)| t - p.selected().iter().map(|&g| beta[g]).sum::<f64>())
        .collect();
    let n = residuals.len() as f64;
    let mean = residuals.iter().sum::<f64>() / n;
    let var = residuals.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n;

    Ok(LinearSurrogate { beta, ridge_lambda, gram_inverse, noise_var: var.max(NOISE_FLOOR) })
}

/// Ridge fit on `log(1 + τ)`; its predictions are the expected log-cost used by EIPS.
pub fn fit_cost_model(obs: &ObservationSet, ridge_lambda: f64) -> Result<LinearSurrogate> {
    let targets: Vec<f64> = obs.costs().iter().map(|c| c.ln_1p()).collect();
    fit_ridge(obs, &targets, ridge_lambda)
}

pub fn std_normal_pdf(u: f64) -> f64 {
    (-0.5 * u * u).exp() / (2.0 * PI).sqrt()
}

pub fn std_normal_cdf(u: f64) -> f64 {
    0.5 * erfc(-u / SQRT_2)
}

/// Below this standardized improvement the closed form loses precision and the
/// continued-fraction tail is used instead.
const TAIL_SWITCH: f64 = -5.0;

/// `1 - x·R(x)` for the Mills ratio `R(x) = Φ(-x)/φ(x)`, computed without
/// cancellation via Laplace's continued fraction. Valid for `x >= 5`.
fn mills_tail_factor(x: f64) -> f64 {
    let mut t = 0.0;
    for j in (2..=80).rev() {
        t = j as f64 / (x + t);
    }
    let c = 1.0 / (x + t);
    c / (x + c)
}

/// `σ[uΦ(u) + φ(u)]` with `u = (m⁺ − ξ − μ)/σ`. With zero variance this is the
/// deterministic limit `max(m⁺ − ξ − μ, 0)`.
pub fn expected_improvement(pred: &Prediction, best_metric: f64, xi: f64) -> f64 {
    let sigma = pred.std_dev();
    let gap = best_metric - xi - pred.mean;
    if sigma <= 0.0 {
        return gap.max(0.0);
    }
    let u = gap / sigma;
    if u >= TAIL_SWITCH {
        (sigma * (u * std_normal_cdf(u) + std_normal_pdf(u))).max(0.0)
    } else {
        log_expected_improvement(pred, best_metric, xi).exp()
    }
}

/// Natural log of [`expected_improvement`], finite far into the tail where the
/// value itself underflows. `-inf` when EI is exactly zero.
pub fn log_expected_improvement(pred: &Prediction, best_metric: f64, xi: f64) -> f64 {
    let sigma = pred.std_dev();
    let gap = best_metric - xi - pred.mean;
    if sigma <= 0.0 {
        return if gap > 0.0 { gap.ln() } else { f64::NEG_INFINITY };
    }
    let u = gap / sigma;
    if u >= TAIL_SWITCH {
        return expected_improvement(pred, best_metric, xi).ln();
    }
    let x = -u;
    let log_pdf = -0.5 * x * x - 0.5 * (2.0 * PI).ln();
    sigma.ln() + log_pdf + mills_tail_factor(x).ln()
}

fn cost_denominator(cost_model: &LinearSurrogate, path: &PipelinePath) -> Result<f64> {
    Ok(cost_model.predict(path)?.mean.max(COST_FLOOR))
}

/// Expected improvement divided by the predicted log-cost (floored at [`COST_FLOOR`]).
pub fn eips(
    path: &PipelinePath,
    metric_model: &LinearSurrogate,
    cost_model: &LinearSurrogate,
    best_metric: f64,
    xi: f64,
) -> Result<f64> {
    let pred = metric_model.predict(path)?;
    Ok(expected_improvement(&pred, best_metric, xi) / cost_denominator(cost_model, path)?)
}

/// `ln EIPS`; same argmax as [`eips`] but usable when EI underflows.
pub fn log_eips(
    path: &PipelinePath,
    metric_model: &LinearSurrogate,
    cost_model: &LinearSurrogate,
    best_metric: f64,
    xi: f64,
) -> Result<f64> {
    let pred = metric_model.predict(path)?;
    Ok(log_expected_improvement(&pred, best_metric, xi) - cost_denominator(cost_model, path)?.ln())
}

/// Acquisition inputs shared by [`select_next_path`] and [`rank_paths`].
#[derive(Debug, Clone, Copy)]
pub struct Acquisition<'a> {
    pub metric_model: &'a LinearSurrogate,
    pub cost_model: &'a LinearSurrogate,
    pub best_metric: f64,
    pub xi: f64,
}

impl Acquisition<'_> {
    pub fn score(&self, path: &PipelinePath) -> Result<f64> {
        log_eips(path, self.metric_model, self.cost_model, self.best_metric, self.xi)
    }
}

/// Argmax of EIPS over all paths (when at most `candidate_budget`) or over
/// `candidate_budget` distinct seeded-random paths. Ties go to the
/// lexicographically smaller path.
pub fn select_next_path<R: Rng + ?Sized>(
    spec: &PipelineSpec,
    acq: &Acquisition<'_>,
    candidate_budget: usize,
    rng: &mut R,
) -> Result<PipelinePath> {
    let mut ranked = rank_paths(spec, acq, candidate_budget, 1, rng)?;
    Ok(ranked.remove(0))
}

/// The `top` distinct paths with largest EIPS, best first, ties broken by
/// path order.
pub fn rank_paths<R: Rng + ?Sized>(
    spec: &PipelineSpec,
    acq: &Acquisition<'_>,
    candidate_budget: usize,
    top: usize,
    rng: &mut R,
) -> Result<Vec<PipelinePath>> {
    let candidates = candidate_paths(spec, candidate_budget, rng);
    let mut scored = candidates
        .into_iter()
        .map(|p| acq.score(&p).map(|s| (s, p)))
        .collect::<Result<Vec<_>>>()?;
    scored.sort_by(|(sa, pa), (sb, pb)| sb.total_cmp(sa).then_with(|| pa.cmp(pb)));
    Ok(scored.into_iter().take(top.max(1)).map(|(_, p)| p).collect())
}

/// Every path when the spec has at most `budget` of them, otherwise `budget`
/// distinct seeded-random paths. Returned in path order.
pub fn candidate_paths<R: Rng + ?Sized>(spec: &PipelineSpec, budget: usize, rng: &mut R) -> Vec<PipelinePath> {
    let budget = budget.max(1);
    if spec.path_count() <= budget as u128 {
        if let Ok(all) = spec.enumerate_paths(budget) {
            return all;
        }
    }
    let mut seen = std::collections::BTreeSet::new();
    let max_draws = budget.saturating_mul(64);
    let mut draws = 0;
    while seen.len() < budget && draws < max_draws {
        seen.insert(spec.sample_random_path(rng));
        draws += 1;
    }
    seen.into_iter().collect()
}
