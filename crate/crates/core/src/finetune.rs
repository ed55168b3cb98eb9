//! Density-ratio tuner over paths and hyperparameters.
//!
//! The history is split at the γ-quantile of the metric into a good and a bad
//! set. Each set gets add-1 smoothed categoricals per step and per categorical
//! hyperparameter, and a truncated Gaussian KDE per numeric hyperparameter,
//! mixed 3:1 with a uniform over the bounds. Candidates are drawn from the
//! good model and scored by `Σ log ℓ(x) − log g(x)` over active dimensions.
//!
//! Both partitions are kept as integer sufficient statistics (numeric values
//! are binned on a fixed grid), so adding a record costs `O(log n)` plus the
//! touched dimensions, and an updated model is identical to a rebuilt one.

use std::collections::BTreeSet;

use rand::Rng;
use statrs::distribution::{ContinuousCDF, Normal};
use thiserror::Error;

use crate::graph::{Domain, HpValue, HyperparamAssignment, PipelinePath, PipelineSpec, Scale};
use crate::surrogate::{std_normal_cdf, std_normal_pdf};

pub const DEFAULT_GAMMA: f64 = 0.25;
pub const DEFAULT_CANDIDATES: usize = 24;
/// Weight of the kernel part of each numeric density; the rest is uniform.
pub const KERNEL_WEIGHT: f64 = 0.75;
/// Bandwidth floor as a fraction of the (transformed) range.
pub const MIN_BANDWIDTH_FRACTION: f64 = 0.01;
/// Grid points per numeric dimension; observed values snap to the nearest.
pub const GRID_POINTS: usize = 128;
/// Kernels are cut off this many bandwidths from their center.
const KERNEL_REACH: f64 = 6.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FinetuneError {
    #[error("history is empty")]
    EmptyHistory,
    #[error("gamma must lie in (0, 1)")]
    InvalidGamma,
    #[error("record does not belong to the spec: {0}")]
    ForeignRecord(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct HistoryRecord {
    pub path: PipelinePath,
    pub hyperparams: HyperparamAssignment,
    pub metric: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct HistorySet {
    records: Vec<HistoryRecord>,
}

fn check_record(spec: &PipelineSpec, record: &HistoryRecord) -> Result<(), FinetuneError> {
    spec.validate_path(&record.path).map_err(|e| FinetuneError::ForeignRecord(e.to_string()))?;
    spec.validate_assignment(&record.path, &record.hyperparams)
        .map_err(|e| FinetuneError::ForeignRecord(e.to_string()))?;
    if !record.metric.is_finite() {
        return Err(FinetuneError::ForeignRecord(format!("metric {}", record.metric)));
    }
    Ok(())
}

impl HistorySet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Rejects records whose path or hyperparameters do not fit `spec`.
    pub fn push_checked(&mut self, spec: &PipelineSpec, record: HistoryRecord) -> Result<(), FinetuneError> {
        check_record(spec, &record)?;
        self.records.push(record);
        Ok(())
    }

    pub fn records(&self) -> &[HistoryRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn best(&self) -> Option<&HistoryRecord> {
        self.records.iter().min_by(|a, b| a.metric.total_cmp(&b.metric))
    }
}

/// `max(1, ⌈γ·n⌉)`.
pub fn good_set_size(n: usize, gamma: f64) -> usize {
    ((gamma * n as f64).ceil() as usize).clamp(1, n.max(1))
}

/// Bounds of a numeric domain in the space the KDE works in.
fn transformed_bounds(domain: &Domain) -> Option<(f64, f64)> {
    match *domain {
        Domain::Continuous { lo, hi, scale: Scale::Linear } => Some((lo, hi)),
        Domain::Continuous { lo, hi, scale: Scale::Log } => Some((lo.log10(), hi.log10())),
        Domain::Integer { lo, hi, scale: Scale::Linear } => Some((lo as f64 - 0.5, hi as f64 + 0.5)),
        Domain::Integer { lo, hi, scale: Scale::Log } => {
            Some(((lo as f64 - 0.5).max(0.5).log10(), (hi as f64 + 0.5).log10()))
        }
        Domain::Categorical { .. } => None,
    }
}

fn to_transformed(domain: &Domain, v: &HpValue) -> Option<f64> {
    match (domain, v) {
        (Domain::Continuous { scale: Scale::Linear, .. }, HpValue::Float(x)) => Some(*x),
        (Domain::Continuous { scale: Scale::Log, .. }, HpValue::Float(x)) => Some(x.log10()),
        (Domain::Integer { scale: Scale::Linear, .. }, HpValue::Int(x)) => Some(*x as f64),
        (Domain::Integer { scale: Scale::Log, .. }, HpValue::Int(x)) => Some((*x as f64).max(0.5).log10()),
        _ => None,
    }
}

fn from_transformed(domain: &Domain, u: f64) -> HpValue {
    match *domain {
        Domain::Continuous { lo, hi, scale } => {
            let v = if scale == Scale::Log { 10f64.powf(u) } else { u };
            HpValue::Float(v.clamp(lo, hi))
        }
        Domain::Integer { lo, hi, scale } => {
            let v = if scale == Scale::Log { 10f64.powf(u) } else { u };
            HpValue::Int((v.round() as i64).clamp(lo, hi))
        }
        Domain::Categorical { .. } => unreachable!("categoricals are not transformed"),
    }
}

/// Gaussian KDE over grid-binned values on `[lo, hi]`, mixed with a uniform.
/// Each kernel is truncated to the bounds and to ±6 bandwidths, then
/// renormalized, so the density integrates to one.
#[derive(Debug, Clone, PartialEq)]
pub struct BinnedKde {
    lo: f64,
    hi: f64,
    counts: Vec<u32>,
    n: u32,
    bandwidth: f64,
    /// `count / (n · mass · h)` per grid point.
    weights: Vec<f64>,
}

impl BinnedKde {
    pub fn new(lo: f64, hi: f64) -> Self {
        let mut kde = Self { lo, hi, counts: vec![0; GRID_POINTS], n: 0, bandwidth: 0.0, weights: vec![0.0; GRID_POINTS] };
        kde.refresh();
        kde
    }

    pub fn from_values(lo: f64, hi: f64, values: &[f64]) -> Self {
        let mut kde = Self::new(lo, hi);
        for &v in values {
            kde.adjust(v, 1);
        }
        kde.refresh();
        kde
    }

    fn step(&self) -> f64 {
        (self.hi - self.lo) / (GRID_POINTS - 1) as f64
    }

    fn grid(&self, b: usize) -> f64 {
        self.lo + b as f64 * self.step()
    }

    fn bin(&self, u: f64) -> usize {
        if self.hi <= self.lo {
            return 0;
        }
        (((u - self.lo) / self.step()).round().max(0.0) as usize).min(GRID_POINTS - 1)
    }

    fn adjust(&mut self, u: f64, delta: i32) {
        let b = self.bin(u);
        self.counts[b] = self.counts[b].checked_add_signed(delta).expect("bin count stays nonnegative");
        self.n = self.n.checked_add_signed(delta).expect("total stays nonnegative");
    }

    /// Recomputes the bandwidth (Silverman, floored) and kernel weights.
    fn refresh(&mut self) {
        let range = self.hi - self.lo;
        let n = self.n as f64;
        let sd = if self.n > 1 {
            let mean = (0..GRID_POINTS).map(|b| self.counts[b] as f64 * self.grid(b)).sum::<f64>() / n;
            let ss = (0..GRID_POINTS).map(|b| self.counts[b] as f64 * (self.grid(b) - mean).powi(2)).sum::<f64>();
            (ss / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        let h = (1.06 * sd * n.max(1.0).powf(-0.2)).max(MIN_BANDWIDTH_FRACTION * range).max(f64::MIN_POSITIVE);
        self.bandwidth = h;
        let core = std_normal_cdf(KERNEL_REACH) - std_normal_cdf(-KERNEL_REACH);
        for b in 0..GRID_POINTS {
            let c = self.counts[b];
            self.weights[b] = if c == 0 {
                0.0
            } else {
                let g = self.grid(b);
                let (za, zb) = ((self.lo - g) / h, (self.hi - g) / h);
                let mass = if za <= -KERNEL_REACH && zb >= KERNEL_REACH {
                    core
                } else {
                    std_normal_cdf(zb.min(KERNEL_REACH)) - std_normal_cdf(za.max(-KERNEL_REACH))
                };
                c as f64 / (n * mass.max(f64::MIN_POSITIVE) * h)
            };
        }
    }

    pub fn bandwidth(&self) -> f64 {
        self.bandwidth
    }

    pub fn bounds(&self) -> (f64, f64) {
        (self.lo, self.hi)
    }

    pub fn len(&self) -> usize {
        self.n as usize
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn density(&self, u: f64) -> f64 {
        let range = self.hi - self.lo;
        if range <= 0.0 {
            return 1.0;
        }
        if !(self.lo..=self.hi).contains(&u) {
            return 0.0;
        }
        let uniform = 1.0 / range;
        if self.n == 0 {
            return uniform;
        }
        let h = self.bandwidth;
        let reach = KERNEL_REACH * h;
        let first = ((u - reach - self.lo) / self.step()).ceil().max(0.0) as usize;
        let last = (((u + reach - self.lo) / self.step()).floor().max(0.0) as usize).min(GRID_POINTS - 1);
        let mut kernels = 0.0;
        for b in first..=last {
            let w = self.weights[b];
            if w > 0.0 {
                let z = (u - self.grid(b)) / h;
                if z.abs() <= KERNEL_REACH {
                    kernels += w * std_normal_pdf(z);
                }
            }
        }
        KERNEL_WEIGHT * kernels + (1.0 - KERNEL_WEIGHT) * uniform
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        if self.hi <= self.lo {
            return self.lo;
        }
        if self.n == 0 || rng.random::<f64>() >= KERNEL_WEIGHT {
            return rng.random_range(self.lo..=self.hi);
        }
        let mut pick = rng.random_range(0..self.n);
        let mut b = 0;
        while pick >= self.counts[b] {
            pick -= self.counts[b];
            b += 1;
        }
        let c = self.grid(b);
        let h = self.bandwidth;
        let std = Normal::standard();
        let a = std.cdf(((self.lo - c) / h).max(-KERNEL_REACH));
        let z = std.cdf(((self.hi - c) / h).min(KERNEL_REACH));
        let p = a + rng.random::<f64>() * (z - a);
        let x = std.inverse_cdf(p.clamp(1e-300, 1.0 - 1e-16));
        (c + h * x).clamp(self.lo, self.hi)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum DimStats {
    Numeric(BinnedKde),
    /// Observation counts per declared choice.
    Categorical(Vec<u32>),
}

impl DimStats {
    /// Add-1 smoothed probabilities (categorical dimensions only).
    pub fn probabilities(&self) -> Option<Vec<f64>> {
        match self {
            DimStats::Categorical(c) => Some(smoothed(c)),
            DimStats::Numeric(_) => None,
        }
    }
}

fn smoothed(counts: &[u32]) -> Vec<f64> {
    let total = counts.iter().map(|&c| c as u64).sum::<u64>() + counts.len() as u64;
    counts.iter().map(|&c| (c as u64 + 1) as f64 / total as f64).collect()
}

fn smoothed_at(counts: &[u32], i: usize, total: u32) -> f64 {
    (counts[i] as f64 + 1.0) / (total as f64 + counts.len() as f64)
}

fn sample_counts<R: Rng + ?Sized>(weights: &[f64], rng: &mut R) -> usize {
    let total: f64 = weights.iter().sum();
    let mut x = rng.random::<f64>() * total;
    for (i, &w) in weights.iter().enumerate() {
        if x < w {
            return i;
        }
        x -= w;
    }
    weights.len() - 1
}

/// Sufficient statistics of one partition.
#[derive(Debug, Clone, PartialEq)]
pub struct PartitionModel {
    n: u32,
    step_counts: Vec<Vec<u32>>,
    /// Records containing each algorithm (global index).
    alg_counts: Vec<u32>,
    dims: Vec<DimStats>,
}

impl PartitionModel {
    fn empty(spec: &PipelineSpec) -> Self {
        let mut dims = Vec::new();
        for g in 0..spec.n_algorithms() {
            for hp in &spec.algorithm(g).hyperparams {
                dims.push(match &hp.domain {
                    Domain::Categorical { choices } => DimStats::Categorical(vec![0; choices.len()]),
                    d => {
                        let (lo, hi) = transformed_bounds(d).expect("numeric domain");
                        DimStats::Numeric(BinnedKde::new(lo, hi))
                    }
                });
            }
        }
        Self {
            n: 0,
            step_counts: (0..spec.n_steps()).map(|k| vec![0; spec.step_len(k)]).collect(),
            alg_counts: vec![0; spec.n_algorithms()],
            dims,
        }
    }

    pub fn len(&self) -> usize {
        self.n as usize
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    /// Smoothed probabilities of the algorithms of step `k` (0-based).
    pub fn step_probabilities(&self, k: usize) -> Vec<f64> {
        smoothed(&self.step_counts[k])
    }

    pub fn dims(&self) -> &[DimStats] {
        &self.dims
    }

    /// Adds (`delta = 1`) or removes (`-1`) a record; numeric dimensions that
    /// changed are pushed to `touched`.
    fn adjust(&mut self, spec: &PipelineSpec, offsets: &[usize], rec: &HistoryRecord, delta: i32, touched: &mut Vec<usize>) {
        self.n = self.n.checked_add_signed(delta).expect("partition size stays nonnegative");
        for (k, &g) in rec.path.selected().iter().enumerate() {
            let c = &mut self.step_counts[k][g - spec.step_offset(k)];
            *c = c.checked_add_signed(delta).expect("count stays nonnegative");
            self.alg_counts[g] = self.alg_counts[g].checked_add_signed(delta).expect("count stays nonnegative");
            let alg = spec.algorithm(g);
            for (j, hp) in alg.hyperparams.iter().enumerate() {
                let Some(v) = rec.hyperparams.get(&alg.id, &hp.name) else { continue };
                let d = offsets[g] + j;
                match (&mut self.dims[d], v) {
                    (DimStats::Categorical(counts), HpValue::Choice(i)) => {
                        counts[*i] = counts[*i].checked_add_signed(delta).expect("count stays nonnegative");
                    }
                    (DimStats::Numeric(kde), v) => {
                        if let Some(u) = to_transformed(&hp.domain, v) {
                            kde.adjust(u, delta);
                            touched.push(d);
                        }
                    }
                    _ => {}
                }
            }
        }
    }

    fn refresh(&mut self, touched: &[usize]) {
        for &d in touched {
            if let DimStats::Numeric(kde) = &mut self.dims[d] {
                kde.refresh();
            }
        }
    }

    fn sample<R: Rng + ?Sized>(&self, spec: &PipelineSpec, offsets: &[usize], rng: &mut R) -> (PipelinePath, HyperparamAssignment) {
        let mut ids: Vec<&str> = Vec::with_capacity(spec.n_steps());
        let mut g = sample_counts(&self.step_probabilities(0), rng);
        ids.push(&spec.algorithm(g).id);
        for k in 1..spec.n_steps() {
            let off = spec.step_offset(k);
            let succ = spec.successors(g);
            let weights: Vec<f64> = succ.iter().map(|&s| self.step_counts[k][s - off] as f64 + 1.0).collect();
            g = succ[sample_counts(&weights, rng)];
            ids.push(&spec.algorithm(g).id);
        }
        let path = spec.encode_path(&ids).expect("sampled along spec edges");
        let mut hp = HyperparamAssignment::default();
        for &g in path.selected() {
            let alg = spec.algorithm(g);
            hp.values.entry(alg.id.clone()).or_default();
            for (j, h) in alg.hyperparams.iter().enumerate() {
                let v = match &self.dims[offsets[g] + j] {
                    DimStats::Categorical(counts) => {
                        let w: Vec<f64> = counts.iter().map(|&c| c as f64 + 1.0).collect();
                        HpValue::Choice(sample_counts(&w, rng))
                    }
                    DimStats::Numeric(kde) => from_transformed(&h.domain, kde.sample(rng)),
                };
                hp.set(&alg.id, &h.name, v);
            }
        }
        (path, hp)
    }

    fn log_density(&self, spec: &PipelineSpec, offsets: &[usize], path: &PipelinePath, hp: &HyperparamAssignment) -> f64 {
        let mut total = 0.0;
        for (k, &g) in path.selected().iter().enumerate() {
            total += smoothed_at(&self.step_counts[k], g - spec.step_offset(k), self.n).ln();
            let alg = spec.algorithm(g);
            for (j, h) in alg.hyperparams.iter().enumerate() {
                let Some(v) = hp.get(&alg.id, &h.name) else { continue };
                total += match (&self.dims[offsets[g] + j], v) {
                    (DimStats::Categorical(counts), HpValue::Choice(i)) if *i < counts.len() => {
                        smoothed_at(counts, *i, self.alg_counts[g]).ln()
                    }
                    (DimStats::Numeric(kde), v) => {
                        to_transformed(&h.domain, v).map_or(f64::NEG_INFINITY, |u| kde.density(u).ln())
                    }
                    _ => f64::NEG_INFINITY,
                };
            }
        }
        total
    }
}

/// Orders by metric, then by arrival, so ties keep insertion order.
type SortKey = (u64, usize);

fn sort_key(metric: f64, arrival: usize) -> SortKey {
    let bits = metric.to_bits();
    let ordered = if bits >> 63 == 1 { !bits } else { bits | (1 << 63) };
    (ordered, arrival)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DensityModel {
    gamma: f64,
    records: Vec<HistoryRecord>,
    good_keys: BTreeSet<SortKey>,
    bad_keys: BTreeSet<SortKey>,
    /// First dimension index of each algorithm's hyperparameters.
    offsets: Vec<usize>,
    good: PartitionModel,
    bad: PartitionModel,
}

pub fn build_model(spec: &PipelineSpec, history: &HistorySet, gamma: f64) -> Result<DensityModel, FinetuneError> {
    if !(gamma > 0.0 && gamma < 1.0) {
        return Err(FinetuneError::InvalidGamma);
    }
    if history.is_empty() {
        return Err(FinetuneError::EmptyHistory);
    }
    let mut offsets = Vec::with_capacity(spec.n_algorithms());
    let mut next = 0;
    for g in 0..spec.n_algorithms() {
        offsets.push(next);
        next += spec.algorithm(g).hyperparams.len();
    }
    let mut model = DensityModel {
        gamma,
        records: Vec::with_capacity(history.len()),
        good_keys: BTreeSet::new(),
        bad_keys: BTreeSet::new(),
        offsets,
        good: PartitionModel::empty(spec),
        bad: PartitionModel::empty(spec),
    };
    for r in history.records() {
        model.insert_unchecked(spec, r.clone());
    }
    Ok(model)
}

impl DensityModel {
    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn good_count(&self) -> usize {
        self.good_keys.len()
    }

    /// Good records, best first.
    pub fn good_set(&self) -> Vec<&HistoryRecord> {
        self.good_keys.iter().map(|&(_, i)| &self.records[i]).collect()
    }

    pub fn bad_set(&self) -> Vec<&HistoryRecord> {
        self.bad_keys.iter().map(|&(_, i)| &self.records[i]).collect()
    }

    pub fn good(&self) -> &PartitionModel {
        &self.good
    }

    pub fn bad(&self) -> &PartitionModel {
        &self.bad
    }

    fn shift(&mut self, spec: &PipelineSpec, key: SortKey, to_good: bool, touched: &mut Vec<usize>) {
        let rec = &self.records[key.1];
        let (from, to) = if to_good { (&mut self.bad, &mut self.good) } else { (&mut self.good, &mut self.bad) };
        from.adjust(spec, &self.offsets, rec, -1, touched);
        to.adjust(spec, &self.offsets, rec, 1, touched);
        if to_good {
            self.bad_keys.remove(&key);
            self.good_keys.insert(key);
        } else {
            self.good_keys.remove(&key);
            self.bad_keys.insert(key);
        }
    }

    fn insert_unchecked(&mut self, spec: &PipelineSpec, record: HistoryRecord) {
        let key = sort_key(record.metric, self.records.len());
        self.records.push(record);
        let target = good_set_size(self.records.len(), self.gamma);
        let mut touched = Vec::new();
        let into_good = self.good_keys.last().is_none_or(|last| key < *last);
        let rec = &self.records[key.1];
        if into_good {
            self.good.adjust(spec, &self.offsets, rec, 1, &mut touched);
            self.good_keys.insert(key);
        } else {
            self.bad.adjust(spec, &self.offsets, rec, 1, &mut touched);
            self.bad_keys.insert(key);
        }
        while self.good_keys.len() > target {
            let k = *self.good_keys.last().expect("nonempty");
            self.shift(spec, k, false, &mut touched);
        }
        while self.good_keys.len() < target {
            let k = *self.bad_keys.first().expect("records exist beyond the good set");
            self.shift(spec, k, true, &mut touched);
        }
        touched.sort_unstable();
        touched.dedup();
        self.good.refresh(&touched);
        self.bad.refresh(&touched);
    }

    /// Adds a record in place.
    pub fn insert(&mut self, spec: &PipelineSpec, record: HistoryRecord) -> Result<(), FinetuneError> {
        check_record(spec, &record)?;
        self.insert_unchecked(spec, record);
        Ok(())
    }

    /// The model of the history extended by `record`.
    pub fn update(&self, spec: &PipelineSpec, record: HistoryRecord) -> Result<DensityModel, FinetuneError> {
        let mut next = self.clone();
        next.insert(spec, record)?;
        Ok(next)
    }

    /// `log ℓ(x) − log g(x)` summed over the path's steps and active dimensions.
    pub fn score(&self, spec: &PipelineSpec, path: &PipelinePath, hp: &HyperparamAssignment) -> f64 {
        self.good.log_density(spec, &self.offsets, path, hp) - self.bad.log_density(spec, &self.offsets, path, hp)
    }

    /// Best of `n_candidates` draws from the good model (first wins ties).
    pub fn propose<R: Rng + ?Sized>(
        &self,
        spec: &PipelineSpec,
        n_candidates: usize,
        rng: &mut R,
    ) -> (PipelinePath, HyperparamAssignment) {
        let mut best: Option<(f64, PipelinePath, HyperparamAssignment)> = None;
        for _ in 0..n_candidates.max(1) {
            let (path, hp) = self.good.sample(spec, &self.offsets, rng);
            let s = self.score(spec, &path, &hp);
            if best.as_ref().is_none_or(|(b, _, _)| s > *b) {
                best = Some((s, path, hp));
            }
        }
        let (_, path, hp) = best.expect("at least one candidate");
        (path, hp)
    }
}
