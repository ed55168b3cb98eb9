//! Pipeline DAG: steps, algorithms, hyperparameter domains and the one-hot
//! path encoding used by the linear surrogate.
//!
//! Algorithms are addressed internally by a *global index* in `0..N`, laid out
//! step by step, so that step `k` occupies the block
//! `[offset_k, offset_k + |step_k|)` of the one-hot vector.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

/// Default cap used by callers of [`PipelineSpec::enumerate_paths`].
pub const DEFAULT_PATH_LIMIT: usize = 100_000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GraphError {
    #[error("spec must contain at least one step")]
    NoSteps,
    #[error("step {0} has no algorithms")]
    EmptyStep(usize),
    #[error("step at position {position} declares index {declared}")]
    StepIndex { position: usize, declared: usize },
    #[error("duplicate algorithm id `{0}`")]
    DuplicateAlgorithm(String),
    #[error("algorithm id must be non-empty")]
    EmptyAlgorithmId,
    #[error("unknown algorithm `{0}`")]
    UnknownAlgorithm(String),
    #[error("edge {0} -> {1} does not connect adjacent steps")]
    NonAdjacentEdge(String, String),
    #[error("algorithm `{0}` is not on any input-to-output path")]
    Unreachable(String),
    #[error("invalid hyperparameter `{algorithm}.{name}`: {reason}")]
    Hyperparam {
        algorithm: String,
        name: String,
        reason: String,
    },
    #[error("expected {expected} selections, got {actual}")]
    WrongStepCount { expected: usize, actual: usize },
    #[error("algorithm `{id}` does not belong to step {step}")]
    WrongStep { id: String, step: usize },
    #[error("no edge between `{0}` and `{1}`")]
    EdgeViolation(String, String),
    #[error("malformed path encoding: {0}")]
    MalformedPath(String),
    #[error("{total} paths exceed the enumeration limit")]
    PathCountExceedsLimit { total: u128 },
    #[error("cannot build a subgraph from an empty path set")]
    EmptyPathSet,
    #[error("invalid assignment: {0}")]
    Assignment(String),
    #[error("spec parse error: {0}")]
    Parse(String),
}

pub type Result<T, E = GraphError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Scale {
    #[default]
    Linear,
    Log,
}

/// Domain of a single hyperparameter.
#[derive(Debug, Clone, PartialEq)]
pub enum Domain {
    Continuous { lo: f64, hi: f64, scale: Scale },
    Integer { lo: i64, hi: i64, scale: Scale },
    Categorical { choices: Vec<Value> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct HyperparamSpec {
    pub name: String,
    pub domain: Domain,
    pub default: HpValue,
}

/// A concrete hyperparameter value. Categorical values are stored as an index
/// into the declared choices.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum HpValue {
    Float(f64),
    Int(i64),
    Choice(usize),
}

impl HyperparamSpec {
    pub fn contains(&self, value: &HpValue) -> bool {
        match (&self.domain, value) {
            (Domain::Continuous { lo, hi, .. }, HpValue::Float(v)) => v.is_finite() && *lo <= *v && *v <= *hi,
            (Domain::Integer { lo, hi, .. }, HpValue::Int(v)) => lo <= v && v <= hi,
            (Domain::Categorical { choices }, HpValue::Choice(i)) => *i < choices.len(),
            _ => false,
        }
    }

    /// JSON rendering of a value; non-finite floats never reach here because
    /// values are domain-checked.
    pub fn to_json(&self, value: &HpValue) -> Value {
        match (value, &self.domain) {
            (HpValue::Float(v), _) => {
                // -0.0 and 0.0 must render (and hash) identically.
                let v = if *v == 0.0 { 0.0 } else { *v };
                serde_json::Number::from_f64(v).map(Value::Number).unwrap_or(Value::Null)
            }
            (HpValue::Int(v), _) => Value::from(*v),
            (HpValue::Choice(i), Domain::Categorical { choices }) => {
                choices.get(*i).cloned().unwrap_or(Value::Null)
            }
            (HpValue::Choice(i), _) => Value::from(*i),
        }
    }

    fn value_from_json(&self, value: &Value) -> Option<HpValue> {
        let parsed = match &self.domain {
            Domain::Continuous { .. } => HpValue::Float(value.as_f64()?),
            Domain::Integer { .. } => {
                let v = value.as_i64().or_else(|| {
                    let f = value.as_f64()?;
                    (f.fract() == 0.0 && f.abs() < 9.0e15).then_some(f as i64)
                })?;
                HpValue::Int(v)
            }
            Domain::Categorical { choices } => HpValue::Choice(choices.iter().position(|c| c == value)?),
        };
        self.contains(&parsed).then_some(parsed)
    }

    /// Draws a value uniformly over the domain (log-uniform for log scales).
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> HpValue {
        match &self.domain {
            Domain::Continuous { lo, hi, scale } => {
                let v = match scale {
                    Scale::Linear => rng.random_range(*lo..=*hi),
                    Scale::Log => 10f64.powf(rng.random_range(lo.log10()..=hi.log10())),
                };
                HpValue::Float(v.clamp(*lo, *hi))
            }
            Domain::Integer { lo, hi, scale } => match scale {
                Scale::Linear => HpValue::Int(rng.random_range(*lo..=*hi)),
                Scale::Log => {
                    let lo_l = (*lo as f64 - 0.5).max(0.5).log10();
                    let hi_l = (*hi as f64 + 0.5).log10();
                    let v = 10f64.powf(rng.random_range(lo_l..hi_l)).round() as i64;
                    HpValue::Int(v.clamp(*lo, *hi))
                }
            },
            Domain::Categorical { choices } => HpValue::Choice(rng.random_range(0..choices.len())),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AlgorithmSpec {
    pub id: String,
    /// 1-based step index.
    pub step: usize,
    pub hyperparams: Vec<HyperparamSpec>,
}

impl AlgorithmSpec {
    pub fn hyperparam(&self, name: &str) -> Option<&HyperparamSpec> {
        self.hyperparams.iter().find(|h| h.name == name)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Step {
    /// 1-based.
    pub index: usize,
    pub algorithms: Vec<AlgorithmSpec>,
}

/// The pipeline graph. Construct through [`PipelineSpec::new`] or
/// [`PipelineSpec::from_json_str`]; both validate every structural invariant.
#[derive(Debug, Clone)]
pub struct PipelineSpec {
    name: String,
    steps: Vec<Step>,
    /// Global-index edges, always explicit (a fully connected spec lists them all).
    edges: BTreeSet<(usize, usize)>,
    offsets: Vec<usize>,
    step_of: Vec<usize>,
    ids: HashMap<String, usize>,
    successors: Vec<Vec<usize>>,
}

impl PartialEq for PipelineSpec {
    fn eq(&self, other: &Self) -> bool {
        self.name == other.name && self.steps == other.steps && self.edges == other.edges
    }
}

impl PipelineSpec {
    /// Builds a spec. `edges` of `None` means adjacent steps are fully connected.
    pub fn new(name: impl Into<String>, steps: Vec<Step>, edges: Option<Vec<(String, String)>>) -> Result<Self> {
        if steps.is_empty() {
            return Err(GraphError::NoSteps);
        }
        let mut offsets = Vec::with_capacity(steps.len());
        let mut step_of = Vec::new();
        let mut ids = HashMap::new();
        for (pos, step) in steps.iter().enumerate() {
            if step.index != pos + 1 {
                return Err(GraphError::StepIndex { position: pos + 1, declared: step.index });
            }
            if step.algorithms.is_empty() {
                return Err(GraphError::EmptyStep(step.index));
            }
            offsets.push(step_of.len());
            for alg in &step.algorithms {
                if alg.id.is_empty() {
                    return Err(GraphError::EmptyAlgorithmId);
                }
                if alg.step != step.index {
                    return Err(GraphError::WrongStep { id: alg.id.clone(), step: step.index });
                }
                if ids.insert(alg.id.clone(), step_of.len()).is_some() {
                    return Err(GraphError::DuplicateAlgorithm(alg.id.clone()));
                }
                validate_hyperparams(alg)?;
                step_of.push(pos);
            }
        }

        let n = step_of.len();
        let mut edge_set = BTreeSet::new();
        match edges {
            None => {
                for k in 0..steps.len().saturating_sub(1) {
                    let (a0, a1) = (offsets[k], offsets[k] + steps[k].algorithms.len());
                    let (b0, b1) = (offsets[k + 1], offsets[k + 1] + steps[k + 1].algorithms.len());
                    for a in a0..a1 {
                        for b in b0..b1 {
                            edge_set.insert((a, b));
                        }
                    }
                }
            }
            Some(list) => {
                for (from, to) in list {
                    let a = *ids.get(&from).ok_or_else(|| GraphError::UnknownAlgorithm(from.clone()))?;
                    let b = *ids.get(&to).ok_or_else(|| GraphError::UnknownAlgorithm(to.clone()))?;
                    if step_of[b] != step_of[a] + 1 {
                        return Err(GraphError::NonAdjacentEdge(from, to));
                    }
                    edge_set.insert((a, b));
                }
            }
        }

        let mut successors = vec![Vec::new(); n];
        for &(a, b) in &edge_set {
            successors[a].push(b);
        }

        let spec = Self { name: name.into(), steps, edges: edge_set, offsets, step_of, ids, successors };

        // Reachability from the input (forward) and to the output (backward).
        let last = spec.steps.len() - 1;
        let mut forward = vec![false; n];
        let mut backward = vec![false; n];
        for (f, &k) in forward.iter_mut().zip(&spec.step_of) {
            *f = k == 0;
        }
        for g in 0..n {
            if forward[g] {
                for &s in &spec.successors[g] {
                    forward[s] = true;
                }
            }
        }
        for g in (0..n).rev() {
            backward[g] = spec.step_of[g] == last || spec.successors[g].iter().any(|&s| backward[s]);
        }
        for g in 0..n {
            if !(forward[g] && backward[g]) {
                return Err(GraphError::Unreachable(spec.algorithm(g).id.clone()));
            }
        }
        Ok(spec)
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        let raw: RawSpec = serde_json::from_str(text).map_err(|e| GraphError::Parse(e.to_string()))?;
        raw.into_spec()
    }

    /// Canonical JSON document; edges are always written explicitly.
    pub fn to_json_value(&self) -> Value {
        let steps: Vec<Value> = self
            .steps
            .iter()
            .map(|s| {
                let algs: Vec<Value> = s
                    .algorithms
                    .iter()
                    .map(|a| {
                        let hps: Vec<Value> = a.hyperparams.iter().map(hyperparam_json).collect();
                        serde_json::json!({ "id": a.id, "hyperparams": hps })
                    })
                    .collect();
                serde_json::json!({ "index": s.index, "algorithms": algs })
            })
            .collect();
        let edges: Vec<Value> = self
            .edges
            .iter()
            .map(|&(a, b)| serde_json::json!([self.algorithm(a).id, self.algorithm(b).id]))
            .collect();
        serde_json::json!({ "name": self.name, "steps": steps, "edges": edges })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn steps(&self) -> &[Step] {
        &self.steps
    }

    /// K.
    pub fn n_steps(&self) -> usize {
        self.steps.len()
    }

    /// N.
    pub fn n_algorithms(&self) -> usize {
        self.step_of.len()
    }

    pub fn step_offset(&self, step: usize) -> usize {
        self.offsets[step]
    }

    pub fn step_len(&self, step: usize) -> usize {
        self.steps[step].algorithms.len()
    }

    /// Zero-based step position of a global algorithm index.
    pub fn step_of(&self, global: usize) -> usize {
        self.step_of[global]
    }

    pub fn algorithm(&self, global: usize) -> &AlgorithmSpec {
        let k = self.step_of[global];
        &self.steps[k].algorithms[global - self.offsets[k]]
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.ids.get(id).copied()
    }

    pub fn algorithm_by_id(&self, id: &str) -> Option<&AlgorithmSpec> {
        self.index_of(id).map(|g| self.algorithm(g))
    }

    pub fn successors(&self, global: usize) -> &[usize] {
        &self.successors[global]
    }

    pub fn has_edge(&self, from: usize, to: usize) -> bool {
        self.edges.contains(&(from, to))
    }

    pub fn edges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.edges.iter().copied()
    }

    pub fn is_fully_connected(&self) -> bool {
        let full: usize = (0..self.n_steps().saturating_sub(1)).map(|k| self.step_len(k) * self.step_len(k + 1)).sum();
        full == self.edges.len()
    }

    /// Number of valid input-to-output paths (saturating).
    pub fn path_count(&self) -> u128 {
        let n = self.n_algorithms();
        let mut ways = vec![0u128; n];
        for g in (0..n).rev() {
            ways[g] = if self.step_of[g] == self.n_steps() - 1 {
                1
            } else {
                self.successors[g].iter().fold(0u128, |acc, &s| acc.saturating_add(ways[s]))
            };
        }
        (0..self.step_len(0)).fold(0u128, |acc, g| acc.saturating_add(ways[g]))
    }

    /// All valid paths in lexicographic order of their per-step indices, or
    /// `PathCountExceedsLimit` when there are more than `limit`.
    pub fn enumerate_paths(&self, limit: usize) -> Result<Vec<PipelinePath>> {
        let total = self.path_count();
        if total > limit as u128 {
            return Err(GraphError::PathCountExceedsLimit { total });
        }
        let mut out = Vec::with_capacity(total as usize);
        let mut current = Vec::with_capacity(self.n_steps());
        for g in 0..self.step_len(0) {
            self.walk(g, &mut current, &mut out);
        }
        Ok(out)
    }

    fn walk(&self, g: usize, current: &mut Vec<usize>, out: &mut Vec<PipelinePath>) {
        current.push(g);
        if current.len() == self.n_steps() {
            out.push(PipelinePath { selected: current.clone(), n_algorithms: self.n_algorithms() });
        } else {
            for &s in &self.successors[g] {
                self.walk(s, current, out);
            }
        }
        current.pop();
    }

    /// Encodes one algorithm id per step into a path.
    pub fn encode_path<S: AsRef<str>>(&self, ids: &[S]) -> Result<PipelinePath> {
        if ids.len() != self.n_steps() {
            return Err(GraphError::WrongStepCount { expected: self.n_steps(), actual: ids.len() });
        }
        let mut selected = Vec::with_capacity(ids.len());
        for (k, id) in ids.iter().enumerate() {
            let id = id.as_ref();
            let g = self.index_of(id).ok_or_else(|| GraphError::UnknownAlgorithm(id.to_string()))?;
            if self.step_of[g] != k {
                return Err(GraphError::WrongStep { id: id.to_string(), step: k + 1 });
            }
            if let Some(&prev) = selected.last() {
                if !self.has_edge(prev, g) {
                    return Err(GraphError::EdgeViolation(self.algorithm(prev).id.clone(), id.to_string()));
                }
            }
            selected.push(g);
        }
        Ok(PipelinePath { selected, n_algorithms: self.n_algorithms() })
    }

    /// Builds a path from a raw one-hot vector.
    pub fn path_from_onehot(&self, bits: &[u8]) -> Result<PipelinePath> {
        if bits.len() != self.n_algorithms() {
            return Err(GraphError::MalformedPath(format!("length {} != {}", bits.len(), self.n_algorithms())));
        }
        let mut ids = Vec::with_capacity(self.n_steps());
        for k in 0..self.n_steps() {
            let block = &bits[self.offsets[k]..self.offsets[k] + self.step_len(k)];
            if block.iter().any(|&b| b > 1) || block.iter().filter(|&&b| b == 1).count() != 1 {
                return Err(GraphError::MalformedPath(format!("step {} block is not one-hot", k + 1)));
            }
            let local = block.iter().position(|&b| b == 1).unwrap_or_default();
            ids.push(self.steps[k].algorithms[local].id.as_str());
        }
        self.encode_path(&ids)
    }

    pub fn decode_path(&self, path: &PipelinePath) -> Vec<String> {
        path.selected.iter().map(|&g| self.algorithm(g).id.clone()).collect()
    }

    /// Dash-joined algorithm ids, as written to trace files.
    pub fn path_label(&self, path: &PipelinePath) -> String {
        self.decode_path(path).join("-")
    }

    pub fn validate_path(&self, path: &PipelinePath) -> Result<()> {
        if path.n_algorithms != self.n_algorithms() || path.selected.len() != self.n_steps() {
            return Err(GraphError::MalformedPath("dimension does not match spec".into()));
        }
        for (k, &g) in path.selected.iter().enumerate() {
            if g >= self.n_algorithms() || self.step_of[g] != k {
                return Err(GraphError::MalformedPath(format!("selection {g} is not in step {}", k + 1)));
            }
        }
        for w in path.selected.windows(2) {
            if !self.has_edge(w[0], w[1]) {
                return Err(GraphError::EdgeViolation(self.algorithm(w[0]).id.clone(), self.algorithm(w[1]).id.clone()));
            }
        }
        Ok(())
    }

    /// Re-expresses a path of `other` in this spec's indexing, if it is valid here.
    pub fn translate_path(&self, other: &PipelineSpec, path: &PipelinePath) -> Option<PipelinePath> {
        self.encode_path(&other.decode_path(path)).ok()
    }

    /// Draws a path by a uniform choice at step 1 and then a uniform choice
    /// among the successors of the previous pick. Uniform over all paths when
    /// the spec is fully connected.
    pub fn sample_random_path<R: Rng + ?Sized>(&self, rng: &mut R) -> PipelinePath {
        let mut selected = Vec::with_capacity(self.n_steps());
        let mut g = rng.random_range(0..self.step_len(0));
        selected.push(g);
        for _ in 1..self.n_steps() {
            let succ = &self.successors[g];
            g = succ[rng.random_range(0..succ.len())];
            selected.push(g);
        }
        PipelinePath { selected, n_algorithms: self.n_algorithms() }
    }

    /// Uniform draw of every hyperparameter of every algorithm on `path`.
    pub fn sample_random_hyperparams<R: Rng + ?Sized>(&self, path: &PipelinePath, rng: &mut R) -> HyperparamAssignment {
        let mut out = HyperparamAssignment::default();
        for &g in &path.selected {
            let alg = self.algorithm(g);
            let mut values = BTreeMap::new();
            for hp in &alg.hyperparams {
                values.insert(hp.name.clone(), hp.sample(rng));
            }
            out.values.insert(alg.id.clone(), values);
        }
        out
    }

    /// Default value for every hyperparameter on `path`.
    pub fn default_hyperparams(&self, path: &PipelinePath) -> HyperparamAssignment {
        let mut out = HyperparamAssignment::default();
        for &g in &path.selected {
            let alg = self.algorithm(g);
            let values = alg.hyperparams.iter().map(|h| (h.name.clone(), h.default)).collect();
            out.values.insert(alg.id.clone(), values);
        }
        out
    }

    /// Subgraph holding exactly the algorithms and edges that appear on `paths`.
    /// Algorithm order within each step is preserved.
    pub fn prune_to_subgraph(&self, paths: &[PipelinePath]) -> Result<PipelineSpec> {
        if paths.is_empty() {
            return Err(GraphError::EmptyPathSet);
        }
        let mut keep = HashSet::new();
        let mut edges = BTreeSet::new();
        for p in paths {
            self.validate_path(p)?;
            keep.extend(p.selected.iter().copied());
            for w in p.selected.windows(2) {
                edges.insert((w[0], w[1]));
            }
        }
        let steps = self
            .steps
            .iter()
            .enumerate()
            .map(|(k, s)| Step {
                index: s.index,
                algorithms: s
                    .algorithms
                    .iter()
                    .enumerate()
                    .filter(|(i, _)| keep.contains(&(self.offsets[k] + i)))
                    .map(|(_, a)| a.clone())
                    .collect(),
            })
            .collect();
        let edges = edges
            .into_iter()
            .map(|(a, b)| (self.algorithm(a).id.clone(), self.algorithm(b).id.clone()))
            .collect();
        PipelineSpec::new(self.name.clone(), steps, Some(edges))
    }

    /// Checks that `assignment` covers exactly the algorithms on `path` with
    /// in-domain values.
    pub fn validate_assignment(&self, path: &PipelinePath, assignment: &HyperparamAssignment) -> Result<()> {
        let on_path: BTreeSet<&str> = path.selected.iter().map(|&g| self.algorithm(g).id.as_str()).collect();
        for alg_id in assignment.values.keys() {
            if !on_path.contains(alg_id.as_str()) {
                return Err(GraphError::Assignment(format!("`{alg_id}` is not on the path")));
            }
        }
        for &g in &path.selected {
            let alg = self.algorithm(g);
            let empty = BTreeMap::new();
            let values = assignment.values.get(&alg.id).unwrap_or(&empty);
            if values.len() != alg.hyperparams.len() {
                return Err(GraphError::Assignment(format!("`{}` has {} of {} values", alg.id, values.len(), alg.hyperparams.len())));
            }
            for hp in &alg.hyperparams {
                match values.get(&hp.name) {
                    Some(v) if hp.contains(v) => {}
                    _ => return Err(GraphError::Assignment(format!("`{}.{}` missing or out of domain", alg.id, hp.name))),
                }
            }
        }
        Ok(())
    }
}

fn validate_hyperparams(alg: &AlgorithmSpec) -> Result<()> {
    let mut seen = HashSet::new();
    for hp in &alg.hyperparams {
        let fail = |reason: &str| GraphError::Hyperparam {
            algorithm: alg.id.clone(),
            name: hp.name.clone(),
            reason: reason.to_string(),
        };
        if !seen.insert(hp.name.as_str()) {
            return Err(fail("duplicate name"));
        }
        match &hp.domain {
            Domain::Continuous { lo, hi, scale } => {
                if !(lo.is_finite() && hi.is_finite() && lo < hi) {
                    return Err(fail("bounds must satisfy lo < hi"));
                }
                if *scale == Scale::Log && *lo <= 0.0 {
                    return Err(fail("log scale requires lo > 0"));
                }
            }
            Domain::Integer { lo, hi, scale } => {
                if lo >= hi {
                    return Err(fail("bounds must satisfy lo < hi"));
                }
                if *scale == Scale::Log && *lo <= 0 {
                    return Err(fail("log scale requires lo > 0"));
                }
            }
            Domain::Categorical { choices } => {
                if choices.is_empty() {
                    return Err(fail("categorical needs at least one choice"));
                }
            }
        }
        if !hp.contains(&hp.default) {
            return Err(fail("default outside the domain"));
        }
    }
    Ok(())
}

fn hyperparam_json(hp: &HyperparamSpec) -> Value {
    let mut m = Map::new();
    m.insert("name".into(), Value::from(hp.name.clone()));
    match &hp.domain {
        Domain::Continuous { lo, hi, scale } => {
            m.insert("kind".into(), Value::from("continuous"));
            m.insert("bounds".into(), serde_json::json!([lo, hi]));
            m.insert("scale".into(), serde_json::to_value(scale).unwrap_or(Value::Null));
        }
        Domain::Integer { lo, hi, scale } => {
            m.insert("kind".into(), Value::from("integer"));
            m.insert("bounds".into(), serde_json::json!([lo, hi]));
            m.insert("scale".into(), serde_json::to_value(scale).unwrap_or(Value::Null));
        }
        Domain::Categorical { choices } => {
            m.insert("kind".into(), Value::from("categorical"));
            m.insert("choices".into(), Value::Array(choices.clone()));
        }
    }
    m.insert("default".into(), hp.to_json(&hp.default));
    Value::Object(m)
}

#[derive(Deserialize)]
struct RawSpec {
    name: String,
    steps: Vec<RawStep>,
    #[serde(default)]
    edges: Option<Vec<(String, String)>>,
}

#[derive(Deserialize)]
struct RawStep {
    index: usize,
    algorithms: Vec<RawAlgorithm>,
}

#[derive(Deserialize)]
struct RawAlgorithm {
    id: String,
    #[serde(default)]
    hyperparams: Vec<RawHyperparam>,
}

#[derive(Deserialize)]
#[serde(rename_all = "lowercase")]
enum RawKind {
    Continuous,
    Integer,
    Categorical,
}

#[derive(Deserialize)]
struct RawHyperparam {
    name: String,
    kind: RawKind,
    #[serde(default)]
    bounds: Option<(Value, Value)>,
    #[serde(default)]
    choices: Option<Vec<Value>>,
    #[serde(default)]
    scale: Scale,
    #[serde(default)]
    default: Option<Value>,
}

impl RawSpec {
    fn into_spec(self) -> Result<PipelineSpec> {
        let mut steps = Vec::with_capacity(self.steps.len());
        for s in self.steps {
            let mut algorithms = Vec::with_capacity(s.algorithms.len());
            for a in s.algorithms {
                let hyperparams = a
                    .hyperparams
                    .into_iter()
                    .map(|h| h.into_spec(&a.id))
                    .collect::<Result<Vec<_>>>()?;
                algorithms.push(AlgorithmSpec { id: a.id, step: s.index, hyperparams });
            }
            steps.push(Step { index: s.index, algorithms });
        }
        PipelineSpec::new(self.name, steps, self.edges)
    }
}

impl RawHyperparam {
    fn into_spec(self, algorithm: &str) -> Result<HyperparamSpec> {
        let fail = |reason: &str| GraphError::Hyperparam {
            algorithm: algorithm.to_string(),
            name: self.name.clone(),
            reason: reason.to_string(),
        };
        let domain = match self.kind {
            RawKind::Continuous => {
                let (lo, hi) = self.bounds.as_ref().ok_or_else(|| fail("missing bounds"))?;
                let lo = lo.as_f64().ok_or_else(|| fail("bounds must be numbers"))?;
                let hi = hi.as_f64().ok_or_else(|| fail("bounds must be numbers"))?;
                Domain::Continuous { lo, hi, scale: self.scale }
            }
            RawKind::Integer => {
                let (lo, hi) = self.bounds.as_ref().ok_or_else(|| fail("missing bounds"))?;
                let lo = lo.as_i64().ok_or_else(|| fail("bounds must be integers"))?;
                let hi = hi.as_i64().ok_or_else(|| fail("bounds must be integers"))?;
                Domain::Integer { lo, hi, scale: self.scale }
            }
            RawKind::Categorical => {
                let choices = self.choices.clone().ok_or_else(|| fail("missing choices"))?;
                if choices.iter().any(|c| c.is_array() || c.is_object() || c.is_null()) {
                    return Err(fail("choices must be scalars"));
                }
                Domain::Categorical { choices }
            }
        };
        let mut spec = HyperparamSpec { name: self.name.clone(), domain, default: HpValue::Choice(0) };
        spec.default = match &self.default {
            Some(v) => spec.value_from_json(v).ok_or_else(|| fail("default outside the domain"))?,
            None => match &spec.domain {
                Domain::Continuous { lo, hi, scale: Scale::Linear } => HpValue::Float(0.5 * (lo + hi)),
                Domain::Continuous { lo, hi, scale: Scale::Log } => HpValue::Float((lo * hi).sqrt().clamp(*lo, *hi)),
                Domain::Integer { lo, .. } => HpValue::Int(*lo),
                Domain::Categorical { .. } => HpValue::Choice(0),
            },
        };
        Ok(spec)
    }
}

/// A path through the DAG: one algorithm per step, stored as global indices.
///
/// Ordering is lexicographic over the per-step indices, which is also the
/// order produced by [`PipelineSpec::enumerate_paths`].
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct PipelinePath {
    selected: Vec<usize>,
    n_algorithms: usize,
}

impl PipelinePath {
    /// Global indices of the selected algorithms, one per step.
    pub fn selected(&self) -> &[usize] {
        &self.selected
    }

    pub fn n_algorithms(&self) -> usize {
        self.n_algorithms
    }

    pub fn onehot(&self) -> Vec<u8> {
        let mut bits = vec![0u8; self.n_algorithms];
        for &g in &self.selected {
            bits[g] = 1;
        }
        bits
    }

    pub fn onehot_f64(&self) -> Vec<f64> {
        self.onehot().into_iter().map(f64::from).collect()
    }
}

impl fmt::Display for PipelinePath {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, b) in self.onehot().iter().enumerate() {
            if i > 0 {
                f.write_str(",")?;
            }
            write!(f, "{b}")?;
        }
        Ok(())
    }
}

/// Hyperparameter values keyed by algorithm id, then hyperparameter name.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct HyperparamAssignment {
    pub values: BTreeMap<String, BTreeMap<String, HpValue>>,
}

impl HyperparamAssignment {
    pub fn get(&self, algorithm: &str, name: &str) -> Option<&HpValue> {
        self.values.get(algorithm)?.get(name)
    }

    pub fn set(&mut self, algorithm: &str, name: &str, value: HpValue) {
        self.values.entry(algorithm.to_string()).or_default().insert(name.to_string(), value);
    }

    pub fn is_empty(&self) -> bool {
        self.values.values().all(BTreeMap::is_empty)
    }

    /// `{name: value}` object for one algorithm, keys sorted.
    pub fn step_json(&self, spec: &PipelineSpec, algorithm: &str) -> Map<String, Value> {
        let mut m = Map::new();
        if let (Some(values), Some(alg)) = (self.values.get(algorithm), spec.algorithm_by_id(algorithm)) {
            for (name, v) in values {
                let rendered = alg.hyperparam(name).map(|h| h.to_json(v)).unwrap_or(Value::Null);
                m.insert(name.clone(), rendered);
            }
        }
        m
    }

    /// Canonical nested JSON `{algorithm: {name: value}}`, keys sorted.
    /// Algorithms without hyperparameters are omitted.
    pub fn to_json(&self, spec: &PipelineSpec) -> Value {
        let mut m = Map::new();
        for (alg, values) in &self.values {
            if !values.is_empty() {
                m.insert(alg.clone(), Value::Object(self.step_json(spec, alg)));
            }
        }
        Value::Object(m)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn algs(step: usize, ids: &[&str]) -> Step {
        Step {
            index: step,
            algorithms: ids.iter().map(|id| AlgorithmSpec { id: id.to_string(), step, hyperparams: vec![] }).collect(),
        }
    }

    fn toy() -> PipelineSpec {
        PipelineSpec::new("toy", vec![algs(1, &["a1", "a2"]), algs(2, &["b1", "b2", "b3"])], None).unwrap()
    }

    fn fig2_missing_edge() -> PipelineSpec {
        let mut edges = vec![];
        for a in ["a1", "a2"] {
            for b in ["b1", "b2", "b3"] {
                if !(a == "a1" && b == "b3") {
                    edges.push((a.to_string(), b.to_string()));
                }
            }
        }
        PipelineSpec::new("fig2", vec![algs(1, &["a1", "a2"]), algs(2, &["b1", "b2", "b3"])], Some(edges)).unwrap()
    }

    #[test]
    fn toy_has_six_paths() {
        assert_eq!(toy().enumerate_paths(100).unwrap().len(), 6);
        assert_eq!(toy().path_count(), 6);
    }

    #[test]
    fn missing_edge_leaves_five_paths() {
        let spec = fig2_missing_edge();
        // Exhaustive walk over every (a, b) pair, keeping those with an edge.
        let mut oracle = 0;
        for a in 0..2 {
            for b in 2..5 {
                if spec.has_edge(a, b) {
                    oracle += 1;
                }
            }
        }
        assert_eq!(oracle, 5);
        assert_eq!(spec.enumerate_paths(100).unwrap().len(), 5);
    }

    #[test]
    fn encode_matches_highlighted_example() {
        let p = toy().encode_path(&["a2", "b3"]).unwrap();
        assert_eq!(p.onehot(), vec![0, 1, 0, 0, 1]);
    }

    #[test]
    fn single_algorithm_spec() {
        let spec = PipelineSpec::new("one", vec![algs(1, &["only"])], None).unwrap();
        let p = spec.encode_path(&["only"]).unwrap();
        assert_eq!(p.onehot(), vec![1]);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        assert_eq!(spec.sample_random_path(&mut rng), p);
    }

    #[test]
    fn encode_errors() {
        let spec = fig2_missing_edge();
        assert!(matches!(spec.encode_path(&["zz", "b1"]), Err(GraphError::UnknownAlgorithm(_))));
        assert!(matches!(spec.encode_path(&["a1", "b3"]), Err(GraphError::EdgeViolation(..))));
        assert!(matches!(spec.encode_path(&["b1", "a1"]), Err(GraphError::WrongStep { .. })));
        assert!(matches!(spec.encode_path(&["a1"]), Err(GraphError::WrongStepCount { .. })));
    }

    #[test]
    fn limit_is_enforced() {
        assert_eq!(toy().enumerate_paths(5), Err(GraphError::PathCountExceedsLimit { total: 6 }));
    }

    #[test]
    fn invalid_specs_are_rejected() {
        assert_eq!(PipelineSpec::new("x", vec![], None), Err(GraphError::NoSteps));
        assert!(matches!(
            PipelineSpec::new("x", vec![algs(1, &["a"]), algs(2, &["a"])], None),
            Err(GraphError::DuplicateAlgorithm(_))
        ));
        assert!(matches!(PipelineSpec::new("x", vec![algs(1, &[])], None), Err(GraphError::EmptyStep(1))));
        // same-step edge
        assert!(matches!(
            PipelineSpec::new("x", vec![algs(1, &["a", "b"]), algs(2, &["c"])], Some(vec![("a".into(), "b".into())])),
            Err(GraphError::NonAdjacentEdge(..))
        ));
        // b has no outgoing edge
        assert!(matches!(
            PipelineSpec::new("x", vec![algs(1, &["a", "b"]), algs(2, &["c"])], Some(vec![("a".into(), "c".into())])),
            Err(GraphError::Unreachable(_))
        ));
    }

    #[test]
    fn prune_shared_first_step() {
        let spec = fig2_missing_edge();
        let p1 = spec.encode_path(&["a2", "b1"]).unwrap();
        let p2 = spec.encode_path(&["a2", "b3"]).unwrap();
        let sub = spec.prune_to_subgraph(&[p1.clone(), p2.clone()]).unwrap();
        // set-union oracle over node and edge sets
        let nodes: BTreeSet<String> = [&p1, &p2].iter().flat_map(|p| spec.decode_path(p)).collect();
        assert_eq!(nodes.len(), 3);
        assert_eq!(sub.step_len(0), 1);
        assert_eq!(sub.step_len(1), 2);
        assert_eq!(sub.edges().count(), 2);
        assert!(sub.translate_path(&spec, &p1).is_some());
        assert!(sub.translate_path(&spec, &p2).is_some());
    }

    #[test]
    fn prune_with_all_paths_is_identity() {
        let spec = fig2_missing_edge();
        let all = spec.enumerate_paths(100).unwrap();
        assert_eq!(spec.prune_to_subgraph(&all).unwrap(), spec);
        assert_eq!(spec.prune_to_subgraph(&[]), Err(GraphError::EmptyPathSet));
    }

    #[test]
    fn prune_single_path_is_chain() {
        let spec = toy();
        let p = spec.encode_path(&["a1", "b2"]).unwrap();
        let sub = spec.prune_to_subgraph(&[p]).unwrap();
        assert_eq!(sub.n_algorithms(), 2);
        assert_eq!(sub.path_count(), 1);
    }

    #[test]
    fn zero_hyperparams_gives_empty_assignment() {
        let spec = toy();
        let p = spec.encode_path(&["a1", "b2"]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = spec.sample_random_hyperparams(&p, &mut rng);
        assert!(a.is_empty());
        assert_eq!(a.to_json(&spec), serde_json::json!({}));
        spec.validate_assignment(&p, &a).unwrap();
    }

    #[test]
    fn parse_json_document() {
        let text = r#"{
          "name": "demo",
          "steps": [
            {"index": 1, "algorithms": [
               {"id": "scale", "hyperparams": []},
               {"id": "none1", "hyperparams": []}]},
            {"index": 2, "algorithms": [
               {"id": "svm", "hyperparams": [
                  {"name": "C", "kind": "continuous", "bounds": [0.001, 100], "scale": "log", "default": 1.0},
                  {"name": "kernel", "kind": "categorical", "choices": ["rbf", "linear"], "default": "rbf"},
                  {"name": "degree", "kind": "integer", "bounds": [1, 5], "scale": "linear", "default": 3}]}]}
          ],
          "edges": [["scale", "svm"], ["none1", "svm"]]
        }"#;
        let spec = PipelineSpec::from_json_str(text).unwrap();
        assert_eq!(spec.n_algorithms(), 3);
        assert!(spec.is_fully_connected());
        let svm = spec.algorithm_by_id("svm").unwrap();
        assert_eq!(svm.hyperparam("kernel").unwrap().default, HpValue::Choice(0));
        let again = PipelineSpec::from_json_str(&spec.to_json_value().to_string()).unwrap();
        assert_eq!(again, spec);
    }

    #[test]
    fn parse_rejects_bad_domains() {
        let bad = r#"{"name":"x","steps":[{"index":1,"algorithms":[{"id":"a","hyperparams":[
            {"name":"c","kind":"continuous","bounds":[0,1],"scale":"log"}]}]}]}"#;
        assert!(matches!(PipelineSpec::from_json_str(bad), Err(GraphError::Hyperparam { .. })));
        let bad = r#"{"name":"x","steps":[{"index":1,"algorithms":[{"id":"a","hyperparams":[
            {"name":"c","kind":"continuous","bounds":[2,1]}]}]}]}"#;
        assert!(matches!(PipelineSpec::from_json_str(bad), Err(GraphError::Hyperparam { .. })));
        let bad = r#"{"name":"x","steps":[{"index":1,"algorithms":[{"id":"a","hyperparams":[
            {"name":"c","kind":"categorical","choices":[]}]}]}]}"#;
        assert!(matches!(PipelineSpec::from_json_str(bad), Err(GraphError::Hyperparam { .. })));
        assert!(matches!(PipelineSpec::from_json_str("{"), Err(GraphError::Parse(_))));
    }

    #[test]
    fn negative_zero_renders_as_zero() {
        let hp = HyperparamSpec {
            name: "x".into(),
            domain: Domain::Continuous { lo: -1.0, hi: 1.0, scale: Scale::Linear },
            default: HpValue::Float(0.0),
        };
        assert_eq!(hp.to_json(&HpValue::Float(-0.0)).to_string(), hp.to_json(&HpValue::Float(0.0)).to_string());
    }
}
