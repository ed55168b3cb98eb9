//! Greedy D-optimal selection of initialization paths.
//!
//! The criterion for `ℓ` selections is the log of the product of the top
//! `min(ℓ, N)` eigenvalues of the Gram matrix `H = Σ pᵢpᵢᵀ`.

use nalgebra::DMatrix;
use rand::Rng;
use thiserror::Error;

use crate::graph::{PipelinePath, PipelineSpec};
use crate::surrogate::candidate_paths;

/// Added to every eigenvalue before taking logs.
pub const EIG_FLOOR: f64 = 1e-12;
/// Eigenvalues below this fraction of the largest are numerical zeros.
const EIG_ZERO_REL: f64 = 1e-10;
/// Criteria closer than this are treated as ties.
const TIE_TOL: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DesignError {
    #[error("gram matrix is not square and symmetric")]
    NonSymmetricInput,
    #[error("no candidate paths")]
    NoCandidates,
    #[error("n_init must be at least 1")]
    ZeroDesignSize,
}

pub type Result<T, E = DesignError> = std::result::Result<T, E>;

/// `Σ log(λᵢ + ε)` over the top `min(ell, N)` eigenvalues of `gram`.
pub fn d_criterion(gram: &DMatrix<f64>, ell: usize) -> Result<f64> {
    check_symmetric(gram)?;
    let mut eig: Vec<f64> = gram.clone().symmetric_eigenvalues().iter().copied().collect();
    eig.sort_by(|a, b| b.total_cmp(a));
    let scale = eig.first().copied().unwrap_or(0.0).max(1.0);
    Ok(eig
        .iter()
        .take(ell.min(gram.nrows()))
        .map(|&l| {
            let l = if l <= EIG_ZERO_REL * scale { 0.0 } else { l };
            (l + EIG_FLOOR).ln()
        })
        .sum())
}

fn check_symmetric(m: &DMatrix<f64>) -> Result<()> {
    if m.nrows() != m.ncols() {
        return Err(DesignError::NonSymmetricInput);
    }
    let scale = m.iter().fold(1.0f64, |acc, v| acc.max(v.abs()));
    for i in 0..m.nrows() {
        for j in 0..i {
            if (m[(i, j)] - m[(j, i)]).abs() > 1e-9 * scale || !m[(i, j)].is_finite() {
                return Err(DesignError::NonSymmetricInput);
            }
        }
    }
    Ok(())
}

/// Default candidate count `B = max(2N, cap)`.
pub fn default_candidate_count(spec: &PipelineSpec, cap: usize) -> usize {
    (2 * spec.n_algorithms()).max(cap)
}

/// All paths if there are at most `b`, otherwise `b` distinct seeded-random paths.
pub fn generate_candidates<R: Rng + ?Sized>(spec: &PipelineSpec, b: usize, rng: &mut R) -> Vec<PipelinePath> {
    candidate_paths(spec, b, rng)
}

/// Gram matrix of a design together with the paths that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct DesignState {
    gram: DMatrix<f64>,
    selected: Vec<PipelinePath>,
}

impl DesignState {
    pub fn new(n_algorithms: usize) -> Self {
        Self { gram: DMatrix::zeros(n_algorithms, n_algorithms), selected: Vec::new() }
    }

    pub fn gram(&self) -> &DMatrix<f64> {
        &self.gram
    }

    pub fn selected(&self) -> &[PipelinePath] {
        &self.selected
    }

    /// ℓ.
    pub fn step_count(&self) -> usize {
        self.selected.len()
    }

    pub fn add(&mut self, path: PipelinePath) {
        add_outer(&mut self.gram, &path);
        self.selected.push(path);
    }

    pub fn criterion(&self) -> f64 {
        d_criterion(&self.gram, self.step_count()).unwrap_or(f64::NEG_INFINITY)
    }
}

fn add_outer(gram: &mut DMatrix<f64>, path: &PipelinePath) {
    for &a in path.selected() {
        for &b in path.selected() {
            gram[(a, b)] += 1.0;
        }
    }
}

fn argmax_update(candidates: &[PipelinePath], gram: &DMatrix<f64>, ell: usize) -> Result<usize> {
    check_symmetric(gram)?;
    let mut best: Option<(usize, f64)> = None;
    let mut trial = gram.clone();
    for (j, cand) in candidates.iter().enumerate() {
        trial.copy_from(gram);
        add_outer(&mut trial, cand);
        let c = d_criterion(&trial, ell)?;
        let take = match best {
            None => true,
            Some((bj, bc)) => {
                let tol = TIE_TOL * bc.abs().max(1.0);
                c > bc + tol || ((c - bc).abs() <= tol && cand < &candidates[bj])
            }
        };
        if take {
            best = Some((j, c));
        }
    }
    best.map(|(j, _)| j).ok_or(DesignError::NoCandidates)
}

/// One greedy step: the candidate maximizing the criterion of `gram + ppᵀ`.
/// ℓ is inferred from the gram trace (each path contributes K to it).
pub fn greedy_online_next(candidates: &[PipelinePath], gram: &DMatrix<f64>) -> Result<PipelinePath> {
    let first = candidates.first().ok_or(DesignError::NoCandidates)?;
    let k = first.selected().len().max(1) as f64;
    let ell = (gram.trace() / k).round() as usize + 1;
    let j = argmax_update(candidates, gram, ell)?;
    Ok(candidates[j].clone())
}

/// Batch design of `n_init` paths; the first pick is a seeded-random candidate.
pub fn greedy_batch_design<R: Rng + ?Sized>(
    candidates: &[PipelinePath],
    n_init: usize,
    rng: &mut R,
) -> Result<Vec<PipelinePath>> {
    if candidates.is_empty() {
        return Err(DesignError::NoCandidates);
    }
    let first = rng.random_range(0..candidates.len());
    greedy_batch_design_from(candidates, first, n_init)
}

/// Batch design starting from `candidates[first]`.
pub fn greedy_batch_design_from(candidates: &[PipelinePath], first: usize, n_init: usize) -> Result<Vec<PipelinePath>> {
    if n_init == 0 {
        return Err(DesignError::ZeroDesignSize);
    }
    let start = candidates.get(first).ok_or(DesignError::NoCandidates)?;
    let mut state = DesignState::new(start.n_algorithms());
    state.add(start.clone());
    for ell in 2..=n_init {
        let j = argmax_update(candidates, state.gram(), ell)?;
        state.add(candidates[j].clone());
    }
    Ok(state.selected)
}
