//! Step-granular pipeline execution.
//!
//! An [`Executor`] runs one algorithm on one dataset handle at a time. The
//! built-in [`SyntheticBenchmark`] simulates steps with known ground truth; the
//! [`ExternalExecutor`] drives a worker process over newline-delimited JSON.

pub mod external;
pub mod protocol;
pub mod synthetic;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

pub use external::{spawn_external, ExternalExecutor};
pub use synthetic::{make_synthetic, SyntheticBenchmark};

/// Whether reported step seconds are real elapsed time or accounted only.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TimeMode {
    Wall,
    Simulated,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HandleOrigin {
    Input,
    StepOutput,
}

/// Opaque reference to a dataset held by the executor.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetHandle {
    pub id: String,
    pub origin: HandleOrigin,
    pub size_bytes: u64,
}

impl DatasetHandle {
    pub fn input(id: impl Into<String>, size_bytes: u64) -> Self {
        Self { id: id.into(), origin: HandleOrigin::Input, size_bytes }
    }

    pub fn output(id: impl Into<String>, size_bytes: u64) -> Self {
        Self { id: id.into(), origin: HandleOrigin::StepOutput, size_bytes }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct StepRequest<'a> {
    /// 1-based step index.
    pub step: usize,
    pub algorithm: &'a str,
    pub hyperparams: &'a Map<String, Value>,
    pub input: &'a DatasetHandle,
    pub is_last: bool,
}

/// Result of one step. `metric` is present exactly for the last step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepOutput {
    pub handle: DatasetHandle,
    pub seconds: f64,
    pub metric: Option<f64>,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ExecutorError {
    /// The step exceeded its time allowance; `seconds` is what it consumed.
    #[error("step timed out after {seconds} s")]
    StepTimeout { seconds: f64 },
    /// The worker rejected or failed this step but remains usable.
    #[error("step failed: {0}")]
    StepFailed(String),
    #[error("handshake failed: {0}")]
    HandshakeFailure(String),
    #[error("protocol violation: {0}")]
    ProtocolViolation(String),
    #[error("worker exited: {0}")]
    WorkerExited(String),
    #[error("executor failure: {0}")]
    Failure(String),
}

impl ExecutorError {
    /// Failures that only sink the current run; everything else aborts tuning.
    pub fn is_run_local(&self) -> bool {
        matches!(self, ExecutorError::StepTimeout { .. } | ExecutorError::StepFailed(_))
    }
}

pub trait Executor {
    fn time_mode(&self) -> TimeMode;

    /// Identifies the input dataset (and executor session) in cache keys.
    fn dataset_id(&self) -> String;

    fn input_handle(&self) -> DatasetHandle;

    fn run_step(&mut self, request: &StepRequest<'_>, timeout_seconds: f64) -> Result<StepOutput, ExecutorError>;
}

impl<E: Executor + ?Sized> Executor for &mut E {
    fn time_mode(&self) -> TimeMode {
        (**self).time_mode()
    }

    fn dataset_id(&self) -> String {
        (**self).dataset_id()
    }

    fn input_handle(&self) -> DatasetHandle {
        (**self).input_handle()
    }

    fn run_step(&mut self, request: &StepRequest<'_>, timeout_seconds: f64) -> Result<StepOutput, ExecutorError> {
        (**self).run_step(request, timeout_seconds)
    }
}

impl<E: Executor + ?Sized> Executor for Box<E> {
    fn time_mode(&self) -> TimeMode {
        (**self).time_mode()
    }

    fn dataset_id(&self) -> String {
        (**self).dataset_id()
    }

    fn input_handle(&self) -> DatasetHandle {
        (**self).input_handle()
    }

    fn run_step(&mut self, request: &StepRequest<'_>, timeout_seconds: f64) -> Result<StepOutput, ExecutorError> {
        (**self).run_step(request, timeout_seconds)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepDisposition {
    Executed,
    Cached,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    pub disposition: StepDisposition,
    pub seconds: f64,
}

/// Outcome of a full pipeline run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunResult {
    pub metric: f64,
    /// Sum of executed step seconds; cached steps cost nothing.
    pub cost_seconds: f64,
    /// What the whole path would have cost without the cache.
    pub nominal_cost_seconds: f64,
    pub per_step: Vec<StepRecord>,
}

impl RunResult {
    pub fn cache_hits(&self) -> usize {
        self.per_step.iter().filter(|s| s.disposition == StepDisposition::Cached).count()
    }

    pub fn cache_misses(&self) -> usize {
        self.per_step.len() - self.cache_hits()
    }
}
