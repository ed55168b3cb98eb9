//! Trace CSV: one row per pipeline run, written as the run completes.

use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::OrchestratorError;

pub const TRACE_HEADER: [&str; 10] = [
    "iter",
    "phase",
    "wall_clock_s",
    "path",
    "hyperparams_json",
    "metric",
    "cost_s",
    "best_so_far",
    "cache_hits",
    "cache_misses",
];

/// Which loop produced a row. The random-search baseline is phase 0.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Phase {
    Baseline = 0,
    Init = 1,
    Prune = 2,
    Finetune = 3,
}

impl Phase {
    pub fn from_u8(v: u8) -> Option<Phase> {
        match v {
            0 => Some(Phase::Baseline),
            1 => Some(Phase::Init),
            2 => Some(Phase::Prune),
            3 => Some(Phase::Finetune),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub iter: usize,
    pub phase: u8,
    pub wall_clock_s: f64,
    /// Dash-joined algorithm ids.
    pub path: String,
    pub hyperparams_json: String,
    pub metric: f64,
    pub cost_s: f64,
    pub best_so_far: f64,
    pub cache_hits: usize,
    pub cache_misses: usize,
}

/// Append-only CSV sink, flushed after every row.
pub struct TraceWriter {
    inner: csv::Writer<Box<dyn Write + Send>>,
}

impl std::fmt::Debug for TraceWriter {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("TraceWriter")
    }
}

impl TraceWriter {
    pub fn new(sink: Box<dyn Write + Send>) -> Result<Self, OrchestratorError> {
        let mut inner = csv::WriterBuilder::new().has_headers(false).from_writer(sink);
        inner.write_record(TRACE_HEADER).map_err(io_err)?;
        inner.flush().map_err(|e| OrchestratorError::Io(e.to_string()))?;
        Ok(Self { inner })
    }

    pub fn create(path: &Path) -> Result<Self, OrchestratorError> {
        let file = File::create(path).map_err(|e| OrchestratorError::Io(format!("{}: {e}", path.display())))?;
        Self::new(Box::new(file))
    }

    pub fn append(&mut self, row: &TraceRow) -> Result<(), OrchestratorError> {
        self.inner.serialize(row).map_err(io_err)?;
        self.inner.flush().map_err(|e| OrchestratorError::Io(e.to_string()))
    }
}

fn io_err(e: csv::Error) -> OrchestratorError {
    OrchestratorError::Io(e.to_string())
}

/// Parses a trace produced by [`TraceWriter`]. Rows must carry finite numbers
/// and a known phase.
pub fn parse_trace<R: Read>(reader: R) -> Result<Vec<TraceRow>, OrchestratorError> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let header = rdr.headers().map_err(|e| OrchestratorError::TraceParse(e.to_string()))?;
    if header.iter().ne(TRACE_HEADER.iter().copied()) {
        return Err(OrchestratorError::TraceParse(format!("unexpected header {:?}", header.iter().collect::<Vec<_>>())));
    }
    let mut rows = Vec::new();
    for (i, rec) in rdr.deserialize::<TraceRow>().enumerate() {
        let row = rec.map_err(|e| OrchestratorError::TraceParse(format!("row {}: {e}", i + 1)))?;
        let finite = [row.wall_clock_s, row.metric, row.cost_s, row.best_so_far].iter().all(|v| v.is_finite());
        if !finite || Phase::from_u8(row.phase).is_none() {
            return Err(OrchestratorError::TraceParse(format!("row {}: invalid value", i + 1)));
        }
        if !serde_json::from_str::<serde_json::Value>(&row.hyperparams_json).is_ok_and(|v| v.is_object()) {
            return Err(OrchestratorError::TraceParse(format!("row {}: hyperparams_json is not an object", i + 1)));
        }
        rows.push(row);
    }
    Ok(rows)
}

pub fn read_trace_file(path: &Path) -> Result<Vec<TraceRow>, OrchestratorError> {
    let file = File::open(path).map_err(|e| OrchestratorError::Io(format!("{}: {e}", path.display())))?;
    parse_trace(file)
}
