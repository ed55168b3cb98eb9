//! Convergence summary of a trace.

use std::collections::BTreeMap;
use std::io::Write;

use super::trace::TraceRow;
use super::OrchestratorError;

#[derive(Debug, Clone, PartialEq)]
pub struct ConvergenceSummary {
    pub rows: usize,
    pub per_phase: BTreeMap<u8, usize>,
    /// `(wall_clock_s, running minimum of metric)` per row.
    pub best_series: Vec<(f64, f64)>,
    pub cache_hits: u64,
    pub cache_misses: u64,
    pub best_row: TraceRow,
}

impl ConvergenceSummary {
    pub fn hit_rate(&self) -> f64 {
        let total = self.cache_hits + self.cache_misses;
        if total == 0 {
            0.0
        } else {
            self.cache_hits as f64 / total as f64
        }
    }

    pub fn final_best(&self) -> f64 {
        self.best_series.last().map(|&(_, b)| b).unwrap_or(f64::INFINITY)
    }

    /// Best metric among rows completed by `t` seconds.
    pub fn best_at(&self, t: f64) -> Option<f64> {
        self.best_series.iter().take_while(|(w, _)| *w <= t).last().map(|&(_, b)| b)
    }

    /// `wall_clock_s,best_so_far` series.
    pub fn write_plot_csv<W: Write>(&self, out: W) -> Result<(), OrchestratorError> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["wall_clock_s", "best_so_far"]).map_err(|e| OrchestratorError::Io(e.to_string()))?;
        for (t, b) in &self.best_series {
            w.write_record([t.to_string(), b.to_string()]).map_err(|e| OrchestratorError::Io(e.to_string()))?;
        }
        w.flush().map_err(|e| OrchestratorError::Io(e.to_string()))
    }

    pub fn render(&self) -> String {
        let phases: Vec<String> = self.per_phase.iter().map(|(p, n)| format!("phase {p}: {n}")).collect();
        format!(
            "runs: {} ({})\nbest metric: {} (iter {}, phase {}, path {})\nbest hyperparameters: {}\ncache hit rate: {:.4} ({} hits, {} misses)\n",
            self.rows,
            phases.join(", "),
            self.best_row.metric,
            self.best_row.iter,
            self.best_row.phase,
            self.best_row.path,
            self.best_row.hyperparams_json,
            self.hit_rate(),
            self.cache_hits,
            self.cache_misses,
        )
    }
}

pub fn summarize(rows: &[TraceRow]) -> Result<ConvergenceSummary, OrchestratorError> {
    let first = rows.first().ok_or_else(|| OrchestratorError::TraceParse("trace has no rows".into()))?;
    let mut per_phase = BTreeMap::new();
    let mut best_series = Vec::with_capacity(rows.len());
    let mut best_row = first;
    let (mut hits, mut misses) = (0u64, 0u64);
    for row in rows {
        *per_phase.entry(row.phase).or_insert(0) += 1;
        if row.metric < best_row.metric {
            best_row = row;
        }
        best_series.push((row.wall_clock_s, best_row.metric));
        hits += row.cache_hits as u64;
        misses += row.cache_misses as u64;
    }
    Ok(ConvergenceSummary {
        rows: rows.len(),
        per_phase,
        best_series,
        cache_hits: hits,
        cache_misses: misses,
        best_row: best_row.clone(),
    })
}
