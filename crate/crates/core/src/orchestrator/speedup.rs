//! Wall-clock comparison harness across run-plan variants (schemes, worker
//! counts, and the alpha = 0 fast path that eliminates DTW entirely).

use super::{run_households, HouseholdStatus, RunPlan};
use crate::panel::UsagePanel;
use serde::{Deserialize, Serialize};
use std::path::Path;
use std::time::Instant;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SpeedupRow {
    pub variant: String,
    pub wall_ms: u64,
    /// Summed per-household stage durations.
    pub match_ms: u64,
    pub fit_ms: u64,
    pub predict_ms: u64,
    pub dtw_calls: usize,
    pub n_ok: usize,
    pub n_failed: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SpeedupReport {
    pub rows: Vec<SpeedupRow>,
}

/// Runs the match+model steps once per named variant and reports timings.
pub fn speedup_report(panel: &UsagePanel, variants: &[(String, RunPlan)]) -> SpeedupReport {
    let ids = panel.treated_ids();
    let rows = variants
        .iter()
        .map(|(name, plan)| {
            let t0 = Instant::now();
            let results = run_households(panel, &ids, plan, None);
            let wall_ms = t0.elapsed().as_millis() as u64;
            let mut row = SpeedupRow {
                variant: name.clone(),
                wall_ms,
                match_ms: 0,
                fit_ms: 0,
                predict_ms: 0,
                dtw_calls: 0,
                n_ok: 0,
                n_failed: 0,
            };
            for (_, status, output) in results {
                match status {
                    HouseholdStatus::Ok => row.n_ok += 1,
                    HouseholdStatus::Failed { .. } => row.n_failed += 1,
                    HouseholdStatus::Skipped { .. } => {}
                }
                if let Some(o) = output {
                    row.match_ms += o.match_ms;
                    row.fit_ms += o.fit_ms;
                    row.predict_ms += o.predict_ms;
                    row.dtw_calls += o.matches.dtw_calls;
                }
            }
            row
        })
        .collect();
    SpeedupReport { rows }
}

pub fn write_speedup_csv(report: &SpeedupReport, path: &Path) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["variant", "wall_ms", "match_ms", "fit_ms", "predict_ms", "dtw_calls", "n_ok", "n_failed"])?;
    for r in &report.rows {
        w.write_record([
            r.variant.clone(),
            r.wall_ms.to_string(),
            r.match_ms.to_string(),
            r.fit_ms.to_string(),
            r.predict_ms.to_string(),
            r.dtw_calls.to_string(),
            r.n_ok.to_string(),
            r.n_failed.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
