//! End-to-end workflow across all treated households.
//!
//! Each household is an independent work item: match controls, fit the
//! counterfactual model, predict the post-period, convert to normalized
//! savings. Items run under one of three schemes — strictly sequential,
//! parallel per household, or parallel per candidate shard within each
//! household — and all three produce bitwise-identical output for a fixed
//! master seed, because every random draw comes from a substream keyed by
//! (master seed, household id), never from execution order.

mod exec;
mod sensitivity;
mod speedup;

pub use sensitivity::{sensitivity_grid, write_sensitivity_csv, CellResult, SensitivityGrid, SensitivityReport};
pub use speedup::{speedup_report, write_speedup_csv, SpeedupReport, SpeedupRow};

use crate::bsts::{self, BstsConfig};
use crate::impact::{self, AssembleOptions, AssembleReport, HouseholdImpact, MetaRow};
use crate::matching::{self, MatchConfig, MatchError, MatchResult};
use crate::meta::{self, MetaFit, MetaSpec, MetaSummary};
use crate::month::MonthKey;
use crate::panel::{split_windows, UsagePanel};
use crate::stats::fnv1a64;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use std::time::Instant;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum OrchestratorError {
    #[error("fewer than 2 households produced savings estimates ({ok} ok)")]
    TooFewSuccesses { ok: usize },
    #[error(transparent)]
    Meta(#[from] meta::MetaError),
    #[error("failed writing {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("failed writing {path}: {source}")]
    Csv {
        path: String,
        #[source]
        source: csv::Error,
    },
}

/// How household work items are executed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    /// One household at a time on the calling thread.
    Sequential,
    /// Households distributed across workers.
    PerHousehold,
    /// Candidate pools split into shards scored in parallel, with the
    /// similarity normalization applied after merging all shards; the
    /// model step then runs per household as usual.
    SplitCandidates,
}

impl std::str::FromStr for Scheme {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "sequential" => Ok(Scheme::Sequential),
            "per_household" => Ok(Scheme::PerHousehold),
            "split_candidates" => Ok(Scheme::SplitCandidates),
            other => Err(format!(
                "unknown scheme '{other}' (expected sequential | per_household | split_candidates)"
            )),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunPlan {
    pub match_cfg: MatchConfig,
    pub bsts_cfg: BstsConfig,
    pub meta_spec: MetaSpec,
    pub assemble: AssembleOptions,
    pub scheme: Scheme,
    pub workers: usize,
    /// Candidate shards per household under [`Scheme::SplitCandidates`].
    pub candidate_shards: usize,
    pub master_seed: u64,
    /// Persist full posterior draw matrices per household.
    pub save_draws: bool,
}

impl Default for RunPlan {
    fn default() -> Self {
        RunPlan {
            match_cfg: MatchConfig::default(),
            bsts_cfg: BstsConfig::default(),
            meta_spec: MetaSpec::default(),
            assemble: AssembleOptions::default(),
            scheme: Scheme::PerHousehold,
            workers: 4,
            candidate_shards: 3,
            master_seed: 0,
            save_draws: false,
        }
    }
}

fn derive_seed(master: u64, label: &str) -> u64 {
    let mut bytes = Vec::with_capacity(8 + label.len());
    bytes.extend_from_slice(&master.to_le_bytes());
    bytes.extend_from_slice(label.as_bytes());
    fnv1a64(&bytes)
}

impl RunPlan {
    /// Match config with the pool-sampling seed derived from the master
    /// seed; identical for every scheme and worker count.
    fn resolved_match_cfg(&self) -> MatchConfig {
        MatchConfig {
            rng_seed: derive_seed(self.master_seed, "match"),
            ..self.match_cfg.clone()
        }
    }

    fn bsts_cfg_for(&self, treated_id: &str) -> BstsConfig {
        BstsConfig {
            rng_seed: derive_seed(self.master_seed, &format!("bsts:{treated_id}")),
            ..self.bsts_cfg.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum HouseholdStatus {
    Ok,
    Skipped { reason: String },
    Failed { reason: String },
}

/// Posterior summary kept in checkpoints (draws live in the optional
/// binary files, not in JSON).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PosteriorSummary {
    pub post_start: MonthKey,
    pub point: Vec<f64>,
    pub ci_lower: Vec<f64>,
    pub ci_upper: Vec<f64>,
    pub inclusion_probs: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HouseholdOutput {
    pub treated_id: String,
    pub matches: MatchResult,
    pub posterior: PosteriorSummary,
    pub impact: HouseholdImpact,
    pub match_ms: u64,
    pub fit_ms: u64,
    pub predict_ms: u64,
    /// True when this output was loaded from a checkpoint, not recomputed.
    #[serde(default)]
    pub resumed: bool,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct StageTimings {
    /// Summed per-household stage durations (not wall time).
    pub match_ms: u64,
    pub fit_ms: u64,
    pub predict_ms: u64,
    pub meta_ms: u64,
    pub wall_ms: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunReport {
    /// One entry per retained treated household, sorted by id.
    pub households: Vec<(String, HouseholdStatus)>,
    pub n_ok: usize,
    pub n_skipped: usize,
    pub n_failed: usize,
    pub meta_fit: MetaFit,
    pub summary: MetaSummary,
    pub assemble: AssembleReport,
    pub timings: StageTimings,
    pub dtw_calls: usize,
    pub artifacts: Vec<String>,
}

pub(crate) struct RunDirs {
    matches: PathBuf,
    posteriors: PathBuf,
    checkpoints: PathBuf,
    draws: Option<PathBuf>,
}

impl RunDirs {
    fn create(out: &Path, save_draws: bool) -> Result<RunDirs, OrchestratorError> {
        let mk = |p: PathBuf| -> Result<PathBuf, OrchestratorError> {
            std::fs::create_dir_all(&p).map_err(|source| OrchestratorError::Io {
                path: p.display().to_string(),
                source,
            })?;
            Ok(p)
        };
        Ok(RunDirs {
            matches: mk(out.join("matches"))?,
            posteriors: mk(out.join("posteriors"))?,
            checkpoints: mk(out.join("checkpoints"))?,
            draws: if save_draws { Some(mk(out.join("draws"))?) } else { None },
        })
    }
}

/// Matching under the selected scheme. Split-candidates shards the sampled
/// pool into `ceil(K/C)`-sized disjoint chunks, scores them (in parallel
/// when available), merges, and only then normalizes — so the shard count
/// can never change a ranking.
fn match_household(
    panel: &UsagePanel,
    treated_id: &str,
    cfg: &MatchConfig,
    scheme: Scheme,
    shards: usize,
) -> Result<MatchResult, MatchError> {
    match scheme {
        Scheme::Sequential | Scheme::PerHousehold => matching::find_matches(panel, treated_id, cfg),
        Scheme::SplitCandidates => {
            let (pool, _) = matching::candidate_pool(panel, treated_id, cfg)?;
            let (pre, _) = split_windows(panel, treated_id)?;
            if pre.values.iter().all(|v| *v == pre.values[0]) {
                return Err(MatchError::ConstantSeries);
            }
            let shard_size = pool.len().div_ceil(shards.max(1));
            let chunks: Vec<Vec<String>> = pool.chunks(shard_size.max(1)).map(<[String]>::to_vec).collect();
            let shard_results = exec::map_nested(chunks, |chunk| {
                matching::score_candidates(panel, pre, &chunk, cfg)
            });
            let mut scored = Vec::with_capacity(pool.len());
            let mut dtw_calls = 0;
            for r in shard_results {
                let (s, calls) = r?;
                scored.extend(s);
                dtw_calls += calls;
            }
            matching::rank_candidates(treated_id, scored, pool.len(), dtw_calls, cfg)
        }
    }
}

/// The full M-steps for one household: match, fit, predict, convert.
fn process_household(
    panel: &UsagePanel,
    treated_id: &str,
    plan: &RunPlan,
    dirs: Option<&RunDirs>,
) -> (HouseholdStatus, Option<HouseholdOutput>) {
    // resume from checkpoint when present
    if let Some(dirs) = dirs {
        let ck = dirs.checkpoints.join(format!("{treated_id}.json"));
        if let Ok(bytes) = std::fs::read(&ck) {
            if let Ok(mut output) = serde_json::from_slice::<HouseholdOutput>(&bytes) {
                output.resumed = true;
                return (HouseholdStatus::Ok, Some(output));
            }
        }
    }

    let cfg = plan.resolved_match_cfg();
    let t0 = Instant::now();
    let matches = match match_household(panel, treated_id, &cfg, plan.scheme, plan.candidate_shards) {
        Ok(m) => m,
        Err(e @ (MatchError::InsufficientPool { .. } | MatchError::ConstantSeries)) => {
            log::info!("{treated_id}: skipped ({e})");
            return (HouseholdStatus::Skipped { reason: e.to_string() }, None);
        }
        Err(e) => {
            log::warn!("{treated_id}: matching failed ({e})");
            return (HouseholdStatus::Failed { reason: e.to_string() }, None);
        }
    };
    let match_ms = t0.elapsed().as_millis() as u64;

    let fail = |stage: &str, err: String| {
        log::warn!("{treated_id}: {stage} failed ({err})");
        (HouseholdStatus::Failed { reason: format!("{stage}: {err}") }, None)
    };

    let (pre, post) = match split_windows(panel, treated_id) {
        Ok(w) => w,
        Err(e) => return fail("split", e.to_string()),
    };
    let mut pre_controls = Vec::with_capacity(matches.controls.len());
    let mut post_controls = Vec::with_capacity(matches.controls.len());
    for c in &matches.controls {
        let series = match panel.series_of(&c.control_id) {
            Some(s) => s,
            None => return fail("controls", format!("missing series for {}", c.control_id)),
        };
        let (Some(pw), Some(qw)) = (
            series.window(pre.start, pre.len()),
            series.window(post.start, post.len()),
        ) else {
            return fail(
                "controls",
                format!("control {} does not cover the analysis window", c.control_id),
            );
        };
        pre_controls.push(pw.to_vec());
        post_controls.push(qw.to_vec());
    }

    let event = match panel.treatment(treated_id) {
        Some(e) => e,
        None => return fail("treatment", "not a retained treated account".into()),
    };

    let bsts_cfg = plan.bsts_cfg_for(treated_id);
    let t1 = Instant::now();
    let fit = match bsts::fit(pre.values, &pre_controls, &bsts_cfg) {
        Ok(f) => f,
        Err(e) => return fail("fit", e.to_string()),
    };
    let fit_ms = t1.elapsed().as_millis() as u64;

    let t2 = Instant::now();
    let posterior = match bsts::predict_counterfactual(&fit, &post_controls, post.start) {
        Ok(p) => p,
        Err(e) => return fail("predict", e.to_string()),
    };
    let predict_ms = t2.elapsed().as_millis() as u64;

    let impact = match impact::impact_series(treated_id, post.values, &posterior, event.rebate_quantity) {
        Ok(i) => i,
        Err(e) => return fail("impact", e.to_string()),
    };

    let output = HouseholdOutput {
        treated_id: treated_id.to_string(),
        matches,
        posterior: PosteriorSummary {
            post_start: posterior.post_start,
            point: posterior.point.clone(),
            ci_lower: posterior.ci_lower.clone(),
            ci_upper: posterior.ci_upper.clone(),
            inclusion_probs: posterior.inclusion_probs.clone(),
        },
        impact,
        match_ms,
        fit_ms,
        predict_ms,
        resumed: false,
    };

    if let Some(dirs) = dirs {
        let write = || -> std::io::Result<()> {
            matching::write_matches_jsonl(&output.matches, &dirs.matches.join(format!("{treated_id}.jsonl")))?;
            bsts::write_posterior_jsonl(
                treated_id,
                &posterior,
                &dirs.posteriors.join(format!("{treated_id}.jsonl")),
            )?;
            if let Some(draws_dir) = &dirs.draws {
                posterior.draws.write_binary(&draws_dir.join(format!("{treated_id}.bin")))?;
            }
            // checkpoint last, so a partial write never masks lost artifacts
            std::fs::write(
                dirs.checkpoints.join(format!("{treated_id}.json")),
                serde_json::to_vec(&output).expect("serializable output"),
            )
        };
        if let Err(e) = write() {
            log::warn!("{treated_id}: artifact write failed ({e}); continuing in memory");
        }
    }

    log::info!(
        "{treated_id}: ok (match {match_ms} ms, fit {fit_ms} ms, predict {predict_ms} ms)",
        match_ms = output.match_ms,
        fit_ms = output.fit_ms,
        predict_ms = output.predict_ms,
    );
    (HouseholdStatus::Ok, Some(output))
}

/// Runs matching, modeling, and conversion for every retained treated
/// household (no meta step). Used by the full run, the sensitivity grid,
/// and the timing harness.
pub(crate) fn run_households(
    panel: &UsagePanel,
    ids: &[String],
    plan: &RunPlan,
    dirs: Option<&RunDirs>,
) -> Vec<(String, HouseholdStatus, Option<HouseholdOutput>)> {
    let items: Vec<String> = ids.to_vec();
    let workers = match plan.scheme {
        Scheme::Sequential => 1,
        _ => plan.workers.max(1),
    };
    exec::run_batch(items, workers, |id| {
        let (status, output) = process_household(panel, &id, plan, dirs);
        (id, status, output)
    })
}

/// The complete workflow: per-household estimation, meta table assembly,
/// meta-regression, and summaries. `out`, when given, receives the run
/// artifacts (matches/, posteriors/, checkpoints/, impacts.csv,
/// meta_fit.csv, quantile_bands.csv, annual_means.csv, report.json);
/// re-running into the same directory resumes from the checkpoints.
pub fn run_pipeline(
    panel: &UsagePanel,
    plan: &RunPlan,
    out: Option<&Path>,
) -> Result<RunReport, OrchestratorError> {
    let wall = Instant::now();
    let dirs = match out {
        Some(dir) => Some(RunDirs::create(dir, plan.save_draws)?),
        None => None,
    };

    let ids = panel.treated_ids();
    let results = run_households(panel, &ids, plan, dirs.as_ref());

    let mut households = Vec::with_capacity(results.len());
    let mut outputs = Vec::new();
    let mut timings = StageTimings::default();
    let mut dtw_calls = 0;
    for (id, status, output) in results {
        households.push((id, status));
        if let Some(o) = output {
            timings.match_ms += o.match_ms;
            timings.fit_ms += o.fit_ms;
            timings.predict_ms += o.predict_ms;
            dtw_calls += o.matches.dtw_calls;
            outputs.push(o);
        }
    }
    let n_ok = outputs.len();
    let n_skipped = households
        .iter()
        .filter(|(_, s)| matches!(s, HouseholdStatus::Skipped { .. }))
        .count();
    let n_failed = households
        .iter()
        .filter(|(_, s)| matches!(s, HouseholdStatus::Failed { .. }))
        .count();
    if n_ok < 2 {
        return Err(OrchestratorError::TooFewSuccesses { ok: n_ok });
    }

    let impacts: Vec<HouseholdImpact> = outputs.iter().map(|o| o.impact.clone()).collect();
    let (table, assemble) = impact::assemble_meta_table(panel, &impacts, &plan.assemble);

    let t_meta = Instant::now();
    let meta_fit = meta::fit_meta(&table, &plan.meta_spec)?;
    let summary = meta::summarize(&meta_fit, &table)?;
    timings.meta_ms = t_meta.elapsed().as_millis() as u64;
    timings.wall_ms = wall.elapsed().as_millis() as u64;

    let mut artifacts = Vec::new();
    if let Some(dir) = out {
        write_run_artifacts(dir, &table, &meta_fit, &summary, &mut artifacts)?;
    }

    let report = RunReport {
        households,
        n_ok,
        n_skipped,
        n_failed,
        meta_fit,
        summary,
        assemble,
        timings,
        dtw_calls,
        artifacts,
    };
    if let Some(dir) = out {
        let path = dir.join("report.json");
        std::fs::write(&path, serde_json::to_vec_pretty(&report).expect("serializable report"))
            .map_err(|source| OrchestratorError::Io {
                path: path.display().to_string(),
                source,
            })?;
    }
    Ok(report)
}

fn write_run_artifacts(
    dir: &Path,
    table: &[MetaRow],
    meta_fit: &MetaFit,
    summary: &MetaSummary,
    artifacts: &mut Vec<String>,
) -> Result<(), OrchestratorError> {
    let csv_err = |path: &Path| {
        let path = path.display().to_string();
        move |source: csv::Error| OrchestratorError::Csv { path, source }
    };
    let impacts_path = dir.join("impacts.csv");
    impact::write_meta_table_csv(table, &impacts_path).map_err(csv_err(&impacts_path))?;
    let fit_path = dir.join("meta_fit.csv");
    meta_fit.write_csv(&fit_path).map_err(csv_err(&fit_path))?;
    let bands_path = dir.join("quantile_bands.csv");
    meta::write_quantile_bands_csv(summary, &bands_path).map_err(csv_err(&bands_path))?;
    let annual_path = dir.join("annual_means.csv");
    meta::write_annual_means_csv(summary, &annual_path).map_err(csv_err(&annual_path))?;
    for p in [&impacts_path, &fit_path, &bands_path, &annual_path] {
        artifacts.push(p.display().to_string());
    }
    Ok(())
}
