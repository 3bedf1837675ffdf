//! Control-account matching.
//!
//! For each treated account, candidate controls from the same zip code are
//! ranked by a weighted composite of Pearson correlation and dynamic time
//! warping distance over the pre-treatment window, and the top `m` become
//! the regression inputs for the counterfactual model.

mod dtw;

pub use dtw::dtw_distance;

use crate::panel::{split_windows, UsagePanel, Window};
use crate::stats::{fnv1a64, mean};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MatchError {
    #[error("series lengths differ ({left} vs {right})")]
    LengthMismatch { left: usize, right: usize },
    #[error("empty series")]
    EmptySeries,
    #[error("correlation undefined for a constant series")]
    ConstantSeries,
    #[error("pre-period shorter than 3 observations")]
    TooShort,
    #[error("treated series contains non-finite values")]
    NonFinite,
    #[error("candidate pool too small: {found} < {required}")]
    InsufficientPool { found: usize, required: usize },
    #[error("alpha must lie in [0, 1], got {0}")]
    BadAlpha(f64),
    #[error(transparent)]
    Panel(#[from] crate::panel::PanelError),
}

/// How the composite score treats the DTW distance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreMode {
    /// Distances are min-max normalized within the candidate pool to a
    /// similarity (1 = pool minimum distance) before blending, so a higher
    /// score always means a more similar candidate.
    Normalized,
    /// Blend the raw distance as printed: (1-alpha)*rho + alpha*D. Ranks
    /// dissimilar series higher at alpha > 0; kept selectable for
    /// comparison against the normalized default.
    RawDistance,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MatchConfig {
    /// DTW emphasis in [0, 1]; 0 ranks by correlation alone (and skips DTW
    /// entirely), 1 by warping distance alone.
    pub alpha: f64,
    /// Sakoe-Chiba band half-width in months.
    pub warping_limit: usize,
    /// Controls returned per treated account.
    pub num_matches: usize,
    /// Candidate pools larger than this are subsampled.
    pub zip_sample_size: usize,
    /// Treated accounts with smaller pools are skipped.
    pub min_pool: usize,
    pub rng_seed: u64,
    pub score_mode: ScoreMode,
}

impl Default for MatchConfig {
    fn default() -> Self {
        MatchConfig {
            alpha: 0.7,
            warping_limit: 1,
            num_matches: 6,
            zip_sample_size: 500,
            min_pool: 100,
            rng_seed: 0,
            score_mode: ScoreMode::Normalized,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchedControl {
    pub control_id: String,
    pub rho: f64,
    /// None when the alpha = 0 fast path skipped DTW.
    pub dtw: Option<f64>,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchResult {
    pub treated_id: String,
    /// Sorted by score descending, ties broken by ascending control id.
    pub controls: Vec<MatchedControl>,
    pub pool_size: usize,
    /// DTW evaluations performed while scoring this pool.
    pub dtw_calls: usize,
}

/// (rho, dtw) for one candidate, before pool-level normalization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateScore {
    pub control_id: String,
    pub rho: f64,
    pub dtw: Option<f64>,
}

/// Pearson correlation of two equal-length vectors.
pub fn pearson(tr: &[f64], c: &[f64]) -> Result<f64, MatchError> {
    if tr.len() != c.len() {
        return Err(MatchError::LengthMismatch {
            left: tr.len(),
            right: c.len(),
        });
    }
    if tr.len() < 3 {
        return Err(MatchError::TooShort);
    }
    let (m_tr, m_c) = (mean(tr), mean(c));
    let mut cov = 0.0;
    let mut var_tr = 0.0;
    let mut var_c = 0.0;
    for (x, y) in tr.iter().zip(c) {
        let dx = x - m_tr;
        let dy = y - m_c;
        cov += dx * dy;
        var_tr += dx * dx;
        var_c += dy * dy;
    }
    if var_tr == 0.0 || var_c == 0.0 {
        return Err(MatchError::ConstantSeries);
    }
    Ok((cov / (var_tr.sqrt() * var_c.sqrt())).clamp(-1.0, 1.0))
}

/// Min-max normalizes a distance to a similarity within its pool: the pool
/// minimum maps to 1, the maximum to 0. Degenerate pools (all distances
/// equal) map every candidate to 1.
pub fn dtw_similarity(dtw: f64, pool_min: f64, pool_max: f64) -> f64 {
    if pool_max > pool_min {
        1.0 - (dtw - pool_min) / (pool_max - pool_min)
    } else {
        1.0
    }
}

/// Composite similarity for one candidate given the whole pool's distances.
pub fn composite_score(
    rho: f64,
    dtw: f64,
    pool_dtws: &[f64],
    alpha: f64,
    mode: ScoreMode,
) -> Result<f64, MatchError> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(MatchError::BadAlpha(alpha));
    }
    match mode {
        ScoreMode::Normalized => {
            let lo = pool_dtws.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = pool_dtws.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            Ok((1.0 - alpha) * rho + alpha * dtw_similarity(dtw, lo, hi))
        }
        ScoreMode::RawDistance => Ok((1.0 - alpha) * rho + alpha * dtw),
    }
}

/// The candidate pool for one treated account: same zip, never treated,
/// finite values, full coverage of the treated pre-window. When the pool
/// exceeds `zip_sample_size` it is subsampled from a substream keyed by the
/// treated id, so the draw is independent of execution order. Ids come back
/// sorted.
pub fn candidate_pool(
    panel: &UsagePanel,
    treated_id: &str,
    cfg: &MatchConfig,
) -> Result<(Vec<String>, usize), MatchError> {
    let treated_zip = &panel
        .account(treated_id)
        .ok_or_else(|| crate::panel::PanelError::UnknownCustomer(treated_id.to_string()))?
        .zip_code;
    let (pre, _) = split_windows(panel, treated_id)?;

    let mut pool: Vec<String> = panel
        .accounts
        .values()
        .filter(|a| {
            a.customer_id != treated_id
                && &a.zip_code == treated_zip
                && !panel.ever_treated(&a.customer_id)
        })
        .filter_map(|a| {
            let w = panel.series_of(&a.customer_id)?.window(pre.start, pre.len())?;
            w.iter().all(|v| v.is_finite()).then(|| a.customer_id.clone())
        })
        .collect();
    let full_size = pool.len();
    if full_size < cfg.min_pool {
        return Err(MatchError::InsufficientPool {
            found: full_size,
            required: cfg.min_pool,
        });
    }
    if pool.len() > cfg.zip_sample_size {
        let mut rng =
            ChaCha8Rng::seed_from_u64(cfg.rng_seed ^ fnv1a64(treated_id.as_bytes()));
        let picked = rand::seq::index::sample(&mut rng, pool.len(), cfg.zip_sample_size);
        let mut sampled: Vec<String> = picked.iter().map(|i| pool[i].clone()).collect();
        sampled.sort();
        pool = sampled;
    }
    Ok((pool, full_size))
}

/// Divides each value by the window mean, so DTW compares shapes rather
/// than magnitudes. All-zero windows pass through unchanged.
fn shape_normalize(values: &[f64]) -> Vec<f64> {
    let m = mean(values);
    if m.abs() < 1e-12 {
        values.to_vec()
    } else {
        values.iter().map(|v| v / m).collect()
    }
}

/// Scores one slice of the candidate pool against the treated pre-window.
/// Constant candidates keep rho = 0 (flat accounts stay comparable on DTW
/// instead of crashing the pool). At alpha = 0 all DTW work is skipped.
pub fn score_candidates(
    panel: &UsagePanel,
    treated_pre: Window<'_>,
    candidates: &[String],
    cfg: &MatchConfig,
) -> Result<(Vec<CandidateScore>, usize), MatchError> {
    if !treated_pre.values.iter().all(|v| v.is_finite()) {
        return Err(MatchError::NonFinite);
    }
    let skip_dtw = cfg.alpha == 0.0;
    let tr_shape = if skip_dtw {
        Vec::new()
    } else {
        shape_normalize(treated_pre.values)
    };
    let mut dtw_calls = 0usize;
    let mut scored = Vec::with_capacity(candidates.len());
    for id in candidates {
        let series = panel
            .series_of(id)
            .ok_or_else(|| crate::panel::PanelError::UnknownCustomer(id.clone()))?;
        let window = series
            .window(treated_pre.start, treated_pre.len())
            .ok_or(MatchError::EmptySeries)?;
        let rho = match pearson(treated_pre.values, window) {
            Ok(r) => r,
            Err(MatchError::ConstantSeries) => 0.0,
            Err(e) => return Err(e),
        };
        let dtw = if skip_dtw {
            None
        } else {
            dtw_calls += 1;
            Some(dtw_distance(&tr_shape, &shape_normalize(window), cfg.warping_limit)?)
        };
        scored.push(CandidateScore {
            control_id: id.clone(),
            rho,
            dtw,
        });
    }
    Ok((scored, dtw_calls))
}

/// Merges scored candidates (possibly from several shards), applies the
/// pool-wide score normalization, and keeps the top `num_matches`.
/// Normalization always runs over the merged pool, so shard layout cannot
/// change the ranking.
pub fn rank_candidates(
    treated_id: &str,
    scored: Vec<CandidateScore>,
    pool_size: usize,
    dtw_calls: usize,
    cfg: &MatchConfig,
) -> Result<MatchResult, MatchError> {
    let pool_dtws: Vec<f64> = scored.iter().filter_map(|s| s.dtw).collect();
    let mut controls: Vec<MatchedControl> = scored
        .into_iter()
        .map(|s| {
            let score = match s.dtw {
                Some(d) => composite_score(s.rho, d, &pool_dtws, cfg.alpha, cfg.score_mode)?,
                None => (1.0 - cfg.alpha) * s.rho,
            };
            Ok(MatchedControl {
                control_id: s.control_id,
                rho: s.rho,
                dtw: s.dtw,
                score,
            })
        })
        .collect::<Result<_, MatchError>>()?;
    controls.sort_by(|a, b| {
        b.score
            .partial_cmp(&a.score)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then_with(|| a.control_id.cmp(&b.control_id))
    });
    controls.truncate(cfg.num_matches);
    Ok(MatchResult {
        treated_id: treated_id.to_string(),
        controls,
        pool_size,
        dtw_calls,
    })
}

/// Pool construction, scoring, and ranking for one treated account.
pub fn find_matches(
    panel: &UsagePanel,
    treated_id: &str,
    cfg: &MatchConfig,
) -> Result<MatchResult, MatchError> {
    let (pool, _) = candidate_pool(panel, treated_id, cfg)?;
    let (pre, _) = split_windows(panel, treated_id)?;
    if pre.values.iter().all(|v| *v == pre.values[0]) {
        return Err(MatchError::ConstantSeries);
    }
    let (scored, dtw_calls) = score_candidates(panel, pre, &pool, cfg)?;
    rank_candidates(treated_id, scored, pool.len(), dtw_calls, cfg)
}

/// Writes match results as line-delimited JSON records
/// {treated_id, rank, control_id, rho, dtw, score}.
pub fn write_matches_jsonl(result: &MatchResult, path: &Path) -> std::io::Result<()> {
    #[derive(Serialize)]
    struct Line<'a> {
        treated_id: &'a str,
        rank: usize,
        control_id: &'a str,
        rho: f64,
        dtw: Option<f64>,
        score: f64,
    }
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for (i, c) in result.controls.iter().enumerate() {
        let line = Line {
            treated_id: &result.treated_id,
            rank: i + 1,
            control_id: &c.control_id,
            rho: c.rho,
            dtw: c.dtw,
            score: c.score,
        };
        writeln!(f, "{}", serde_json::to_string(&line).unwrap())?;
    }
    Ok(())
}

/// Per-treated static-covariate distances: how close the matched controls
/// are to the treated account in (hh_size, irr_area_sf), z-standardized
/// within the zip, versus the unmatched candidates.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DistanceDiagnostic {
    pub treated_id: String,
    pub mean_matched_dist: f64,
    pub mean_unmatched_dist: f64,
}

/// The time-series-vs-static-matching diagnostic. Zips with fewer than two
/// accounts are skipped. Standardization uses the zip's account population;
/// a zero-variance covariate contributes zero distance.
pub fn static_distance_diagnostic(
    panel: &UsagePanel,
    results: &[MatchResult],
) -> Vec<DistanceDiagnostic> {
    use std::collections::BTreeMap;
    // per-zip mean/sd of the two covariates
    let mut zip_stats: BTreeMap<&str, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for a in panel.accounts.values() {
        let e = zip_stats.entry(a.zip_code.as_str()).or_default();
        e.0.push(a.hh_size as f64);
        e.1.push(a.irr_area_sf);
    }
    let standardizers: BTreeMap<&str, [(f64, f64); 2]> = zip_stats
        .iter()
        .filter(|(_, (hh, _))| hh.len() >= 2)
        .map(|(zip, (hh, irr))| {
            let sd = |xs: &[f64]| crate::stats::sample_variance(xs).sqrt();
            (*zip, [(mean(hh), sd(hh)), (mean(irr), sd(irr))])
        })
        .collect();

    let z = |val: f64, (m, sd): (f64, f64)| if sd > 0.0 { (val - m) / sd } else { 0.0 };

    let mut out = Vec::new();
    for result in results {
        let Some(treated) = panel.account(&result.treated_id) else {
            continue;
        };
        let Some(stats) = standardizers.get(treated.zip_code.as_str()) else {
            continue;
        };
        let t = [z(treated.hh_size as f64, stats[0]), z(treated.irr_area_sf, stats[1])];
        let dist_to = |id: &str| -> Option<f64> {
            let a = panel.account(id)?;
            let c = [z(a.hh_size as f64, stats[0]), z(a.irr_area_sf, stats[1])];
            Some(((t[0] - c[0]).powi(2) + (t[1] - c[1]).powi(2)).sqrt())
        };

        let matched: Vec<&str> = result.controls.iter().map(|c| c.control_id.as_str()).collect();
        let matched_dists: Vec<f64> = matched.iter().filter_map(|id| dist_to(id)).collect();
        // unmatched = potential controls in the zip that were not selected
        let unmatched_dists: Vec<f64> = panel
            .accounts
            .values()
            .filter(|a| {
                a.zip_code == treated.zip_code
                    && a.customer_id != result.treated_id
                    && !panel.ever_treated(&a.customer_id)
                    && !matched.contains(&a.customer_id.as_str())
            })
            .filter_map(|a| dist_to(&a.customer_id))
            .collect();
        if matched_dists.is_empty() || unmatched_dists.is_empty() {
            continue;
        }
        out.push(DistanceDiagnostic {
            treated_id: result.treated_id.clone(),
            mean_matched_dist: mean(&matched_dists),
            mean_unmatched_dist: mean(&unmatched_dists),
        });
    }
    out
}
