//! Bayesian structural time series counterfactuals.
//!
//! The treated series (mean-normalized) is modeled as a local linear trend
//! plus a static regression on the matched control series with spike-and-slab
//! coefficient selection. A Gibbs sampler alternates
//!
//!   (a) a forward-filter backward-sample draw of the state trajectory,
//!   (b) conjugate inverse-gamma draws of the three variances, with the
//!       level-noise prior anchored at `local_level_sd_prior`,
//!   (c) a stochastic-search draw of the inclusion indicators and
//!       regression coefficients.
//!
//! Post-burn-in draws are evolved forward over the post-period with fresh
//! state and observation noise to produce the posterior of the untreated
//! consumption path.

mod drawfile;
mod kalman;
mod ssvs;

pub use drawfile::DrawMatrix;
pub use kalman::{kalman_loglik, LocalTrendParams};

use crate::month::MonthKey;
use crate::stats::{draw_inverse_gamma, mean, quantile_sorted, sample_variance};
use nalgebra::{DMatrix, DVector};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum BstsError {
    #[error("input contains non-finite values")]
    NonFinite,
    #[error("empty series")]
    EmptySeries,
    #[error("pre-period too short: {found} < {required}")]
    PreTooShort { found: usize, required: usize },
    #[error("post-period too short: {found} < {required}")]
    PostTooShort { found: usize, required: usize },
    #[error("control matrix shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: usize, got: usize },
    #[error("degenerate input: constant treated series")]
    Degenerate,
    #[error("sampler diverged at iteration {iteration}")]
    Diverged { iteration: usize },
    #[error("prediction variance collapsed at t={t}")]
    FilterCollapse { t: usize },
    #[error("slab precision matrix not positive definite")]
    SlabNotPd,
    #[error("bad config: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BstsConfig {
    /// Total MCMC iterations.
    pub n_iterations: usize,
    /// Iterations discarded before retention.
    pub n_burn: usize,
    /// Prior standard deviation of the level noise, on the mean-normalized
    /// scale of the series.
    pub local_level_sd_prior: f64,
    /// Prior standard deviation guess for the observation noise.
    pub obs_sd_prior: f64,
    /// Prior standard deviation guess for the trend noise.
    pub trend_sd_prior: f64,
    /// Pseudo-observation weight of the three variance priors.
    pub variance_prior_weight: f64,
    /// Prior expected number of included controls.
    pub expected_model_size: f64,
    /// Zellner g for the slab (prior worth ~n/g observations).
    pub slab_information_weight: f64,
    /// Diffuse initial-state variance on the normalized scale.
    pub init_state_variance: f64,
    pub rng_seed: u64,
}

impl Default for BstsConfig {
    fn default() -> Self {
        BstsConfig {
            n_iterations: 1000,
            n_burn: 200,
            local_level_sd_prior: 0.01,
            obs_sd_prior: 0.1,
            trend_sd_prior: 0.001,
            variance_prior_weight: 32.0,
            expected_model_size: 3.0,
            slab_information_weight: 50.0,
            init_state_variance: 1e6,
            rng_seed: 0,
        }
    }
}

impl BstsConfig {
    fn validate(&self) -> Result<(), BstsError> {
        if self.n_iterations <= self.n_burn {
            return Err(BstsError::Config(format!(
                "n_iterations ({}) must exceed n_burn ({})",
                self.n_iterations, self.n_burn
            )));
        }
        if self.local_level_sd_prior <= 0.0 {
            return Err(BstsError::Config("local_level_sd_prior must be positive".into()));
        }
        if self.obs_sd_prior <= 0.0 || self.trend_sd_prior <= 0.0 {
            return Err(BstsError::Config("prior sds must be positive".into()));
        }
        if self.variance_prior_weight <= 2.0 {
            return Err(BstsError::Config("variance_prior_weight must exceed 2".into()));
        }
        if self.slab_information_weight <= 0.0 {
            return Err(BstsError::Config("slab_information_weight must be positive".into()));
        }
        Ok(())
    }
}

const MIN_PRE_MONTHS: usize = 24;
const MIN_POST_MONTHS: usize = 12;
/// Stream ids for the sampler's RNG substreams.
const STREAM_FIT: u64 = 0;
const STREAM_PREDICT: u64 = 1;

/// One retained parameter draw, on the normalized scale.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub(crate) struct ParamDraw {
    pub beta: Vec<f64>,
    pub obs_var: f64,
    pub level_var: f64,
    pub slope_var: f64,
    pub level_end: f64,
    pub slope_end: f64,
}

/// Fitted sampler state: retained draws plus the normalization needed to
/// invert predictions back to CCF.
#[derive(Debug, Clone)]
pub struct BstsFit {
    pub(crate) treated_mean: f64,
    pub(crate) control_means: Vec<f64>,
    pub(crate) draws: Vec<ParamDraw>,
    /// Posterior inclusion probability per matched control.
    pub inclusion_probs: Vec<f64>,
    pub(crate) rng_seed: u64,
}

impl BstsFit {
    pub fn n_controls(&self) -> usize {
        self.control_means.len()
    }

    pub fn n_draws(&self) -> usize {
        self.draws.len()
    }

    /// Posterior mean of the level-noise variance across retained draws.
    pub fn mean_level_variance(&self) -> f64 {
        mean(&self.draws.iter().map(|d| d.level_var).collect::<Vec<_>>())
    }

    /// Posterior means of (obs_var, level_var, slope_var, |beta| by column).
    #[doc(hidden)]
    pub fn chain_diagnostics(&self) -> (f64, f64, f64, Vec<f64>) {
        let n = self.draws.len() as f64;
        let obs = self.draws.iter().map(|d| d.obs_var).sum::<f64>() / n;
        let lvl = self.draws.iter().map(|d| d.level_var).sum::<f64>() / n;
        let slp = self.draws.iter().map(|d| d.slope_var).sum::<f64>() / n;
        let k = self.draws[0].beta.len();
        let betas = (0..k)
            .map(|j| self.draws.iter().map(|d| d.beta[j].abs()).sum::<f64>() / n)
            .collect();
        (obs, lvl, slp, betas)
    }

    /// Assembles a fit directly from parameter draws; used by tests to pin
    /// sampler-free prediction behavior. Betas apply to the centered design
    /// (control value / pre mean - 1).
    #[doc(hidden)]
    pub fn from_parts(
        treated_mean: f64,
        control_means: Vec<f64>,
        betas: Vec<Vec<f64>>,
        variances: Vec<[f64; 3]>,
        end_states: Vec<[f64; 2]>,
        rng_seed: u64,
    ) -> BstsFit {
        let draws = betas
            .into_iter()
            .zip(variances)
            .zip(end_states)
            .map(|((beta, v), s)| ParamDraw {
                beta,
                obs_var: v[0],
                level_var: v[1],
                slope_var: v[2],
                level_end: s[0],
                slope_end: s[1],
            })
            .collect();
        let n = control_means.len();
        BstsFit {
            treated_mean,
            control_means,
            draws,
            inclusion_probs: vec![1.0; n],
            rng_seed,
        }
    }
}

/// Posterior of the untreated post-period consumption, in CCF.
#[derive(Debug, Clone)]
pub struct CounterfactualPosterior {
    pub post_start: MonthKey,
    /// One row per retained draw, one column per post month.
    pub draws: DrawMatrix,
    /// Posterior mean per month.
    pub point: Vec<f64>,
    /// Central 95% bounds per month.
    pub ci_lower: Vec<f64>,
    pub ci_upper: Vec<f64>,
    pub inclusion_probs: Vec<f64>,
}

impl CounterfactualPosterior {
    pub fn months(&self) -> impl Iterator<Item = MonthKey> + '_ {
        (0..self.point.len() as i64).map(move |i| self.post_start.plus(i))
    }
}

fn normalizer(values: &[f64]) -> f64 {
    let m = mean(values);
    if m.abs() < 1e-12 {
        1.0
    } else {
        m
    }
}

/// Fits the sampler to the pre-period. `pre_controls` holds one column per
/// matched control, each as long as `pre_tr`. Series are normalized by
/// their own pre-period means internally; the factors are recorded for
/// inversion at prediction time.
pub fn fit(pre_tr: &[f64], pre_controls: &[Vec<f64>], cfg: &BstsConfig) -> Result<BstsFit, BstsError> {
    cfg.validate()?;
    let p = pre_tr.len();
    if p < MIN_PRE_MONTHS {
        return Err(BstsError::PreTooShort {
            found: p,
            required: MIN_PRE_MONTHS,
        });
    }
    if pre_tr.iter().any(|v| !v.is_finite()) {
        return Err(BstsError::NonFinite);
    }
    for c in pre_controls {
        if c.len() != p {
            return Err(BstsError::ShapeMismatch {
                expected: p,
                got: c.len(),
            });
        }
        if c.iter().any(|v| !v.is_finite()) {
            return Err(BstsError::NonFinite);
        }
    }
    if sample_variance(pre_tr) == 0.0 {
        return Err(BstsError::Degenerate);
    }
    let m = pre_controls.len();
    if m == 0 {
        return Err(BstsError::Config("at least one control series required".into()));
    }

    let treated_mean = normalizer(pre_tr);
    let control_means: Vec<f64> = pre_controls.iter().map(|c| normalizer(c)).collect();
    let y: Vec<f64> = pre_tr.iter().map(|v| v / treated_mean).collect();

    // design: intercept followed by normalized, centered controls. A
    // mean-normalized pre window has mean exactly 1, so subtracting 1
    // centers it; the intercept absorbs the shift, and centering keeps the
    // slab's Occam penalty on each control's variation rather than its
    // level.
    let k = m + 1;
    let x = DMatrix::from_fn(p, k, |r, c| {
        if c == 0 {
            1.0
        } else {
            pre_controls[c - 1][r] / control_means[c - 1] - 1.0
        }
    });

    let inclusion_prob = (cfg.expected_model_size / m as f64).min(1.0);
    let mut forced = vec![false; k];
    forced[0] = true;
    let ws = ssvs::SsvsWorkspace::new(x.clone(), cfg.slab_information_weight, inclusion_prob, &forced);

    // inverse-gamma priors: shape w/2, rate w*sd^2/2
    let w = cfg.variance_prior_weight;
    let (a_obs, b_obs) = (w / 2.0, w * cfg.obs_sd_prior.powi(2) / 2.0);
    let (a_lvl, b_lvl) = (w / 2.0, w * cfg.local_level_sd_prior.powi(2) / 2.0);
    let (a_slp, b_slp) = (w / 2.0, w * cfg.trend_sd_prior.powi(2) / 2.0);

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    rng.set_stream(STREAM_FIT);

    let mut obs_var = cfg.obs_sd_prior.powi(2);
    let mut level_var = cfg.local_level_sd_prior.powi(2);
    let mut slope_var = cfg.trend_sd_prior.powi(2);
    let mut beta = DVector::zeros(k);
    let mut gamma = forced.clone();

    let n_kept = cfg.n_iterations - cfg.n_burn;
    let mut draws = Vec::with_capacity(n_kept);
    let mut inclusion_counts = vec![0usize; m];

    for iteration in 0..cfg.n_iterations {
        // (a) state trajectory given beta and variances
        let regression = &x * &beta;
        let resid: Vec<f64> = (0..p).map(|t| y[t] - regression[t]).collect();
        let params = LocalTrendParams::diffuse(obs_var, level_var, slope_var, cfg.init_state_variance);
        let states = kalman::ffbs(&params, &resid, &mut rng)?;

        // (b) conjugate variance draws
        let sse_obs: f64 = (0..p)
            .map(|t| {
                let e = y[t] - states[t][0] - regression[t];
                e * e
            })
            .sum();
        obs_var = draw_inverse_gamma(&mut rng, a_obs + p as f64 / 2.0, b_obs + sse_obs / 2.0);
        let sse_lvl: f64 = (1..p)
            .map(|t| {
                let e = states[t][0] - states[t - 1][0] - states[t - 1][1];
                e * e
            })
            .sum();
        level_var =
            draw_inverse_gamma(&mut rng, a_lvl + (p - 1) as f64 / 2.0, b_lvl + sse_lvl / 2.0);
        let sse_slp: f64 = (1..p)
            .map(|t| {
                let e = states[t][1] - states[t - 1][1];
                e * e
            })
            .sum();
        slope_var =
            draw_inverse_gamma(&mut rng, a_slp + (p - 1) as f64 / 2.0, b_slp + sse_slp / 2.0);

        // (c) indicators and coefficients given the detrended series
        let z = DVector::from_fn(p, |t, _| y[t] - states[t][0]);
        beta = ws.draw(&z, obs_var, &mut gamma, &mut rng)?;

        let finite = beta.iter().all(|v| v.is_finite())
            && obs_var.is_finite()
            && level_var.is_finite()
            && slope_var.is_finite()
            && states[p - 1].iter().all(|v| v.is_finite());
        if !finite {
            return Err(BstsError::Diverged { iteration });
        }

        if iteration >= cfg.n_burn {
            for j in 0..m {
                if gamma[j + 1] {
                    inclusion_counts[j] += 1;
                }
            }
            draws.push(ParamDraw {
                beta: beta.iter().copied().collect(),
                obs_var,
                level_var,
                slope_var,
                level_end: states[p - 1][0],
                slope_end: states[p - 1][1],
            });
        }
    }

    Ok(BstsFit {
        treated_mean,
        control_means,
        draws,
        inclusion_probs: inclusion_counts
            .iter()
            .map(|&c| c as f64 / n_kept as f64)
            .collect(),
        rng_seed: cfg.rng_seed,
    })
}

/// Evolves every retained draw across the post-period with fresh state and
/// observation noise, de-normalizes to CCF, and summarizes with posterior
/// means and central 95% bounds.
pub fn predict_counterfactual(
    fit: &BstsFit,
    post_controls: &[Vec<f64>],
    post_start: MonthKey,
) -> Result<CounterfactualPosterior, BstsError> {
    let m = fit.n_controls();
    if post_controls.len() != m {
        return Err(BstsError::ShapeMismatch {
            expected: m,
            got: post_controls.len(),
        });
    }
    let q = post_controls.first().map_or(0, Vec::len);
    if q < MIN_POST_MONTHS {
        return Err(BstsError::PostTooShort {
            found: q,
            required: MIN_POST_MONTHS,
        });
    }
    for c in post_controls {
        if c.len() != q {
            return Err(BstsError::ShapeMismatch {
                expected: q,
                got: c.len(),
            });
        }
        if c.iter().any(|v| !v.is_finite()) {
            return Err(BstsError::NonFinite);
        }
    }
    if fit.draws.is_empty() {
        return Err(BstsError::Config("fit holds no draws".into()));
    }

    // normalized, centered post design to match the fit's parametrization
    let xn: Vec<Vec<f64>> = post_controls
        .iter()
        .zip(&fit.control_means)
        .map(|(c, &cm)| c.iter().map(|v| v / cm - 1.0).collect())
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(fit.rng_seed);
    rng.set_stream(STREAM_PREDICT);

    let mut draws = DrawMatrix::zeros(fit.draws.len(), q);
    for (i, d) in fit.draws.iter().enumerate() {
        let sd_lvl = d.level_var.sqrt();
        let sd_slp = d.slope_var.sqrt();
        let sd_obs = d.obs_var.sqrt();
        let mut level = d.level_end;
        let mut slope = d.slope_end;
        let row = draws.row_mut(i);
        for t in 0..q {
            let z_lvl: f64 = StandardNormal.sample(&mut rng);
            let z_slp: f64 = StandardNormal.sample(&mut rng);
            let z_obs: f64 = StandardNormal.sample(&mut rng);
            level = level + slope + sd_lvl * z_lvl;
            slope += sd_slp * z_slp;
            let mut reg = d.beta[0];
            for j in 0..m {
                reg += d.beta[j + 1] * xn[j][t];
            }
            let y_norm = level + reg + sd_obs * z_obs;
            if !y_norm.is_finite() {
                return Err(BstsError::FilterCollapse { t });
            }
            row[t] = y_norm * fit.treated_mean;
        }
    }

    let mut point = Vec::with_capacity(q);
    let mut ci_lower = Vec::with_capacity(q);
    let mut ci_upper = Vec::with_capacity(q);
    for t in 0..q {
        let mut col = draws.column(t);
        col.sort_by(|a, b| a.partial_cmp(b).unwrap());
        point.push(mean(&col));
        ci_lower.push(quantile_sorted(&col, 0.025));
        ci_upper.push(quantile_sorted(&col, 0.975));
    }

    Ok(CounterfactualPosterior {
        post_start,
        draws,
        point,
        ci_lower,
        ci_upper,
        inclusion_probs: fit.inclusion_probs.clone(),
    })
}

/// One joint state-trajectory draw, exposed for the smoother-mean oracle
/// comparison in the test suite.
#[doc(hidden)]
pub fn ffbs_for_tests<R: rand::Rng>(
    params: &LocalTrendParams,
    y: &[f64],
    rng: &mut R,
) -> Result<Vec<[f64; 2]>, BstsError> {
    kalman::ffbs(params, y, rng).map(|states| states.iter().map(|s| [s[0], s[1]]).collect())
}

/// Posterior summary line for the serialized record stream.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PosteriorSummaryLine {
    pub treated_id: String,
    pub year: i32,
    pub month: u8,
    pub point: f64,
    pub ci_lower: f64,
    pub ci_upper: f64,
}

/// Writes {treated_id, year, month, point, ci_lower, ci_upper} JSON lines.
pub fn write_posterior_jsonl(
    treated_id: &str,
    posterior: &CounterfactualPosterior,
    path: &std::path::Path,
) -> std::io::Result<()> {
    use std::io::Write;
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for (i, month) in posterior.months().enumerate() {
        let line = PosteriorSummaryLine {
            treated_id: treated_id.to_string(),
            year: month.year,
            month: month.month,
            point: posterior.point[i],
            ci_lower: posterior.ci_lower[i],
            ci_upper: posterior.ci_upper[i],
        };
        writeln!(f, "{}", serde_json::to_string(&line).unwrap())?;
    }
    Ok(())
}
