//! Weighted mixed-effects meta-regression of per-month savings.
//!
//! Model: gpsf_{i,t} = x'_{i,t} beta + u_i + e_{i,t}, with u_i ~ N(0, tau2)
//! per household and e_{i,t} ~ N(0, v_{i,t}) where the v are known from the
//! posterior draw variances. The marginal covariance of household i is
//! V_i = diag(v_i) + tau2 * J, inverted in closed form (Sherman-Morrison),
//! so the fit scales linearly in observations. tau2 is estimated by REML
//! with Fisher scoring and step-halving; beta by GLS at the converged tau2.

use crate::impact::MetaRow;
use crate::stats::{mean, quantile};
use nalgebra::{Cholesky, DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};
use std::collections::BTreeMap;
use thiserror::Error;

const LN_2PI: f64 = 1.8378770664093453;

#[derive(Debug, Error)]
pub enum MetaError {
    #[error("meta table must contain at least 2 households, got {0}")]
    TooFewHouseholds(usize),
    #[error("meta table is empty")]
    Empty,
    #[error("row for '{0}' has non-finite values")]
    NonFinite(String),
    #[error("design matrix is rank deficient; collinear columns: {0:?}")]
    RankDeficient(Vec<String>),
    #[error("normal equations singular at tau2 = {0}")]
    Singular(f64),
    #[error("REML did not converge in {iterations} iterations; tau2 trace: {trace:?}")]
    NonConvergence { iterations: usize, trace: Vec<f64> },
    #[error("predict requires the standard 12-column design, fit has {0} columns")]
    NonStandardDesign(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightMode {
    /// w = 1/s with s the draw variance (standard meta-analysis weighting).
    InverseVariance,
    /// w = 1/sqrt(s), selectable for sensitivity to the weight reading.
    InverseSd,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetaSpec {
    pub weight_mode: WeightMode,
    pub max_iterations: usize,
    /// Convergence threshold on |delta tau2|.
    pub tol: f64,
    /// Weights above this quantile of the weight distribution are capped at
    /// it, so floored-variance rows cannot dominate the fit.
    pub weight_cap_quantile: f64,
}

impl Default for MetaSpec {
    fn default() -> Self {
        MetaSpec {
            weight_mode: WeightMode::InverseVariance,
            max_iterations: 100,
            tol: 1e-8,
            weight_cap_quantile: 0.99,
        }
    }
}

/// The fixed-effect design: intercept, six moderators, ET, and four
/// harmonics of the study-month index at annual and semiannual periods.
pub const DESIGN_COLUMNS: [&str; 12] = [
    "Intercept",
    "HH Size",
    "Pre-Removal Efficiency",
    "ln(Rebate Quantity)",
    "ln(Rebate Area Ratio)",
    "ln(med. HH Income)",
    "Population Density",
    "ET",
    "Month Sin 2",
    "Month Cos 2",
    "Month Sin 4",
    "Month Cos 4",
];

pub fn design_row(row: &MetaRow) -> [f64; 12] {
    let t = row.t_index as f64;
    let w = 2.0 * std::f64::consts::PI * t / 12.0;
    [
        1.0,
        row.hh_size,
        row.pre_removal_efficiency,
        row.ln_rebate_quantity,
        row.ln_rebate_area_ratio,
        row.ln_median_income,
        row.population_density,
        row.et0,
        w.sin(),
        w.cos(),
        (2.0 * w).sin(),
        (2.0 * w).cos(),
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoefEstimate {
    pub name: String,
    pub estimate: f64,
    pub se: f64,
    pub t_stat: f64,
    pub p_value: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetaFit {
    pub coefficients: Vec<CoefEstimate>,
    /// Random-intercept variance.
    pub tau2: f64,
    pub n_obs: usize,
    pub n_households: usize,
    pub reml_loglik: f64,
    pub iterations: usize,
    /// (tau2, REML loglik) after each Fisher-scoring step.
    pub trace: Vec<(f64, f64)>,
    pub(crate) beta: Vec<f64>,
    /// Empirical BLUP of the random intercept per household.
    pub blups: BTreeMap<String, f64>,
}

impl MetaFit {
    pub fn coefficient(&self, name: &str) -> Option<&CoefEstimate> {
        self.coefficients.iter().find(|c| c.name == name)
    }

    /// A bare fit from a raw standard-design coefficient vector, no random
    /// effects; used by tests to pin prediction identities.
    #[doc(hidden)]
    pub fn from_beta(beta: Vec<f64>) -> MetaFit {
        MetaFit {
            coefficients: Vec::new(),
            tau2: 0.0,
            n_obs: 0,
            n_households: 0,
            reml_loglik: 0.0,
            iterations: 0,
            trace: Vec::new(),
            beta,
            blups: BTreeMap::new(),
        }
    }

    /// Writes the coefficient table as CSV: Variable, Estimate, SE, t-stat,
    /// p-value, with tau2 and fit metadata in trailing rows.
    pub fn write_csv(&self, path: &std::path::Path) -> Result<(), csv::Error> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["Variable", "Estimate", "SE", "t-stat", "p-value"])?;
        for c in &self.coefficients {
            w.write_record([
                c.name.clone(),
                c.estimate.to_string(),
                c.se.to_string(),
                c.t_stat.to_string(),
                c.p_value.to_string(),
            ])?;
        }
        w.write_record(["tau2", &self.tau2.to_string(), "", "", ""])?;
        w.write_record(["n_obs", &self.n_obs.to_string(), "", "", ""])?;
        w.write_record(["n_households", &self.n_households.to_string(), "", "", ""])?;
        w.flush()?;
        Ok(())
    }
}

/// Per-household views into the stacked data, plus the Sherman-Morrison
/// pieces that depend on tau2.
struct HouseholdBlock {
    rows: Vec<usize>,
    id: String,
}

struct Prepared {
    x: DMatrix<f64>,
    y: DVector<f64>,
    v: Vec<f64>,
    blocks: Vec<HouseholdBlock>,
    names: Vec<String>,
    /// Column scaling applied before solving; estimates are unscaled back.
    scales: Vec<f64>,
}

fn prepare(
    x_raw: &DMatrix<f64>,
    y: &[f64],
    v: &[f64],
    households: &[String],
    names: &[String],
) -> Result<Prepared, MetaError> {
    let n = y.len();
    if n == 0 {
        return Err(MetaError::Empty);
    }
    assert_eq!(x_raw.nrows(), n);
    assert_eq!(v.len(), n);
    assert_eq!(households.len(), n);

    for i in 0..n {
        let finite = y[i].is_finite()
            && v[i].is_finite()
            && v[i] > 0.0
            && (0..x_raw.ncols()).all(|j| x_raw[(i, j)].is_finite());
        if !finite {
            return Err(MetaError::NonFinite(households[i].clone()));
        }
    }

    let mut blocks: Vec<HouseholdBlock> = Vec::new();
    let mut index: BTreeMap<&str, usize> = BTreeMap::new();
    for (i, h) in households.iter().enumerate() {
        match index.get(h.as_str()) {
            Some(&b) => blocks[b].rows.push(i),
            None => {
                index.insert(h, blocks.len());
                blocks.push(HouseholdBlock {
                    rows: vec![i],
                    id: h.clone(),
                });
            }
        }
    }
    if blocks.len() < 2 {
        return Err(MetaError::TooFewHouseholds(blocks.len()));
    }

    // scale columns to unit max-abs for conditioning
    let k = x_raw.ncols();
    let mut scales = vec![1.0; k];
    let mut x = x_raw.clone();
    for j in 0..k {
        let m = (0..n).map(|i| x[(i, j)].abs()).fold(0.0f64, f64::max);
        if m > 0.0 {
            scales[j] = m;
            for i in 0..n {
                x[(i, j)] /= m;
            }
        }
    }

    // rank check by Gram-Schmidt on the scaled columns
    let mut basis: Vec<DVector<f64>> = Vec::new();
    let mut collinear = Vec::new();
    for j in 0..k {
        let col = x.column(j).into_owned();
        let norm0 = col.norm();
        if norm0 == 0.0 {
            collinear.push(names[j].clone());
            continue;
        }
        let mut r = col.clone();
        for b in &basis {
            let proj = b.dot(&r);
            r -= b * proj;
        }
        if r.norm() < 1e-7 * norm0 {
            collinear.push(names[j].clone());
        } else {
            let nrm = r.norm();
            basis.push(r / nrm);
        }
    }
    if !collinear.is_empty() {
        return Err(MetaError::RankDeficient(collinear));
    }

    Ok(Prepared {
        x,
        y: DVector::from_column_slice(y),
        v: v.to_vec(),
        blocks,
        names: names.to_vec(),
        scales,
    })
}

/// GLS at a fixed tau2: (beta, cov(beta), REML loglik, per-household g'r).
struct GlsResult {
    beta: DVector<f64>,
    cov: DMatrix<f64>,
    reml_loglik: f64,
    /// g_i' r_i per block, for BLUPs and the score.
    gr: Vec<f64>,
    /// h_i = X_i' g_i per block.
    h: Vec<DVector<f64>>,
    /// s_i = 1' V_i^-1 1 per block.
    s: Vec<f64>,
}

fn gls_at(prep: &Prepared, tau2: f64) -> Result<GlsResult, MetaError> {
    let k = prep.x.ncols();
    let mut xtvx = DMatrix::zeros(k, k);
    let mut xtvy = DVector::zeros(k);
    let mut logdet_v = 0.0;
    let mut h = Vec::with_capacity(prep.blocks.len());
    let mut s = Vec::with_capacity(prep.blocks.len());

    for block in &prep.blocks {
        let nb = block.rows.len();
        let mut xb = DMatrix::zeros(nb, k);
        let mut yb = DVector::zeros(nb);
        let mut d = DVector::zeros(nb);
        for (r, &i) in block.rows.iter().enumerate() {
            xb.row_mut(r).copy_from(&prep.x.row(i));
            yb[r] = prep.y[i];
            d[r] = 1.0 / prep.v[i];
            logdet_v += prep.v[i].ln();
        }
        let c: f64 = d.sum();
        let shrink = tau2 / (1.0 + tau2 * c);
        logdet_v += (1.0 + tau2 * c).ln();

        let xtd = xb.transpose() * DMatrix::from_diagonal(&d);
        let xd = &xtd * &xb; // X' D^-1 X
        let xddy = &xtd * &yb; // X' D^-1 y
        let xtd1 = xb.transpose() * &d; // X' d
        let dty = d.dot(&yb); // d' y

        xtvx += xd - &xtd1 * xtd1.transpose() * shrink;
        xtvy += xddy - &xtd1 * (shrink * dty);
        h.push(xtd1 / (1.0 + tau2 * c));
        s.push(c / (1.0 + tau2 * c));
    }

    let chol = Cholesky::new(xtvx.clone()).ok_or(MetaError::Singular(tau2))?;
    let beta = chol.solve(&xtvy);
    let cov = chol.inverse();
    let logdet_xtvx = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();

    // residual quadratic form and g'r per block
    let fitted = &prep.x * &beta;
    let mut quad = 0.0;
    let mut gr = Vec::with_capacity(prep.blocks.len());
    for block in &prep.blocks {
        let mut rd_r = 0.0; // r' D^-1 r
        let mut dr = 0.0; // d' r
        let mut c = 0.0;
        for &i in &block.rows {
            let r = prep.y[i] - fitted[i];
            let di = 1.0 / prep.v[i];
            rd_r += r * r * di;
            dr += r * di;
            c += di;
        }
        let shrink = tau2 / (1.0 + tau2 * c);
        quad += rd_r - shrink * dr * dr;
        gr.push(dr / (1.0 + tau2 * c));
    }

    let n = prep.y.len() as f64;
    let p = k as f64;
    let reml_loglik = -0.5 * (logdet_v + logdet_xtvx + quad) - 0.5 * (n - p) * LN_2PI;
    Ok(GlsResult {
        beta,
        cov,
        reml_loglik,
        gr,
        h,
        s,
    })
}

/// REML score and Fisher information for tau2 at the current GLS solution.
fn score_and_information(gls: &GlsResult) -> (f64, f64) {
    let nb = gls.s.len();
    // u_j = cov * h_j
    let u: Vec<DVector<f64>> = gls.h.iter().map(|h| &gls.cov * h).collect();
    let mut tr_pz = 0.0;
    for i in 0..nb {
        tr_pz += gls.s[i] - gls.h[i].dot(&u[i]);
    }
    let quad: f64 = gls.gr.iter().map(|g| g * g).sum();
    let score = -0.5 * (tr_pz - quad);

    let mut frob = 0.0;
    for i in 0..nb {
        for j in 0..nb {
            let hij = gls.h[i].dot(&u[j]);
            let zpz = if i == j { gls.s[i] - hij } else { -hij };
            frob += zpz * zpz;
        }
    }
    (score, 0.5 * frob)
}

fn finalize(
    prep: &Prepared,
    gls: GlsResult,
    tau2: f64,
    iterations: usize,
    trace: Vec<(f64, f64)>,
) -> MetaFit {
    let n = prep.y.len();
    let k = prep.x.ncols();
    let df = (n as f64 - k as f64).max(1.0);
    let tdist = StudentsT::new(0.0, 1.0, df).expect("t distribution");

    let mut coefficients = Vec::with_capacity(k);
    let mut beta_unscaled = Vec::with_capacity(k);
    for j in 0..k {
        let est = gls.beta[j] / prep.scales[j];
        let se = (gls.cov[(j, j)].max(0.0)).sqrt() / prep.scales[j];
        let t = if se > 0.0 { est / se } else { 0.0 };
        let p = 2.0 * (1.0 - tdist.cdf(t.abs()));
        coefficients.push(CoefEstimate {
            name: prep.names[j].clone(),
            estimate: est,
            se,
            t_stat: t,
            p_value: p,
        });
        beta_unscaled.push(est);
    }

    let blups: BTreeMap<String, f64> = prep
        .blocks
        .iter()
        .zip(&gls.gr)
        .map(|(b, &gr)| (b.id.clone(), tau2 * gr))
        .collect();

    MetaFit {
        coefficients,
        tau2,
        n_obs: n,
        n_households: prep.blocks.len(),
        reml_loglik: gls.reml_loglik,
        iterations,
        trace,
        beta: beta_unscaled,
        blups,
    }
}

/// Fits the mixed model on an explicit design. Exposed so oracle tests can
/// fit reduced designs; [`fit_meta`] is the standard-design entry point.
pub fn fit_mixed_model(
    x: &DMatrix<f64>,
    y: &[f64],
    v: &[f64],
    households: &[String],
    names: &[String],
    spec: &MetaSpec,
    fixed_tau2: Option<f64>,
) -> Result<MetaFit, MetaError> {
    let prep = prepare(x, y, v, households, names)?;

    if let Some(tau2) = fixed_tau2 {
        let gls = gls_at(&prep, tau2)?;
        let trace = vec![(tau2, gls.reml_loglik)];
        return Ok(finalize(&prep, gls, tau2, 0, trace));
    }

    // moment-style start: variance of household mean residuals around zero
    let mut tau2 = {
        let hh_means: Vec<f64> = prep
            .blocks
            .iter()
            .map(|b| mean(&b.rows.iter().map(|&i| prep.y[i]).collect::<Vec<_>>()))
            .collect();
        (crate::stats::sample_variance(&hh_means) * 0.5).max(1e-4)
    };
    let mut gls = gls_at(&prep, tau2)?;
    let mut trace = vec![(tau2, gls.reml_loglik)];

    for iteration in 1..=spec.max_iterations {
        let (score, info) = score_and_information(&gls);
        if tau2 == 0.0 && score <= 0.0 {
            return Ok(finalize(&prep, gls, tau2, iteration, trace));
        }
        let mut step = if info > 0.0 { score / info } else { 0.0 };
        if step == 0.0 {
            return Ok(finalize(&prep, gls, tau2, iteration, trace));
        }

        // step-halving keeps the REML objective non-decreasing
        let mut accepted = None;
        for _ in 0..40 {
            let cand = (tau2 + step).max(0.0);
            let cand_gls = gls_at(&prep, cand)?;
            if cand_gls.reml_loglik >= gls.reml_loglik - 1e-10 {
                accepted = Some((cand, cand_gls));
                break;
            }
            step *= 0.5;
        }
        let Some((new_tau2, new_gls)) = accepted else {
            return Ok(finalize(&prep, gls, tau2, iteration, trace));
        };
        let delta = (new_tau2 - tau2).abs();
        tau2 = new_tau2;
        gls = new_gls;
        trace.push((tau2, gls.reml_loglik));
        if delta < spec.tol {
            return Ok(finalize(&prep, gls, tau2, iteration, trace));
        }
    }
    Err(MetaError::NonConvergence {
        iterations: spec.max_iterations,
        trace: trace.iter().map(|(t, _)| *t).collect(),
    })
}

fn table_inputs(table: &[MetaRow], spec: &MetaSpec) -> (DMatrix<f64>, Vec<f64>, Vec<f64>, Vec<String>) {
    let n = table.len();
    let x = DMatrix::from_fn(n, 12, |i, j| design_row(&table[i])[j]);
    let y: Vec<f64> = table.iter().map(|r| r.gpsf).collect();
    let mut v: Vec<f64> = table
        .iter()
        .map(|r| match spec.weight_mode {
            WeightMode::InverseVariance => r.s,
            WeightMode::InverseSd => r.s.sqrt(),
        })
        .collect();
    // cap extreme weights at the configured quantile
    let weights: Vec<f64> = v.iter().map(|&vi| 1.0 / vi).collect();
    if !weights.is_empty() {
        let cap = quantile(&weights, spec.weight_cap_quantile);
        if cap > 0.0 {
            let floor_v = 1.0 / cap;
            for vi in &mut v {
                if *vi < floor_v {
                    *vi = floor_v;
                }
            }
        }
    }
    let households: Vec<String> = table.iter().map(|r| r.treated_id.clone()).collect();
    (x, y, v, households)
}

/// Fits the standard-design meta-regression by REML.
pub fn fit_meta(table: &[MetaRow], spec: &MetaSpec) -> Result<MetaFit, MetaError> {
    let (x, y, v, households) = table_inputs(table, spec);
    let names: Vec<String> = DESIGN_COLUMNS.iter().map(|s| s.to_string()).collect();
    fit_mixed_model(&x, &y, &v, &households, &names, spec, None)
}

/// Same fit with tau2 pinned (tau2 = 0 collapses to inverse-variance WLS).
pub fn fit_meta_fixed_tau2(table: &[MetaRow], spec: &MetaSpec, tau2: f64) -> Result<MetaFit, MetaError> {
    let (x, y, v, households) = table_inputs(table, spec);
    let names: Vec<String> = DESIGN_COLUMNS.iter().map(|s| s.to_string()).collect();
    fit_mixed_model(&x, &y, &v, &households, &names, spec, Some(tau2))
}

/// Fixed-effect prediction x'beta, plus the household BLUP when requested
/// and known. Unknown households fall back to fixed-only with a warning.
pub fn predict(fit: &MetaFit, rows: &[MetaRow], include_random: bool) -> Result<Vec<f64>, MetaError> {
    if fit.beta.len() != 12 {
        return Err(MetaError::NonStandardDesign(fit.beta.len()));
    }
    let mut warned = false;
    let preds = rows
        .iter()
        .map(|row| {
            let x = design_row(row);
            let mut p: f64 = x.iter().zip(&fit.beta).map(|(a, b)| a * b).sum();
            if include_random {
                match fit.blups.get(&row.treated_id) {
                    Some(u) => p += u,
                    None => {
                        if !warned {
                            log::warn!(
                                "household '{}' unknown to the fit; using fixed effects only",
                                row.treated_id
                            );
                            warned = true;
                        }
                    }
                }
            }
            p
        })
        .collect();
    Ok(preds)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnualSaving {
    pub treated_id: String,
    pub year: i32,
    pub mean_gpsf: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonthlyBand {
    pub calendar_month: u8,
    pub q05: f64,
    pub q25: f64,
    pub q50: f64,
    pub q75: f64,
    pub q95: f64,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct MetaSummary {
    /// Mean predicted savings per household per calendar year.
    pub annual: Vec<AnnualSaving>,
    /// Prediction quantiles per calendar month across households.
    pub monthly: Vec<MonthlyBand>,
}

/// Plot-ready summaries: annual per-household means and monthly quantile
/// bands of the (random-effect-inclusive) predictions.
pub fn summarize(fit: &MetaFit, table: &[MetaRow]) -> Result<MetaSummary, MetaError> {
    let preds = predict(fit, table, true)?;

    let mut annual_acc: BTreeMap<(String, i32), Vec<f64>> = BTreeMap::new();
    let mut monthly_acc: BTreeMap<u8, Vec<f64>> = BTreeMap::new();
    for (row, &p) in table.iter().zip(&preds) {
        annual_acc
            .entry((row.treated_id.clone(), row.year))
            .or_default()
            .push(p);
        monthly_acc.entry(row.month).or_default().push(p);
    }

    let annual = annual_acc
        .into_iter()
        .map(|((treated_id, year), ps)| AnnualSaving {
            treated_id,
            year,
            mean_gpsf: mean(&ps),
        })
        .collect();
    let monthly = monthly_acc
        .into_iter()
        .map(|(calendar_month, ps)| MonthlyBand {
            calendar_month,
            q05: quantile(&ps, 0.05),
            q25: quantile(&ps, 0.25),
            q50: quantile(&ps, 0.50),
            q75: quantile(&ps, 0.75),
            q95: quantile(&ps, 0.95),
        })
        .collect();
    Ok(MetaSummary { annual, monthly })
}

/// Writes {calendar_month, q05, q25, q50, q75, q95} rows.
pub fn write_quantile_bands_csv(summary: &MetaSummary, path: &std::path::Path) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["calendar_month", "q05", "q25", "q50", "q75", "q95"])?;
    for b in &summary.monthly {
        w.write_record([
            b.calendar_month.to_string(),
            b.q05.to_string(),
            b.q25.to_string(),
            b.q50.to_string(),
            b.q75.to_string(),
            b.q95.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_annual_means_csv(summary: &MetaSummary, path: &std::path::Path) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["treated_id", "year", "mean_gpsf"])?;
    for a in &summary.annual {
        w.write_record([a.treated_id.clone(), a.year.to_string(), a.mean_gpsf.to_string()])?;
    }
    w.flush()?;
    Ok(())
}
