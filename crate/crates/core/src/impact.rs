//! Converts counterfactual posteriors into normalized monthly savings.
//!
//! Billing is in CCF (hundred cubic feet); savings are reported in gallons
//! per square foot of turf removed per month. Negative values denote
//! savings: the observation fell below the predicted untreated consumption.

use crate::bsts::CounterfactualPosterior;
use crate::month::MonthKey;
use crate::panel::{pre_removal_efficiency_of, split_windows, UsagePanel};
use crate::stats::{mean, sample_variance};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use thiserror::Error;

/// Gallons per CCF, to the full printed precision of the billing unit.
pub const GALLONS_PER_CCF: f64 = 748.052;

/// Variance floor keeping inverse-variance weights finite (gpsf² units).
pub const VARIANCE_FLOOR: f64 = 1e-8;

#[derive(Debug, Error)]
pub enum ImpactError {
    #[error("rebate quantity must be positive, got {0}")]
    BadRebateQuantity(f64),
    #[error("need at least {required} draws, got {found}")]
    TooFewDraws { found: usize, required: usize },
    #[error("posterior covers {draws} months but {observed} were observed")]
    MonthMismatch { draws: usize, observed: usize },
}

/// Savings for one month: per-draw impact is
/// 748.052 * (observed - draw) / rebate_quantity; the point estimate is the
/// draw mean and `s` the draw variance, floored at [`VARIANCE_FLOOR`].
pub fn to_gpsf(
    observed_ccf: f64,
    counterfactual_draws: &[f64],
    rebate_quantity: f64,
) -> Result<(f64, f64), ImpactError> {
    if rebate_quantity <= 0.0 || !rebate_quantity.is_finite() {
        return Err(ImpactError::BadRebateQuantity(rebate_quantity));
    }
    if counterfactual_draws.len() < 100 {
        return Err(ImpactError::TooFewDraws {
            found: counterfactual_draws.len(),
            required: 100,
        });
    }
    let scale = GALLONS_PER_CCF / rebate_quantity;
    let impacts: Vec<f64> = counterfactual_draws
        .iter()
        .map(|draw| scale * (observed_ccf - draw))
        .collect();
    Ok((mean(&impacts), sample_variance(&impacts).max(VARIANCE_FLOOR)))
}

/// One month of normalized savings for one household.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonthlyImpact {
    pub year: i32,
    pub month: u8,
    /// Gallons per square foot; negative = saved.
    pub gpsf: f64,
    /// Estimated variance of gpsf from the posterior draws.
    pub s: f64,
}

/// All post-period months of one household.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HouseholdImpact {
    pub treated_id: String,
    pub months: Vec<MonthlyImpact>,
}

/// Converts a whole posterior into the household's monthly savings series.
pub fn impact_series(
    treated_id: &str,
    observed_post: &[f64],
    posterior: &CounterfactualPosterior,
    rebate_quantity: f64,
) -> Result<HouseholdImpact, ImpactError> {
    let q = posterior.point.len();
    if observed_post.len() != q {
        return Err(ImpactError::MonthMismatch {
            draws: q,
            observed: observed_post.len(),
        });
    }
    let mut months = Vec::with_capacity(q);
    for (t, month) in posterior.months().enumerate() {
        let draws = posterior.draws.column(t);
        let (gpsf, s) = to_gpsf(observed_post[t], &draws, rebate_quantity)?;
        months.push(MonthlyImpact {
            year: month.year,
            month: month.month,
            gpsf,
            s,
        });
    }
    Ok(HouseholdImpact {
        treated_id: treated_id.to_string(),
        months,
    })
}

/// One row of the meta-regression table: a (household, month) savings
/// estimate with its variance and the attached moderator covariates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetaRow {
    pub treated_id: String,
    pub year: i32,
    pub month: u8,
    /// Study-month index, 1 at the earliest month in the assembled table.
    pub t_index: usize,
    pub gpsf: f64,
    pub s: f64,
    pub hh_size: f64,
    pub pre_removal_efficiency: f64,
    pub ln_rebate_quantity: f64,
    pub ln_rebate_area_ratio: f64,
    pub ln_median_income: f64,
    pub population_density: f64,
    pub et0: f64,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct AssembleReport {
    /// Rows dropped, keyed by reason.
    pub dropped: BTreeMap<String, usize>,
    pub rows: usize,
    pub households: usize,
}

/// Options for assembling the meta table.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct AssembleOptions {
    /// When set, rows with |gpsf| above this quantile of the table are
    /// trimmed (robustness flag; default keeps every row).
    pub trim_abs_gpsf_quantile: Option<f64>,
}

/// Joins household impacts with panel covariates into the flat meta table.
/// Households missing a covariate (no budget series, unloggable values,
/// missing ET months) contribute no rows; every drop is counted.
pub fn assemble_meta_table(
    panel: &UsagePanel,
    impacts: &[HouseholdImpact],
    options: &AssembleOptions,
) -> (Vec<MetaRow>, AssembleReport) {
    let mut report = AssembleReport::default();
    let drop = |reason: &str, count: usize, report: &mut AssembleReport| {
        *report.dropped.entry(reason.to_string()).or_insert(0) += count;
    };

    let mut rows = Vec::new();
    let mut households = std::collections::BTreeSet::new();
    for hh in impacts {
        let n = hh.months.len();
        let (Some(account), Some(event)) =
            (panel.account(&hh.treated_id), panel.treatment(&hh.treated_id))
        else {
            drop("unknown_household", n, &mut report);
            continue;
        };
        let Some(efficiency) = pre_removal_efficiency_of(panel, &hh.treated_id) else {
            drop("missing_budget_series", n, &mut report);
            continue;
        };
        if event.rebate_quantity <= 0.0 {
            drop("nonpositive_rebate_quantity", n, &mut report);
            continue;
        }
        if event.rebate_area_ratio <= 0.0 {
            drop("nonpositive_rebate_area_ratio", n, &mut report);
            continue;
        }
        if account.median_hh_income <= 0.0 {
            drop("nonpositive_income", n, &mut report);
            continue;
        }
        for m in &hh.months {
            let month = MonthKey::new(m.year, m.month).expect("impact month");
            let Some(et0) = panel.et_at(month) else {
                drop("missing_et", 1, &mut report);
                continue;
            };
            if !m.gpsf.is_finite() || !(m.s > 0.0) {
                drop("nonfinite_impact", 1, &mut report);
                continue;
            }
            households.insert(hh.treated_id.clone());
            rows.push(MetaRow {
                treated_id: hh.treated_id.clone(),
                year: m.year,
                month: m.month,
                t_index: 0, // assigned below
                gpsf: m.gpsf,
                s: m.s,
                hh_size: account.hh_size as f64,
                pre_removal_efficiency: efficiency,
                ln_rebate_quantity: event.rebate_quantity.ln(),
                ln_rebate_area_ratio: event.rebate_area_ratio.ln(),
                ln_median_income: account.median_hh_income.ln(),
                population_density: account.population_density,
                et0,
            });
        }
    }

    if let Some(q) = options.trim_abs_gpsf_quantile {
        let abs: Vec<f64> = rows.iter().map(|r| r.gpsf.abs()).collect();
        if !abs.is_empty() {
            let cut = crate::stats::quantile(&abs, q);
            let before = rows.len();
            rows.retain(|r| r.gpsf.abs() <= cut);
            drop("trimmed_extreme_gpsf", before - rows.len(), &mut report);
        }
    }

    // study-month index: t = 1 at the earliest month present
    if let Some(first) = rows
        .iter()
        .map(|r| MonthKey::new(r.year, r.month).unwrap())
        .min()
    {
        for r in &mut rows {
            r.t_index = (MonthKey::new(r.year, r.month).unwrap().diff(first) + 1) as usize;
        }
    }
    rows.sort_by(|a, b| {
        a.treated_id
            .cmp(&b.treated_id)
            .then(a.t_index.cmp(&b.t_index))
    });
    report.rows = rows.len();
    report.households = households.len();
    (rows, report)
}

/// Writes the meta table in the documented column order.
pub fn write_meta_table_csv(rows: &[MetaRow], path: &std::path::Path) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "treated_id",
        "year",
        "month",
        "t_index",
        "gpsf",
        "s",
        "hh_size",
        "pre_removal_efficiency",
        "ln_rebate_quantity",
        "ln_rebate_area_ratio",
        "ln_median_income",
        "population_density",
        "et0",
    ])?;
    for r in rows {
        w.write_record([
            r.treated_id.clone(),
            r.year.to_string(),
            r.month.to_string(),
            r.t_index.to_string(),
            r.gpsf.to_string(),
            r.s.to_string(),
            r.hh_size.to_string(),
            r.pre_removal_efficiency.to_string(),
            r.ln_rebate_quantity.to_string(),
            r.ln_rebate_area_ratio.to_string(),
            r.ln_median_income.to_string(),
            r.population_density.to_string(),
            r.et0.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Observed post-period usage for a retained treated household.
pub fn observed_post_usage(panel: &UsagePanel, id: &str) -> Option<Vec<f64>> {
    let (_, post) = split_windows(panel, id).ok()?;
    Some(post.values.to_vec())
}
