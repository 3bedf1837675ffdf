//! Panel store: aligned monthly usage series with treatment metadata.
//!
//! Ingests raw billing and rebate-program CSV exports, applies the cleaning
//! rules (duplicate-rebate removal, row validation, contiguity checks), and
//! exposes per-account series split into pre- and post-treatment windows.

mod eligibility;
mod export;
mod ingest;

pub use eligibility::{eligibility_filter, EligibilityConfig, EligibilityReport};
pub use export::write_panel_csvs;
pub use ingest::{ingest, IngestReport, ReportEntry};

use crate::month::MonthKey;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PanelError {
    #[error("{file}: missing required column '{column}'")]
    MissingColumn { file: String, column: String },
    #[error("failed to read {file}: {source}")]
    Io {
        file: String,
        #[source]
        source: std::io::Error,
    },
    #[error("failed to parse {file}: {source}")]
    Csv {
        file: String,
        #[source]
        source: csv::Error,
    },
    #[error("unknown customer '{0}'")]
    UnknownCustomer(String),
    #[error("customer '{0}' has no retained treatment")]
    NotTreated(String),
    #[error("inspection month {inspection} leaves an empty {side} window for '{customer_id}'")]
    EmptyWindow {
        customer_id: String,
        inspection: MonthKey,
        side: &'static str,
    },
    #[error("usage and budget segments differ in length ({usage} vs {budget})")]
    LengthMismatch { usage: usize, budget: usize },
    #[error("empty segment")]
    EmptySegment,
}

/// Static attributes of one account.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccountRecord {
    pub customer_id: String,
    pub zip_code: String,
    /// Number of permanent residents.
    pub hh_size: u32,
    /// Irrigable area in square feet.
    pub irr_area_sf: f64,
    /// Median household income of the zip, currency/year.
    pub median_hh_income: f64,
    /// Persons per square mile.
    pub population_density: f64,
}

/// One account's contiguous monthly usage, optionally with its water budget.
///
/// `usage[i]` is the consumption (CCF) for calendar month `start.plus(i)`;
/// `budget`, when present, is aligned month-for-month.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UsageSeries {
    pub customer_id: String,
    pub start: MonthKey,
    pub usage: Vec<f64>,
    pub budget: Option<Vec<f64>>,
}

impl UsageSeries {
    pub fn len(&self) -> usize {
        self.usage.len()
    }

    pub fn is_empty(&self) -> bool {
        self.usage.is_empty()
    }

    pub fn end(&self) -> MonthKey {
        self.start.plus(self.usage.len() as i64 - 1)
    }

    pub fn month_at(&self, i: usize) -> MonthKey {
        self.start.plus(i as i64)
    }

    /// Usage values covering [from, from+len), or None if not fully covered.
    pub fn window(&self, from: MonthKey, len: usize) -> Option<&[f64]> {
        let off = from.diff(self.start);
        if off < 0 {
            return None;
        }
        let off = off as usize;
        if off + len > self.usage.len() {
            return None;
        }
        Some(&self.usage[off..off + len])
    }

    pub fn budget_window(&self, from: MonthKey, len: usize) -> Option<&[f64]> {
        let budget = self.budget.as_deref()?;
        let off = from.diff(self.start);
        if off < 0 || off as usize + len > budget.len() {
            return None;
        }
        let off = off as usize;
        Some(&budget[off..off + len])
    }
}

/// One turf-removal rebate with its post-inspection month.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreatmentEvent {
    pub customer_id: String,
    pub inspection_month: MonthKey,
    /// Square feet of turf removed.
    pub rebate_quantity: f64,
    /// rebate_quantity / irr_area_sf, in (0, 1].
    pub rebate_area_ratio: f64,
}

/// Reference evapotranspiration by calendar month, inches.
pub type EtSeries = BTreeMap<MonthKey, f64>;

/// A usage segment anchored at a calendar month.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Window<'a> {
    pub start: MonthKey,
    pub values: &'a [f64],
}

impl Window<'_> {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// The immutable store. Built once by [`ingest`] (or the synthetic
/// generator), then only read — shared references are safe across threads.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct UsagePanel {
    pub accounts: BTreeMap<String, AccountRecord>,
    pub series: BTreeMap<String, UsageSeries>,
    pub treatments: BTreeMap<String, TreatmentEvent>,
    pub et_series: EtSeries,
    /// Treated accounts removed by the eligibility filter. They stay out of
    /// control pools (the treatment still happened) but are not analyzed.
    pub ineligible_treated: BTreeSet<String>,
}

impl UsagePanel {
    pub fn account(&self, id: &str) -> Option<&AccountRecord> {
        self.accounts.get(id)
    }

    pub fn series_of(&self, id: &str) -> Option<&UsageSeries> {
        self.series.get(id)
    }

    pub fn treatment(&self, id: &str) -> Option<&TreatmentEvent> {
        self.treatments.get(id)
    }

    /// Retained treated customer ids, in deterministic (sorted) order.
    pub fn treated_ids(&self) -> Vec<String> {
        self.treatments.keys().cloned().collect()
    }

    /// True if the account was ever treated, retained or not.
    pub fn ever_treated(&self, id: &str) -> bool {
        self.treatments.contains_key(id) || self.ineligible_treated.contains(id)
    }

    pub fn et_at(&self, month: MonthKey) -> Option<f64> {
        self.et_series.get(&month).copied()
    }
}

/// Mean log ratio of usage+1 over budget+1 across the pre-treatment window.
/// Positive values indicate over-budget consumption before turf removal.
/// The +1 offsets keep the ratio defined when either side is zero.
pub fn pre_removal_efficiency(usage: &[f64], budget: &[f64]) -> Result<f64, PanelError> {
    if usage.len() != budget.len() {
        return Err(PanelError::LengthMismatch {
            usage: usage.len(),
            budget: budget.len(),
        });
    }
    if usage.is_empty() {
        return Err(PanelError::EmptySegment);
    }
    let sum: f64 = usage
        .iter()
        .zip(budget)
        .map(|(u, b)| ((u + 1.0) / (b + 1.0)).ln())
        .sum();
    Ok(sum / usage.len() as f64)
}

/// Pre-removal efficiency for a retained treated account, or None when the
/// budget series is missing (the covariate is marked absent, never imputed).
pub fn pre_removal_efficiency_of(panel: &UsagePanel, id: &str) -> Option<f64> {
    let event = panel.treatment(id)?;
    let series = panel.series_of(id)?;
    let pre_len = event.inspection_month.diff(series.start);
    if pre_len <= 0 {
        return None;
    }
    let pre_len = pre_len as usize;
    let usage = series.window(series.start, pre_len)?;
    let budget = series.budget_window(series.start, pre_len)?;
    pre_removal_efficiency(usage, budget).ok()
}

/// Splits a retained treated account's series at its inspection month:
/// pre ends the month before inspection, post starts at inspection.
pub fn split_windows<'a>(
    panel: &'a UsagePanel,
    id: &str,
) -> Result<(Window<'a>, Window<'a>), PanelError> {
    let event = panel
        .treatment(id)
        .ok_or_else(|| PanelError::NotTreated(id.to_string()))?;
    let series = panel
        .series_of(id)
        .ok_or_else(|| PanelError::UnknownCustomer(id.to_string()))?;
    let pre_len = event.inspection_month.diff(series.start);
    if pre_len <= 0 {
        return Err(PanelError::EmptyWindow {
            customer_id: id.to_string(),
            inspection: event.inspection_month,
            side: "pre",
        });
    }
    let pre_len = pre_len as usize;
    if pre_len >= series.len() {
        return Err(PanelError::EmptyWindow {
            customer_id: id.to_string(),
            inspection: event.inspection_month,
            side: "post",
        });
    }
    Ok((
        Window {
            start: series.start,
            values: &series.usage[..pre_len],
        },
        Window {
            start: event.inspection_month,
            values: &series.usage[pre_len..],
        },
    ))
}

/// A month flagged by the outlier screen. Flag-only: nothing is dropped.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OutlierFlag {
    pub customer_id: String,
    pub year: i32,
    pub month: u8,
    pub usage: f64,
    pub threshold: f64,
}

/// Flags months where usage exceeds `k` times the account's reference median
/// (pre-treatment median for treated accounts, whole-series median otherwise).
pub fn flag_outliers(panel: &UsagePanel, k: f64) -> Vec<OutlierFlag> {
    let mut flags = Vec::new();
    for (id, series) in &panel.series {
        let ref_values: &[f64] = match panel.treatment(id) {
            Some(ev) => {
                let pre_len = ev.inspection_month.diff(series.start);
                if pre_len <= 0 {
                    continue;
                }
                &series.usage[..(pre_len as usize).min(series.len())]
            }
            None => &series.usage,
        };
        if ref_values.is_empty() {
            continue;
        }
        let median = crate::stats::quantile(ref_values, 0.5);
        let threshold = k * median;
        if threshold <= 0.0 {
            continue;
        }
        for (i, &u) in series.usage.iter().enumerate() {
            if u > threshold {
                let m = series.month_at(i);
                flags.push(OutlierFlag {
                    customer_id: id.clone(),
                    year: m.year,
                    month: m.month,
                    usage: u,
                    threshold,
                });
            }
        }
    }
    flags
}

#[cfg(test)]
mod tests {
    use super::*;

    fn month(y: i32, m: u8) -> MonthKey {
        MonthKey::new(y, m).unwrap()
    }

    fn panel_with_series(len: usize, inspection_offset: i64) -> UsagePanel {
        let start = month(2013, 1);
        let mut panel = UsagePanel::default();
        panel.accounts.insert(
            "a1".into(),
            AccountRecord {
                customer_id: "a1".into(),
                zip_code: "92604".into(),
                hh_size: 3,
                irr_area_sf: 1200.0,
                median_hh_income: 85_000.0,
                population_density: 4000.0,
            },
        );
        panel.series.insert(
            "a1".into(),
            UsageSeries {
                customer_id: "a1".into(),
                start,
                usage: (0..len).map(|i| 10.0 + i as f64).collect(),
                budget: None,
            },
        );
        panel.treatments.insert(
            "a1".into(),
            TreatmentEvent {
                customer_id: "a1".into(),
                inspection_month: start.plus(inspection_offset),
                rebate_quantity: 600.0,
                rebate_area_ratio: 0.5,
            },
        );
        panel
    }

    #[test]
    fn efficiency_zero_when_usage_equals_budget() {
        let xs = [3.0, 7.0, 0.5];
        assert_eq!(pre_removal_efficiency(&xs, &xs).unwrap(), 0.0);
    }

    #[test]
    fn efficiency_matches_direct_formula() {
        let v = pre_removal_efficiency(&[9.0], &[4.0]).unwrap();
        assert!((v - (10.0f64 / 5.0).ln()).abs() < 1e-12);
        assert!((v - 0.6931).abs() < 1e-4);
    }

    #[test]
    fn efficiency_handles_all_zero_series() {
        let v = pre_removal_efficiency(&[0.0, 0.0], &[0.0, 0.0]).unwrap();
        assert_eq!(v, 0.0);
    }

    #[test]
    fn efficiency_rejects_length_mismatch() {
        assert!(matches!(
            pre_removal_efficiency(&[1.0, 2.0], &[1.0]),
            Err(PanelError::LengthMismatch { .. })
        ));
    }

    #[test]
    fn split_36_month_series_at_month_25() {
        let panel = panel_with_series(36, 24);
        let (pre, post) = split_windows(&panel, "a1").unwrap();
        assert_eq!(pre.len(), 24);
        assert_eq!(post.len(), 12);
        assert_eq!(post.start, month(2015, 1));
        // concatenation reproduces the original series
        let rebuilt: Vec<f64> = pre.values.iter().chain(post.values).copied().collect();
        assert_eq!(rebuilt, panel.series_of("a1").unwrap().usage);
    }

    #[test]
    fn split_60_month_series_at_month_49() {
        let panel = panel_with_series(60, 48);
        let (pre, post) = split_windows(&panel, "a1").unwrap();
        assert_eq!((pre.len(), post.len()), (48, 12));
    }

    #[test]
    fn split_rejects_inspection_at_first_month() {
        let panel = panel_with_series(36, 0);
        assert!(matches!(
            split_windows(&panel, "a1"),
            Err(PanelError::EmptyWindow { side: "pre", .. })
        ));
    }

    #[test]
    fn split_rejects_unknown_customer() {
        let panel = panel_with_series(36, 24);
        assert!(matches!(
            split_windows(&panel, "nobody"),
            Err(PanelError::NotTreated(_))
        ));
    }

    #[test]
    fn outlier_flags_use_pre_period_median() {
        let mut panel = panel_with_series(36, 24);
        // spike in the post period: pre median is ~21.5, k=10 threshold 215
        panel.series.get_mut("a1").unwrap().usage[30] = 500.0;
        let flags = flag_outliers(&panel, 10.0);
        assert_eq!(flags.len(), 1);
        assert_eq!(flags[0].usage, 500.0);
    }
}
