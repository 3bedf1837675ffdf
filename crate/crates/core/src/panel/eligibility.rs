//! Eligibility screen for treated accounts: minimum pre/post observation
//! counts and the configured default-irrigable-area screen.

use super::UsagePanel;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EligibilityConfig {
    /// Observations required strictly before the inspection month.
    pub min_pre_months: usize,
    /// Observations required at or after the inspection month.
    pub min_post_months: usize,
    /// Known district default values for irrigable area. Accounts whose
    /// irr_area_sf equals one of these exactly are screened out: a default
    /// means the true area is unknown, so per-square-foot savings would be
    /// meaningless.
    pub default_irr_values: Vec<f64>,
}

impl Default for EligibilityConfig {
    fn default() -> Self {
        EligibilityConfig {
            min_pre_months: 24,
            min_post_months: 12,
            default_irr_values: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct EligibilityReport {
    /// (customer_id, reason) for every excluded treated account.
    pub excluded: Vec<(String, String)>,
    /// Exclusion counts keyed by reason.
    pub counts: BTreeMap<String, usize>,
    pub retained: usize,
}

impl EligibilityReport {
    fn exclude(&mut self, id: &str, reason: &str) {
        self.excluded.push((id.to_string(), reason.to_string()));
        *self.counts.entry(reason.to_string()).or_insert(0) += 1;
    }
}

/// Filters the treatment set; accounts and series are untouched. Excluded
/// treated accounts move to `ineligible_treated` so they never re-enter as
/// controls. Filtering is total (no errors) and idempotent.
pub fn eligibility_filter(
    panel: &UsagePanel,
    cfg: &EligibilityConfig,
) -> (UsagePanel, EligibilityReport) {
    let mut out = panel.clone();
    let mut report = EligibilityReport::default();

    let mut retained = BTreeMap::new();
    for (id, event) in &panel.treatments {
        let Some(series) = panel.series_of(id) else {
            report.exclude(id, "missing_series");
            out.ineligible_treated.insert(id.clone());
            continue;
        };
        let pre = event
            .inspection_month
            .diff(series.start)
            .clamp(0, series.len() as i64) as usize;
        let post = series.len() - pre;
        let account = panel.account(id);
        let is_default_area = account.map_or(false, |a| {
            cfg.default_irr_values.iter().any(|&d| d == a.irr_area_sf)
        });
        if pre < cfg.min_pre_months {
            report.exclude(id, "insufficient_pre");
            out.ineligible_treated.insert(id.clone());
        } else if post < cfg.min_post_months {
            report.exclude(id, "insufficient_post");
            out.ineligible_treated.insert(id.clone());
        } else if is_default_area {
            report.exclude(id, "default_irr_area");
            out.ineligible_treated.insert(id.clone());
        } else {
            retained.insert(id.clone(), event.clone());
        }
    }
    report.retained = retained.len();
    out.treatments = retained;
    (out, report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::month::MonthKey;
    use crate::panel::{AccountRecord, TreatmentEvent, UsageSeries};

    fn add_treated(panel: &mut UsagePanel, id: &str, total: usize, pre: i64, irr: f64) {
        let start = MonthKey::new(2013, 1).unwrap();
        panel.accounts.insert(
            id.into(),
            AccountRecord {
                customer_id: id.into(),
                zip_code: "92604".into(),
                hh_size: 3,
                irr_area_sf: irr,
                median_hh_income: 90_000.0,
                population_density: 3500.0,
            },
        );
        panel.series.insert(
            id.into(),
            UsageSeries {
                customer_id: id.into(),
                start,
                usage: vec![12.0; total],
                budget: None,
            },
        );
        panel.treatments.insert(
            id.into(),
            TreatmentEvent {
                customer_id: id.into(),
                inspection_month: start.plus(pre),
                rebate_quantity: irr * 0.4,
                rebate_area_ratio: 0.4,
            },
        );
    }

    #[test]
    fn excludes_23_pre_months() {
        let mut panel = UsagePanel::default();
        add_treated(&mut panel, "short", 36, 23, 1500.0);
        let (filtered, report) = eligibility_filter(&panel, &EligibilityConfig::default());
        assert!(filtered.treatments.is_empty());
        assert_eq!(report.excluded, vec![("short".to_string(), "insufficient_pre".to_string())]);
        assert!(filtered.ineligible_treated.contains("short"));
    }

    #[test]
    fn retains_exact_boundary_24_pre_12_post() {
        let mut panel = UsagePanel::default();
        add_treated(&mut panel, "edge", 36, 24, 1500.0);
        let (filtered, report) = eligibility_filter(&panel, &EligibilityConfig::default());
        assert_eq!(filtered.treatments.len(), 1);
        assert_eq!(report.retained, 1);
    }

    #[test]
    fn default_area_screen_drops_configured_values() {
        let mut panel = UsagePanel::default();
        for i in 0..10 {
            let irr = if i < 3 { 1000.0 } else { 800.0 + i as f64 };
            add_treated(&mut panel, &format!("h{i}"), 40, 26, irr);
        }
        let cfg = EligibilityConfig {
            default_irr_values: vec![1000.0],
            ..EligibilityConfig::default()
        };
        let (filtered, report) = eligibility_filter(&panel, &cfg);
        assert_eq!(filtered.treatments.len(), 7);
        assert_eq!(report.counts["default_irr_area"], 3);
    }

    #[test]
    fn filter_is_idempotent() {
        let mut panel = UsagePanel::default();
        add_treated(&mut panel, "a", 36, 23, 1500.0);
        add_treated(&mut panel, "b", 40, 26, 1200.0);
        let cfg = EligibilityConfig::default();
        let (once, _) = eligibility_filter(&panel, &cfg);
        let (twice, report) = eligibility_filter(&once, &cfg);
        assert_eq!(once, twice);
        assert_eq!(report.retained, 1);
    }
}
