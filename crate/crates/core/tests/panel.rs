//! Ingestion fixtures, the export/ingest round trip, and panel properties.

mod common;

use proptest::prelude::*;
use turfimpact::panel::{
    eligibility_filter, ingest, pre_removal_efficiency, split_windows, write_panel_csvs,
    EligibilityConfig, PanelError,
};
use turfimpact::synthgen::{generate, GenSpec};

fn write(dir: &std::path::Path, name: &str, content: &str) -> std::path::PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, content).unwrap();
    p
}

const ET_TWO_MONTHS: &str = "year,month,et0_inches\n2014,1,1.5\n2014,2,1.8\n";

fn usage_header() -> String {
    "customer_id,year,month,usage_ccf,hh_size,irr_area_sf,zip_code,median_hh_income,population_density\n".to_string()
}

fn usage_rows(id: &str, months: &[(i32, u8)], values: &[&str]) -> String {
    months
        .iter()
        .zip(values)
        .map(|((y, m), v)| format!("{id},{y},{m},{v},3,1200,90001,85000,4000\n"))
        .collect()
}

#[test]
fn duplicate_rebates_drop_the_account_from_treatments() {
    let dir = tempfile::tempdir().unwrap();
    let months: Vec<(i32, u8)> = (0..3).map(|i| (2014, i + 1)).collect();
    let usage = usage_header()
        + &usage_rows("a1", &months, &["10", "11", "12"])
        + &usage_rows("a2", &months, &["9", "9", "9"]);
    let rebates = "customer_id,inspection_year,inspection_month,rebate_quantity_sf\n\
                   a1,2014,2,500\n\
                   a1,2014,3,300\n\
                   a2,2014,2,400\n";
    let u = write(dir.path(), "usage.csv", &usage);
    let r = write(dir.path(), "rebates.csv", rebates);
    let e = write(dir.path(), "et.csv", ET_TWO_MONTHS);
    let (panel, report) = ingest(&u, &r, &e).unwrap();
    assert!(panel.treatment("a1").is_none(), "duplicate-rebate account must be dropped");
    assert!(panel.treatment("a2").is_some());
    assert_eq!(report.duplicate_treatment_ids, vec!["a1".to_string()]);
}

#[test]
fn empty_rebate_file_yields_zero_treatments() {
    let dir = tempfile::tempdir().unwrap();
    let months: Vec<(i32, u8)> = (0..2).map(|i| (2014, i + 1)).collect();
    let u = write(dir.path(), "usage.csv", &(usage_header() + &usage_rows("a1", &months, &["10", "11"])));
    let r = write(
        dir.path(),
        "rebates.csv",
        "customer_id,inspection_year,inspection_month,rebate_quantity_sf\n",
    );
    let e = write(dir.path(), "et.csv", ET_TWO_MONTHS);
    let (panel, report) = ingest(&u, &r, &e).unwrap();
    assert!(panel.treatments.is_empty());
    assert_eq!(panel.accounts.len(), 1);
    assert!(report.row_issues.is_empty());
}

#[test]
fn malformed_usage_value_drops_one_account_with_one_report_entry() {
    let dir = tempfile::tempdir().unwrap();
    let months: Vec<(i32, u8)> = (0..3).map(|i| (2014, i + 1)).collect();
    let usage = usage_header()
        + &usage_rows("a1", &months, &["10", "11", "12"])
        + &usage_rows("a2", &months, &["9", "oops", "9"])
        + &usage_rows("a3", &months, &["8", "8", "8"]);
    let u = write(dir.path(), "usage.csv", &usage);
    let r = write(
        dir.path(),
        "rebates.csv",
        "customer_id,inspection_year,inspection_month,rebate_quantity_sf\n",
    );
    let e = write(dir.path(), "et.csv", ET_TWO_MONTHS);
    let (panel, report) = ingest(&u, &r, &e).unwrap();
    assert_eq!(panel.accounts.len(), 2);
    assert!(!panel.accounts.contains_key("a2"));
    assert_eq!(report.row_issues.len(), 1);
    assert_eq!(report.row_issues[0].field, "usage_ccf");
    assert_eq!(report.row_issues[0].row, 6); // header + 3 a1 rows + second a2 row
    assert_eq!(report.dropped_accounts, vec![("a2".to_string(), "row_parse_failure".to_string())]);
}

#[test]
fn missing_required_column_names_it() {
    let dir = tempfile::tempdir().unwrap();
    let u = write(
        dir.path(),
        "usage.csv",
        "customer_id,year,month,usage_ccf,hh_size,zip_code,median_hh_income,population_density\na,2014,1,3,2,z,5,6\n",
    );
    let r = write(dir.path(), "rebates.csv", "");
    let e = write(dir.path(), "et.csv", ET_TWO_MONTHS);
    match ingest(&u, &r, &e) {
        Err(PanelError::MissingColumn { column, .. }) => assert_eq!(column, "irr_area_sf"),
        other => panic!("expected missing-column error, got {other:?}"),
    }
}

#[test]
fn unparseable_month_token_reports_line_number() {
    let dir = tempfile::tempdir().unwrap();
    let usage = usage_header() + "a1,2014,Jan,10,3,1200,90001,85000,4000\n";
    let u = write(dir.path(), "usage.csv", &usage);
    let r = write(
        dir.path(),
        "rebates.csv",
        "customer_id,inspection_year,inspection_month,rebate_quantity_sf\n",
    );
    let e = write(dir.path(), "et.csv", ET_TWO_MONTHS);
    let (_, report) = ingest(&u, &r, &e).unwrap();
    assert!(report
        .row_issues
        .iter()
        .any(|i| i.row == 2 && i.reason.contains("month token")));
}

#[test]
fn noncontiguous_months_drop_the_account() {
    let dir = tempfile::tempdir().unwrap();
    let usage = usage_header() + &usage_rows("a1", &[(2014, 1), (2014, 3)], &["10", "12"]);
    let u = write(dir.path(), "usage.csv", &usage);
    let r = write(
        dir.path(),
        "rebates.csv",
        "customer_id,inspection_year,inspection_month,rebate_quantity_sf\n",
    );
    let e = write(dir.path(), "et.csv", ET_TWO_MONTHS);
    let (panel, report) = ingest(&u, &r, &e).unwrap();
    assert!(panel.accounts.is_empty());
    assert_eq!(report.dropped_accounts[0].1, "noncontiguous_months");
}

#[test]
fn rebate_beyond_irrigable_area_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let months: Vec<(i32, u8)> = (0..2).map(|i| (2014, i + 1)).collect();
    let u = write(dir.path(), "usage.csv", &(usage_header() + &usage_rows("a1", &months, &["10", "11"])));
    let r = write(
        dir.path(),
        "rebates.csv",
        "customer_id,inspection_year,inspection_month,rebate_quantity_sf\na1,2014,2,2000\n",
    );
    let e = write(dir.path(), "et.csv", ET_TWO_MONTHS);
    let (panel, report) = ingest(&u, &r, &e).unwrap();
    assert!(panel.treatments.is_empty());
    assert!(report.row_issues.iter().any(|i| i.reason.contains("ratio")));
}

#[test]
fn export_then_ingest_round_trips_the_panel() {
    let spec = GenSpec {
        n_treated: 5,
        n_controls_per_zip: 8,
        n_zips: 2,
        months: 40,
        ..GenSpec::default()
    };
    let (panel, _) = generate(&spec).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let [u, r, e] = write_panel_csvs(&panel, dir.path()).unwrap();
    let (rebuilt, report) = ingest(&u, &r, &e).unwrap();
    assert!(report.row_issues.is_empty(), "{:?}", report.row_issues);
    assert_eq!(panel, rebuilt);
}

#[test]
fn ingestion_report_serializes_documented_lines() {
    let dir = tempfile::tempdir().unwrap();
    let usage = usage_header() + "a1,2014,1,bad,3,1200,90001,85000,4000\n";
    let u = write(dir.path(), "usage.csv", &usage);
    let r = write(
        dir.path(),
        "rebates.csv",
        "customer_id,inspection_year,inspection_month,rebate_quantity_sf\n",
    );
    let e = write(dir.path(), "et.csv", ET_TWO_MONTHS);
    let (_, report) = ingest(&u, &r, &e).unwrap();
    let out = dir.path().join("report.jsonl");
    report.write_jsonl(&out).unwrap();
    let text = std::fs::read_to_string(&out).unwrap();
    let first: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
    assert!(first.get("row").is_some() && first.get("reason").is_some() && first.get("field").is_some());
}

proptest! {
    /// Scaling both (usage+1) and (budget+1) by a common factor leaves the
    /// mean log ratio unchanged.
    #[test]
    fn efficiency_invariant_under_common_offset_scaling(
        usage in proptest::collection::vec(0.0f64..60.0, 1..30),
        factor in 0.2f64..5.0,
    ) {
        let budget: Vec<f64> = usage.iter().enumerate().map(|(i, u)| u * 0.8 + i as f64 * 0.1).collect();
        let base = pre_removal_efficiency(&usage, &budget).unwrap();
        let usage2: Vec<f64> = usage.iter().map(|u| factor * (u + 1.0) - 1.0).collect();
        let budget2: Vec<f64> = budget.iter().map(|b| factor * (b + 1.0) - 1.0).collect();
        let scaled = pre_removal_efficiency(&usage2, &budget2).unwrap();
        prop_assert!((base - scaled).abs() < 1e-9, "{base} vs {scaled}");
    }

    /// Window lengths always partition the series.
    #[test]
    fn split_windows_partitions_series(pre_len in 1usize..50, post_len in 1usize..30) {
        let total = pre_len + post_len;
        let start = turfimpact::MonthKey::new(2010, 6).unwrap();
        let mut panel = turfimpact::UsagePanel::default();
        panel.series.insert("x".into(), turfimpact::panel::UsageSeries {
            customer_id: "x".into(),
            start,
            usage: (0..total).map(|i| i as f64).collect(),
            budget: None,
        });
        panel.treatments.insert("x".into(), turfimpact::panel::TreatmentEvent {
            customer_id: "x".into(),
            inspection_month: start.plus(pre_len as i64),
            rebate_quantity: 100.0,
            rebate_area_ratio: 0.5,
        });
        let (pre, post) = split_windows(&panel, "x").unwrap();
        prop_assert_eq!(pre.len() + post.len(), total);
        prop_assert_eq!(pre.len(), pre_len);
        prop_assert_eq!(post.start, start.plus(pre_len as i64));
    }
}

#[test]
fn eligibility_filter_composes_with_generated_panels() {
    let spec = GenSpec {
        n_treated: 10,
        n_controls_per_zip: 5,
        n_zips: 2,
        months: 48,
        ..GenSpec::default()
    };
    let (panel, _) = generate(&spec).unwrap();
    let (filtered, report) = eligibility_filter(&panel, &EligibilityConfig::default());
    // the generator always leaves >= 24 pre and >= 12 post
    assert_eq!(report.retained, 10);
    assert_eq!(filtered.treatments.len(), 10);
    let (again, _) = eligibility_filter(&filtered, &EligibilityConfig::default());
    assert_eq!(filtered, again);
}
