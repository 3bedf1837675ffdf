//! Scheme and worker invariance, failure isolation, and resume behavior on
//! compact synthetic panels.

use turfimpact::orchestrator::{
    run_pipeline, sensitivity_grid, speedup_report, HouseholdStatus, RunPlan, Scheme,
    SensitivityGrid,
};
use turfimpact::panel::{eligibility_filter, EligibilityConfig};
use turfimpact::synthgen::{generate, EffectSpec, GenSpec};
use turfimpact::UsagePanel;

fn small_panel(n_treated: usize) -> UsagePanel {
    let spec = GenSpec {
        n_treated,
        n_controls_per_zip: 24,
        n_zips: 2,
        months: 40,
        effect: EffectSpec::Constant { gpsf: -2.0 },
        rng_seed: 42,
        ..GenSpec::default()
    };
    let (panel, _) = generate(&spec).unwrap();
    eligibility_filter(&panel, &EligibilityConfig::default()).0
}

fn small_plan() -> RunPlan {
    let mut plan = RunPlan::default();
    plan.match_cfg.min_pool = 10;
    plan.match_cfg.zip_sample_size = 20;
    plan.bsts_cfg.n_iterations = 250;
    plan.bsts_cfg.n_burn = 50;
    plan.master_seed = 7;
    plan
}

fn impacts_of(report: &turfimpact::orchestrator::RunReport) -> Vec<String> {
    report
        .households
        .iter()
        .map(|(id, s)| format!("{id}:{s:?}"))
        .collect()
}

#[test]
fn all_schemes_and_worker_counts_agree_exactly() {
    let panel = small_panel(8);
    let base = small_plan();

    let mut reference: Option<(Vec<String>, Vec<f64>)> = None;
    for (scheme, workers) in [
        (Scheme::Sequential, 1),
        (Scheme::PerHousehold, 1),
        (Scheme::PerHousehold, 4),
        (Scheme::SplitCandidates, 4),
    ] {
        let mut plan = base.clone();
        plan.scheme = scheme;
        plan.workers = workers;
        let report = run_pipeline(&panel, &plan, None).unwrap();
        let statuses = impacts_of(&report);
        let estimates: Vec<f64> = report.meta_fit.coefficients.iter().map(|c| c.estimate).collect();
        match &reference {
            None => reference = Some((statuses, estimates)),
            Some((s0, e0)) => {
                assert_eq!(&statuses, s0, "{scheme:?} workers={workers}");
                assert_eq!(&estimates, e0, "{scheme:?} workers={workers}");
            }
        }
    }
}

#[test]
fn shards_partition_the_sampled_pool() {
    use turfimpact::matching::candidate_pool;
    let panel = small_panel(4);
    let plan = small_plan();
    let cfg = turfimpact::matching::MatchConfig {
        rng_seed: 3,
        min_pool: 10,
        zip_sample_size: 20,
        ..plan.match_cfg.clone()
    };
    let id = panel.treated_ids()[0].clone();
    let (pool, _) = candidate_pool(&panel, &id, &cfg).unwrap();
    let shards = 3;
    let shard_size = pool.len().div_ceil(shards);
    let chunks: Vec<&[String]> = pool.chunks(shard_size).collect();
    assert!(chunks.len() <= shards);
    let mut seen = std::collections::BTreeSet::new();
    for c in &chunks {
        for id in *c {
            assert!(seen.insert(id.clone()), "shards overlap at {id}");
        }
    }
    assert_eq!(seen.len(), pool.len(), "shards must cover the pool");
}

#[test]
fn nan_in_one_treated_household_fails_only_that_household() {
    let mut panel = small_panel(10);
    let victim = panel.treated_ids()[2].clone();
    panel.series.get_mut(&victim).unwrap().usage[30] = f64::NAN;

    let clean = run_pipeline(&small_panel(10), &small_plan(), None).unwrap();
    let poisoned = run_pipeline(&panel, &small_plan(), None).unwrap();

    for ((id_c, st_c), (id_p, st_p)) in clean.households.iter().zip(&poisoned.households) {
        assert_eq!(id_c, id_p);
        if id_p == &victim {
            assert!(matches!(st_p, HouseholdStatus::Failed { .. }), "victim: {st_p:?}");
        } else {
            assert_eq!(format!("{st_c:?}"), format!("{st_p:?}"), "{id_c}");
        }
    }
    assert_eq!(poisoned.n_failed, 1);
}

#[test]
fn run_report_covers_every_retained_household_once() {
    let panel = small_panel(8);
    let report = run_pipeline(&panel, &small_plan(), None).unwrap();
    let mut ids: Vec<&str> = report.households.iter().map(|(id, _)| id.as_str()).collect();
    let n = ids.len();
    ids.dedup();
    assert_eq!(n, ids.len());
    assert_eq!(n, panel.treated_ids().len());
    assert_eq!(report.n_ok + report.n_skipped + report.n_failed, n);
}

#[test]
fn rerun_resumes_from_checkpoints_and_reproduces_outputs() {
    let panel = small_panel(8);
    let plan = small_plan();
    let dir = tempfile::tempdir().unwrap();
    let first = run_pipeline(&panel, &plan, Some(dir.path())).unwrap();
    let impacts1 = std::fs::read(dir.path().join("impacts.csv")).unwrap();
    let fit1 = std::fs::read(dir.path().join("meta_fit.csv")).unwrap();

    // second run into the same directory must resume and agree bitwise
    let second = run_pipeline(&panel, &plan, Some(dir.path())).unwrap();
    let impacts2 = std::fs::read(dir.path().join("impacts.csv")).unwrap();
    let fit2 = std::fs::read(dir.path().join("meta_fit.csv")).unwrap();
    assert_eq!(impacts1, impacts2);
    assert_eq!(fit1, fit2);
    assert_eq!(first.n_ok, second.n_ok);

    // artifacts exist per household
    for (id, status) in &first.households {
        if matches!(status, HouseholdStatus::Ok) {
            assert!(dir.path().join("matches").join(format!("{id}.jsonl")).exists());
            assert!(dir.path().join("posteriors").join(format!("{id}.jsonl")).exists());
            assert!(dir.path().join("checkpoints").join(format!("{id}.json")).exists());
        }
    }
    assert!(dir.path().join("report.json").exists());
}

#[test]
fn fresh_directories_reproduce_byte_identical_csvs() {
    let panel = small_panel(8);
    let plan = small_plan();
    let dir1 = tempfile::tempdir().unwrap();
    let dir2 = tempfile::tempdir().unwrap();
    run_pipeline(&panel, &plan, Some(dir1.path())).unwrap();
    run_pipeline(&panel, &plan, Some(dir2.path())).unwrap();
    for f in ["impacts.csv", "meta_fit.csv", "quantile_bands.csv", "annual_means.csv"] {
        let a = std::fs::read(dir1.path().join(f)).unwrap();
        let b = std::fs::read(dir2.path().join(f)).unwrap();
        assert_eq!(a, b, "{f} differs across fresh runs");
    }
}

#[test]
fn sensitivity_grid_emits_full_cartesian_product() {
    let panel = small_panel(5);
    let plan = small_plan();
    let grid = SensitivityGrid {
        warping_limits: vec![0, 1],
        alphas: vec![0.0, 0.5],
        num_matches: vec![4],
    };
    let report = sensitivity_grid(&panel, &plan, &grid, 3);
    assert_eq!(report.cells.len(), 4);
    assert_eq!(report.sample_ids.len(), 3);
    // alpha = 0 cells skip DTW, so the warping limit cannot matter
    let a0: Vec<&turfimpact::orchestrator::CellResult> =
        report.cells.iter().filter(|c| c.alpha == 0.0).collect();
    assert_eq!(a0.len(), 2);
    assert_eq!(a0[0].mean_gpsf, a0[1].mean_gpsf);
}

#[test]
fn speedup_report_counts_dtw_elimination() {
    let panel = small_panel(4);
    let mut with_dtw = small_plan();
    with_dtw.scheme = Scheme::Sequential;
    let mut without_dtw = with_dtw.clone();
    without_dtw.match_cfg.alpha = 0.0;
    let report = speedup_report(
        &panel,
        &[("alpha_default".into(), with_dtw), ("alpha_zero".into(), without_dtw)],
    );
    assert_eq!(report.rows.len(), 2);
    assert!(report.rows[0].dtw_calls > 0);
    assert_eq!(report.rows[1].dtw_calls, 0);
}
