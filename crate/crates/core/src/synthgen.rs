//! Synthetic multi-household panels with known ground-truth effects.
//!
//! Usage is built from an indoor component scaling with household size and
//! an outdoor component proportional to irrigable area times a per-zip
//! seasonal watering demand (gal/sf/month), with multiplicative lognormal
//! noise. Treated households get their post-period usage reduced by
//! `-gpsf_true * rebate_quantity / 748.052` CCF, the exact inverse of the
//! savings conversion, so the unit path is exercised end to end. The
//! per-household effect can also be tied to covariates through a linear
//! link, giving the meta-regression knowable targets.

use crate::impact::GALLONS_PER_CCF;
use crate::month::MonthKey;
use crate::panel::{AccountRecord, TreatmentEvent, UsagePanel, UsageSeries};
use crate::stats::substream;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum GenError {
    #[error("months must be at least 36 to satisfy eligibility, got {0}")]
    TooFewMonths(usize),
    #[error("spec produced {0} negative usage values; lower the effect or noise")]
    NegativeUsage(usize),
    #[error("bad spec: {0}")]
    BadSpec(String),
}

/// The true monthly effect injected into treated households, in gallons per
/// square foot (negative = saving).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum EffectSpec {
    /// No effect; treated and controls are exchangeable post-period.
    Null,
    /// The same gpsf in every post month.
    Constant { gpsf: f64 },
    /// Sinusoid through the calendar: `winter` in January/February,
    /// `summer` at the late-July peak.
    Seasonal { winter: f64, summer: f64 },
}

impl EffectSpec {
    /// True gpsf for a calendar month.
    pub fn gpsf_at(&self, month: MonthKey) -> f64 {
        match *self {
            EffectSpec::Null => 0.0,
            EffectSpec::Constant { gpsf } => gpsf,
            EffectSpec::Seasonal { winter, summer } => {
                let center = (winter + summer) / 2.0;
                let amp = (summer - winter) / 2.0;
                // phase is +1 near late July, so the summer level lands there
                center + amp * phase(month.month)
            }
        }
    }
}

/// Seasonal phase in [-1, 1]: +1 near late July, -1 near late January.
fn phase(month: u8) -> f64 {
    ((month as f64 - 7.5) * 2.0 * std::f64::consts::PI / 12.0).cos()
}

/// Linear link from (centered) covariates into the household effect,
/// in gpsf per covariate unit. Zero by default.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CovariateLinks {
    pub hh_size: f64,
    pub ln_rebate_quantity: f64,
    pub ln_median_income: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GenSpec {
    pub n_zips: usize,
    /// Treated households, spread round-robin across zips.
    pub n_treated: usize,
    pub n_controls_per_zip: usize,
    /// Total panel length; at least 36 (24 pre + 12 post).
    pub months: usize,
    pub start: MonthKey,
    /// Indoor usage per resident, CCF/month.
    pub indoor_ccf_per_person: f64,
    /// Winter floor of outdoor watering demand, gal/sf/month.
    pub outdoor_demand_base: f64,
    /// Seasonal swing of outdoor demand above the floor, gal/sf/month.
    pub outdoor_demand_amplitude: f64,
    /// Lognormal sigma of the multiplicative usage noise.
    pub noise_ln_sd: f64,
    /// Per-zip phase shift of the seasonal cycle, months. Nonzero values
    /// introduce warping between zips' usage patterns.
    pub zip_phase_shift_months: f64,
    pub effect: EffectSpec,
    pub covariate_links: CovariateLinks,
    pub hh_size_range: (u32, u32),
    pub irr_area_range: (f64, f64),
    /// Rebate quantity as a fraction of irrigable area.
    pub rebate_fraction_range: (f64, f64),
    pub income_ln_mean: f64,
    pub income_ln_sd: f64,
    /// Water budget as a multiple of expected usage at load 1; None drops
    /// the budget columns entirely.
    pub budget_factor: Option<f64>,
    pub rng_seed: u64,
}

impl Default for GenSpec {
    fn default() -> Self {
        GenSpec {
            n_zips: 4,
            n_treated: 40,
            n_controls_per_zip: 150,
            months: 60,
            start: MonthKey { year: 2011, month: 1 },
            indoor_ccf_per_person: 2.2,
            outdoor_demand_base: 2.0,
            outdoor_demand_amplitude: 2.0,
            noise_ln_sd: 0.05,
            zip_phase_shift_months: 0.0,
            effect: EffectSpec::Seasonal {
                winter: -1.5,
                summer: -2.7,
            },
            covariate_links: CovariateLinks::default(),
            hh_size_range: (1, 6),
            irr_area_range: (500.0, 3000.0),
            rebate_fraction_range: (0.2, 0.9),
            income_ln_mean: 11.35,
            income_ln_sd: 0.25,
            budget_factor: Some(1.05),
            rng_seed: 1,
        }
    }
}

/// Ground truth for one treated household.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HouseholdTruth {
    pub treated_id: String,
    pub inspection_month: MonthKey,
    pub rebate_quantity: f64,
    /// True gpsf per post month (negative = saved).
    pub true_gpsf: Vec<f64>,
    /// CCF removed from each post month's untreated usage.
    pub ccf_reduction: Vec<f64>,
    /// The usage the household would have had without treatment.
    pub untreated_post_usage: Vec<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub households: BTreeMap<String, HouseholdTruth>,
}

impl GroundTruth {
    pub fn write_csv(&self, path: &std::path::Path) -> Result<(), csv::Error> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["treated_id", "year", "month", "true_gpsf", "ccf_reduction", "untreated_usage_ccf"])?;
        for t in self.households.values() {
            for (i, &g) in t.true_gpsf.iter().enumerate() {
                let m = t.inspection_month.plus(i as i64);
                w.write_record([
                    t.treated_id.clone(),
                    m.year.to_string(),
                    m.month.to_string(),
                    g.to_string(),
                    t.ccf_reduction[i].to_string(),
                    t.untreated_post_usage[i].to_string(),
                ])?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

struct ZipClimate {
    demand_level: f64,
    trend_per_month: f64,
    phase_shift: f64,
}

/// Deterministic panel generation from the spec's seed. Every household's
/// draws come from its own substream, so adding households does not change
/// existing ones.
pub fn generate(spec: &GenSpec) -> Result<(UsagePanel, GroundTruth), GenError> {
    if spec.months < 36 {
        return Err(GenError::TooFewMonths(spec.months));
    }
    if spec.n_zips == 0 || spec.n_treated == 0 {
        return Err(GenError::BadSpec("need at least one zip and one treated household".into()));
    }
    if spec.rebate_fraction_range.0 <= 0.0 || spec.rebate_fraction_range.1 > 1.0 {
        return Err(GenError::BadSpec("rebate fractions must lie in (0, 1]".into()));
    }
    if spec.n_controls_per_zip == 0 {
        return Err(GenError::BadSpec("need controls in each zip".into()));
    }

    let mut panel = UsagePanel::default();
    let mut truth = GroundTruth::default();

    // shared ET series: seasonal sinusoid plus year-to-year weather noise,
    // so it is never an exact linear function of the calendar harmonics
    let mut et_rng = substream(spec.rng_seed, "synthgen-et", 0);
    let et_noise = Normal::new(0.0, 0.15).unwrap();
    for i in 0..spec.months as i64 {
        let m = spec.start.plus(i);
        let et = 2.8 + 2.2 * phase(m.month) + et_noise.sample(&mut et_rng);
        panel.et_series.insert(m, et.max(0.1));
    }

    // per-zip climate
    let mut zip_rng = substream(spec.rng_seed, "synthgen-zip", 0);
    let zips: Vec<(String, ZipClimate)> = (0..spec.n_zips)
        .map(|z| {
            let name = format!("z{:03}", z);
            let climate = ZipClimate {
                demand_level: zip_rng.random_range(0.9..1.1),
                trend_per_month: zip_rng.random_range(-0.001..0.001),
                phase_shift: if spec.zip_phase_shift_months == 0.0 {
                    0.0
                } else {
                    zip_rng.random_range(-spec.zip_phase_shift_months..spec.zip_phase_shift_months)
                },
            };
            (name, climate)
        })
        .collect();

    // densities per zip (static covariate shared within a zip)
    let densities: Vec<f64> = (0..spec.n_zips)
        .map(|_| zip_rng.random_range(1500.0..8000.0))
        .collect();

    let demand_at = |climate: &ZipClimate, m: MonthKey, t: usize| -> f64 {
        let shifted =
            ((m.month as f64 - 7.5 - climate.phase_shift) * 2.0 * std::f64::consts::PI / 12.0).cos();
        let seasonal = spec.outdoor_demand_base + spec.outdoor_demand_amplitude * (shifted + 1.0) / 2.0;
        seasonal * climate.demand_level * (1.0 + climate.trend_per_month * t as f64)
    };

    let mut clamped = 0usize;
    let mut make_household = |id: &str,
                              zip_idx: usize,
                              treated: bool,
                              panel: &mut UsagePanel,
                              truth: &mut GroundTruth|
     -> Result<(), GenError> {
        let mut rng = substream(spec.rng_seed, id, 0);
        let hh_size = rng.random_range(spec.hh_size_range.0..=spec.hh_size_range.1);
        let irr_area = rng.random_range(spec.irr_area_range.0..spec.irr_area_range.1);
        let income = (spec.income_ln_mean + spec.income_ln_sd * standard_normal(&mut rng)).exp();
        // irrigation intensity: how heavily this household waters its area
        let load = rng.random_range(0.7..1.3);
        let climate = &zips[zip_idx].1;

        let expected = |t: usize, m: MonthKey, with_load: f64| -> f64 {
            spec.indoor_ccf_per_person * hh_size as f64
                + with_load * irr_area * demand_at(climate, m, t) / GALLONS_PER_CCF
        };

        // treatment comes first so the effect can be injected while drawing
        let treatment = if treated {
            let rebate_fraction =
                rng.random_range(spec.rebate_fraction_range.0..spec.rebate_fraction_range.1);
            let rebate_quantity = rebate_fraction * irr_area;
            // inspection anywhere that leaves >= 24 pre and >= 12 post
            let max_pre = spec.months - 12;
            let pre_len = rng.random_range(24..=max_pre);
            Some((spec.start.plus(pre_len as i64), rebate_quantity, pre_len))
        } else {
            None
        };

        // covariate-linked effect offset (documented linear link)
        let effect_offset = {
            let l = &spec.covariate_links;
            let mid_hh = (spec.hh_size_range.0 + spec.hh_size_range.1) as f64 / 2.0;
            let mid_ln_rq = ((spec.rebate_fraction_range.0 + spec.rebate_fraction_range.1) / 2.0
                * (spec.irr_area_range.0 + spec.irr_area_range.1)
                / 2.0)
                .ln();
            l.hh_size * (hh_size as f64 - mid_hh)
                + treatment
                    .map(|(_, rq, _)| l.ln_rebate_quantity * (rq.ln() - mid_ln_rq))
                    .unwrap_or(0.0)
                + l.ln_median_income * (income.ln() - spec.income_ln_mean)
        };

        let noise = Normal::new(0.0, spec.noise_ln_sd).unwrap();
        let mut usage = Vec::with_capacity(spec.months);
        let mut budget = Vec::with_capacity(spec.months);
        let mut true_gpsf = Vec::new();
        let mut ccf_reduction = Vec::new();
        let mut untreated_post = Vec::new();
        for t in 0..spec.months {
            let m = spec.start.plus(t as i64);
            let base = expected(t, m, load);
            let untreated = base * noise.sample(&mut rng).exp();
            let mut value = untreated;
            if let Some((inspection, rq, _)) = treatment {
                if m >= inspection {
                    let g = spec.effect.gpsf_at(m) + effect_offset;
                    let reduction = -g * rq / GALLONS_PER_CCF;
                    value = untreated - reduction;
                    true_gpsf.push(g);
                    ccf_reduction.push(reduction);
                    untreated_post.push(untreated);
                }
            }
            if value < 0.0 {
                clamped += 1;
                value = 0.0;
            }
            usage.push(value);
            budget.push(expected(t, m, 1.0));
        }

        panel.accounts.insert(
            id.to_string(),
            AccountRecord {
                customer_id: id.to_string(),
                zip_code: zips[zip_idx].0.clone(),
                hh_size,
                irr_area_sf: irr_area,
                median_hh_income: income,
                population_density: densities[zip_idx],
            },
        );
        panel.series.insert(
            id.to_string(),
            UsageSeries {
                customer_id: id.to_string(),
                start: spec.start,
                usage,
                budget: spec.budget_factor.map(|f| budget.iter().map(|b| f * b).collect()),
            },
        );
        if let Some((inspection, rq, _)) = treatment {
            panel.treatments.insert(
                id.to_string(),
                TreatmentEvent {
                    customer_id: id.to_string(),
                    inspection_month: inspection,
                    rebate_quantity: rq,
                    rebate_area_ratio: rq / irr_area,
                },
            );
            truth.households.insert(
                id.to_string(),
                HouseholdTruth {
                    treated_id: id.to_string(),
                    inspection_month: inspection,
                    rebate_quantity: rq,
                    true_gpsf,
                    ccf_reduction,
                    untreated_post_usage: untreated_post,
                },
            );
        }
        Ok(())
    };

    for i in 0..spec.n_treated {
        let zip_idx = i % spec.n_zips;
        let id = format!("t{:05}", i);
        make_household(&id, zip_idx, true, &mut panel, &mut truth)?;
    }
    for z in 0..spec.n_zips {
        for j in 0..spec.n_controls_per_zip {
            let id = format!("c{:03}x{:05}", z, j);
            make_household(&id, z, false, &mut panel, &mut truth)?;
        }
    }

    if clamped > 0 {
        return Err(GenError::NegativeUsage(clamped));
    }
    Ok((panel, truth))
}

fn standard_normal<R: Rng>(rng: &mut R) -> f64 {
    rand_distr::StandardNormal.sample(rng)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generation_is_deterministic() {
        let spec = GenSpec {
            n_treated: 6,
            n_controls_per_zip: 20,
            n_zips: 2,
            ..GenSpec::default()
        };
        let (p1, t1) = generate(&spec).unwrap();
        let (p2, t2) = generate(&spec).unwrap();
        assert_eq!(p1, p2);
        assert_eq!(t1, t2);
    }

    #[test]
    fn truth_aligns_with_post_period() {
        let spec = GenSpec {
            n_treated: 4,
            n_controls_per_zip: 10,
            n_zips: 1,
            ..GenSpec::default()
        };
        let (panel, truth) = generate(&spec).unwrap();
        for (id, t) in &truth.households {
            let series = panel.series_of(id).unwrap();
            let post_len = series.len() - t.inspection_month.diff(series.start) as usize;
            assert_eq!(t.true_gpsf.len(), post_len);
            assert_eq!(t.ccf_reduction.len(), post_len);
            // injected reduction is recoverable exactly
            let off = t.inspection_month.diff(series.start) as usize;
            for i in 0..post_len {
                let diff = t.untreated_post_usage[i] - series.usage[off + i];
                assert!((diff - t.ccf_reduction[i]).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn no_negative_usage_on_default_spec() {
        let (panel, _) = generate(&GenSpec::default()).unwrap();
        for s in panel.series.values() {
            assert!(s.usage.iter().all(|&u| u >= 0.0));
        }
    }

    #[test]
    fn rejects_short_panels() {
        let spec = GenSpec {
            months: 30,
            ..GenSpec::default()
        };
        assert!(matches!(generate(&spec), Err(GenError::TooFewMonths(30))));
    }

    #[test]
    fn seasonal_effect_hits_calibration_points() {
        let e = EffectSpec::Seasonal {
            winter: -1.5,
            summer: -2.7,
        };
        // late-July peak saving, late-January minimum
        let july = e.gpsf_at(MonthKey::new(2015, 7).unwrap());
        let jan = e.gpsf_at(MonthKey::new(2015, 1).unwrap());
        assert!(july < -2.5, "july {july}");
        assert!(jan > -1.7, "jan {jan}");
    }
}
