//! Batch causal-impact estimation for household conservation programs.
//!
//! Given monthly billed usage for a population of accounts and a record of
//! program participation (here: turf-removal rebates), the pipeline estimates
//! per-household savings and aggregates them into population-level findings:
//!
//! 1. **Matching** — each participating household is paired with the most
//!    similar non-participating accounts from its own zip code, ranked by a
//!    weighted blend of Pearson correlation and dynamic-time-warping distance
//!    over pre-treatment usage ([`matching`]).
//! 2. **Modeling** — a Bayesian structural time-series model (local linear
//!    trend plus a spike-and-slab regression on the matched controls) is fit
//!    to the pre-period and produces posterior draws of the counterfactual
//!    untreated consumption for the post-period ([`bsts`]).
//! 3. **Meta-regression** — per-month savings, normalized to gallons per
//!    square foot of turf removed ([`impact`]), are pooled across households
//!    in a weighted mixed-effects meta-regression with a random intercept per
//!    household ([`meta`]).
//!
//! The [`orchestrator`] runs the whole workflow across households, either
//! sequentially or data-parallel (rayon, behind the `parallel` feature), with
//! per-household RNG substreams so results are identical for any worker count
//! or execution scheme. [`synthgen`] generates synthetic panels with known
//! ground-truth effects for end-to-end validation.

pub mod bsts;
pub mod impact;
pub mod matching;
pub mod meta;
pub mod month;
pub mod orchestrator;
pub mod panel;
pub mod stats;
pub mod synthgen;

pub use month::MonthKey;
pub use panel::UsagePanel;
