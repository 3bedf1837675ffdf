//! CSV ingestion with a row-level validation report.
//!
//! Rows that fail type or range checks are collected in the report, never
//! silently dropped. An account with any bad usage row (or a gap in its
//! months) is excluded whole, since a series with holes cannot be aligned.

use super::{AccountRecord, PanelError, TreatmentEvent, UsagePanel, UsageSeries};
use crate::month::MonthKey;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

/// One problem found during ingestion: the 1-based line in the source file,
/// the field involved, and why it was rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportEntry {
    pub row: u64,
    pub reason: String,
    pub field: String,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct IngestReport {
    /// Row-level rejections, in file order (usage, then rebates, then ET).
    pub row_issues: Vec<ReportEntry>,
    /// Whole accounts excluded, with the reason.
    pub dropped_accounts: Vec<(String, String)>,
    /// Accounts whose rebates were dropped for appearing more than once.
    pub duplicate_treatment_ids: Vec<String>,
    pub usage_rows_read: usize,
    pub accounts_ingested: usize,
    pub treatments_ingested: usize,
}

impl IngestReport {
    /// Writes every issue as one JSON object per line: {row, reason, field}.
    /// Account-level drops are emitted with row 0 and the customer id in
    /// `field`.
    pub fn write_jsonl(&self, path: &Path) -> std::io::Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        for e in &self.row_issues {
            writeln!(f, "{}", serde_json::to_string(e).unwrap())?;
        }
        for (id, reason) in &self.dropped_accounts {
            let e = ReportEntry {
                row: 0,
                reason: reason.clone(),
                field: id.clone(),
            };
            writeln!(f, "{}", serde_json::to_string(&e).unwrap())?;
        }
        for id in &self.duplicate_treatment_ids {
            let e = ReportEntry {
                row: 0,
                reason: "duplicate_rebate".to_string(),
                field: id.clone(),
            };
            writeln!(f, "{}", serde_json::to_string(&e).unwrap())?;
        }
        Ok(())
    }
}

const USAGE_COLUMNS: [&str; 9] = [
    "customer_id",
    "year",
    "month",
    "usage_ccf",
    "hh_size",
    "irr_area_sf",
    "zip_code",
    "median_hh_income",
    "population_density",
];
const REBATE_COLUMNS: [&str; 4] = [
    "customer_id",
    "inspection_year",
    "inspection_month",
    "rebate_quantity_sf",
];
const ET_COLUMNS: [&str; 3] = ["year", "month", "et0_inches"];

struct Columns {
    by_name: BTreeMap<String, usize>,
}

impl Columns {
    fn resolve(
        file: &str,
        headers: &csv::StringRecord,
        required: &[&str],
    ) -> Result<Columns, PanelError> {
        let by_name: BTreeMap<String, usize> = headers
            .iter()
            .enumerate()
            .map(|(i, h)| (h.trim().to_string(), i))
            .collect();
        for col in required {
            if !by_name.contains_key(*col) {
                return Err(PanelError::MissingColumn {
                    file: file.to_string(),
                    column: col.to_string(),
                });
            }
        }
        Ok(Columns { by_name })
    }

    fn get<'r>(&self, record: &'r csv::StringRecord, name: &str) -> Option<&'r str> {
        self.by_name.get(name).and_then(|&i| record.get(i)).map(str::trim)
    }
}

fn open(file: &Path) -> Result<csv::Reader<std::fs::File>, PanelError> {
    let f = std::fs::File::open(file).map_err(|source| PanelError::Io {
        file: file.display().to_string(),
        source,
    })?;
    Ok(csv::ReaderBuilder::new().has_headers(true).from_reader(f))
}

fn headers(file: &Path, reader: &mut csv::Reader<std::fs::File>) -> Result<csv::StringRecord, PanelError> {
    reader.headers().cloned().map_err(|source| PanelError::Csv {
        file: file.display().to_string(),
        source,
    })
}

struct RawUsageRow {
    month: MonthKey,
    usage: f64,
    budget: Option<f64>,
}

struct AccountAccum {
    statics: AccountRecord,
    rows: Vec<RawUsageRow>,
    poisoned: bool,
}

/// Parses helpers keep error wording uniform: reason strings name the check.
fn parse_f64(s: &str) -> Result<f64, String> {
    s.parse::<f64>().map_err(|_| format!("unparseable number '{s}'"))
}

fn parse_month(year_tok: &str, month_tok: &str) -> Result<MonthKey, String> {
    let year: i32 = year_tok
        .parse()
        .map_err(|_| format!("unparseable year token '{year_tok}'"))?;
    let month: u8 = month_tok
        .parse()
        .map_err(|_| format!("unparseable month token '{month_tok}'"))?;
    MonthKey::new(year, month).ok_or_else(|| format!("month out of range '{month_tok}'"))
}

/// Ingests the three documented CSV files into a [`UsagePanel`].
///
/// Duplicate-rebate accounts are removed from the treatment set (kept as
/// potential data); failed rows land in the report with their line numbers.
pub fn ingest(
    usage_file: &Path,
    rebate_file: &Path,
    et_file: &Path,
) -> Result<(UsagePanel, IngestReport), PanelError> {
    let mut report = IngestReport::default();
    let mut accounts: BTreeMap<String, AccountAccum> = BTreeMap::new();

    // --- usage file ---
    let mut reader = open(usage_file)?;
    let head = headers(usage_file, &mut reader)?;
    let cols = Columns::resolve("usage", &head, &USAGE_COLUMNS)?;
    let has_budget = cols.by_name.contains_key("budget_ccf");

    for record in reader.records() {
        let record = record.map_err(|source| PanelError::Csv {
            file: usage_file.display().to_string(),
            source,
        })?;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        report.usage_rows_read += 1;

        let id = match cols.get(&record, "customer_id") {
            Some(s) if !s.is_empty() => s.to_string(),
            _ => {
                report.row_issues.push(ReportEntry {
                    row: line,
                    reason: "empty customer_id".into(),
                    field: "customer_id".into(),
                });
                continue;
            }
        };

        let issue = |field: &str, reason: String, report: &mut IngestReport| {
            report.row_issues.push(ReportEntry {
                row: line,
                reason,
                field: field.into(),
            });
        };

        let month = match parse_month(
            cols.get(&record, "year").unwrap_or(""),
            cols.get(&record, "month").unwrap_or(""),
        ) {
            Ok(m) => Some(m),
            Err(reason) => {
                issue("month", reason, &mut report);
                None
            }
        };
        let usage = match parse_f64(cols.get(&record, "usage_ccf").unwrap_or("")) {
            Ok(u) if u >= 0.0 && u.is_finite() => Some(u),
            Ok(u) => {
                issue("usage_ccf", format!("usage out of range ({u})"), &mut report);
                None
            }
            Err(reason) => {
                issue("usage_ccf", reason, &mut report);
                None
            }
        };
        let budget = if has_budget {
            match cols.get(&record, "budget_ccf") {
                None | Some("") => None,
                Some(tok) => match parse_f64(tok) {
                    Ok(b) if b >= 0.0 && b.is_finite() => Some(b),
                    _ => {
                        issue("budget_ccf", format!("bad budget '{tok}'"), &mut report);
                        None
                    }
                },
            }
        } else {
            None
        };

        // Statics: first occurrence wins; a malformed static poisons the row.
        let statics = (|| -> Result<AccountRecord, (String, String)> {
            let hh: u32 = cols
                .get(&record, "hh_size")
                .unwrap_or("")
                .parse()
                .map_err(|_| ("hh_size".to_string(), "unparseable hh_size".to_string()))?;
            let irr = parse_f64(cols.get(&record, "irr_area_sf").unwrap_or(""))
                .map_err(|r| ("irr_area_sf".to_string(), r))?;
            if irr < 0.0 {
                return Err(("irr_area_sf".to_string(), format!("negative irrigable area ({irr})")));
            }
            let income = parse_f64(cols.get(&record, "median_hh_income").unwrap_or(""))
                .map_err(|r| ("median_hh_income".to_string(), r))?;
            let density = parse_f64(cols.get(&record, "population_density").unwrap_or(""))
                .map_err(|r| ("population_density".to_string(), r))?;
            Ok(AccountRecord {
                customer_id: id.clone(),
                zip_code: cols.get(&record, "zip_code").unwrap_or("").to_string(),
                hh_size: hh,
                irr_area_sf: irr,
                median_hh_income: income,
                population_density: density,
            })
        })();

        let entry = match (&statics, accounts.get_mut(&id)) {
            (_, Some(existing)) => existing,
            (Ok(st), None) => {
                accounts.insert(
                    id.clone(),
                    AccountAccum {
                        statics: st.clone(),
                        rows: Vec::new(),
                        poisoned: false,
                    },
                );
                accounts.get_mut(&id).unwrap()
            }
            (Err((field, reason)), None) => {
                report.row_issues.push(ReportEntry {
                    row: line,
                    reason: reason.clone(),
                    field: field.clone(),
                });
                continue;
            }
        };

        match (month, usage) {
            (Some(m), Some(u)) => entry.rows.push(RawUsageRow {
                month: m,
                usage: u,
                budget,
            }),
            _ => entry.poisoned = true,
        }
    }

    // --- assemble series; drop accounts that cannot form a contiguous panel ---
    let mut panel = UsagePanel::default();
    for (id, mut acc) in accounts {
        if acc.poisoned {
            report.dropped_accounts.push((id, "row_parse_failure".into()));
            continue;
        }
        if acc.rows.is_empty() {
            report.dropped_accounts.push((id, "no_usage_rows".into()));
            continue;
        }
        acc.rows.sort_by_key(|r| r.month);
        let start = acc.rows[0].month;
        let contiguous = acc
            .rows
            .iter()
            .enumerate()
            .all(|(i, r)| r.month == start.plus(i as i64));
        if !contiguous {
            report.dropped_accounts.push((id, "noncontiguous_months".into()));
            continue;
        }
        let usage: Vec<f64> = acc.rows.iter().map(|r| r.usage).collect();
        let budgets: Vec<Option<f64>> = acc.rows.iter().map(|r| r.budget).collect();
        let budget = if budgets.iter().all(Option::is_some) {
            Some(budgets.into_iter().map(Option::unwrap).collect())
        } else {
            if budgets.iter().any(Option::is_some) {
                report
                    .dropped_accounts
                    .push((format!("{id}:budget"), "partial_budget_series".into()));
            }
            None
        };
        panel.series.insert(
            id.clone(),
            UsageSeries {
                customer_id: id.clone(),
                start,
                usage,
                budget,
            },
        );
        panel.accounts.insert(id, acc.statics);
    }
    report.accounts_ingested = panel.accounts.len();

    // --- rebate file ---
    let mut reader = open(rebate_file)?;
    let head = headers(rebate_file, &mut reader)?;
    let cols = Columns::resolve("rebate", &head, &REBATE_COLUMNS)?;
    let mut rebates: BTreeMap<String, Vec<(u64, MonthKey, f64)>> = BTreeMap::new();
    for record in reader.records() {
        let record = record.map_err(|source| PanelError::Csv {
            file: rebate_file.display().to_string(),
            source,
        })?;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        let id = cols.get(&record, "customer_id").unwrap_or("").to_string();
        let month = parse_month(
            cols.get(&record, "inspection_year").unwrap_or(""),
            cols.get(&record, "inspection_month").unwrap_or(""),
        );
        let qty = parse_f64(cols.get(&record, "rebate_quantity_sf").unwrap_or(""));
        match (month, qty) {
            (Ok(m), Ok(q)) => rebates.entry(id).or_default().push((line, m, q)),
            (Err(reason), _) => report.row_issues.push(ReportEntry {
                row: line,
                reason,
                field: "inspection_month".into(),
            }),
            (_, Err(reason)) => report.row_issues.push(ReportEntry {
                row: line,
                reason,
                field: "rebate_quantity_sf".into(),
            }),
        }
    }

    for (id, entries) in rebates {
        if entries.len() > 1 {
            // appears more than once: dropped to prevent over-counting
            report.duplicate_treatment_ids.push(id.clone());
            for (line, _, _) in &entries {
                report.row_issues.push(ReportEntry {
                    row: *line,
                    reason: "duplicate_rebate".into(),
                    field: id.clone(),
                });
            }
            continue;
        }
        let (line, inspection, qty) = entries.into_iter().next().unwrap();
        let mut reject = |reason: String| {
            report.row_issues.push(ReportEntry {
                row: line,
                reason,
                field: id.clone(),
            });
        };
        let Some(account) = panel.accounts.get(&id) else {
            reject("rebate for unknown account".into());
            continue;
        };
        if qty <= 0.0 || !qty.is_finite() {
            reject(format!("rebate quantity must be positive ({qty})"));
            continue;
        }
        if account.irr_area_sf <= 0.0 {
            reject("treated account has non-positive irrigable area".into());
            continue;
        }
        let ratio = qty / account.irr_area_sf;
        if ratio > 1.0 + 1e-9 {
            reject(format!("rebate area ratio out of (0, 1] ({ratio:.4})"));
            continue;
        }
        panel.treatments.insert(
            id.clone(),
            TreatmentEvent {
                customer_id: id.clone(),
                inspection_month: inspection,
                rebate_quantity: qty,
                rebate_area_ratio: ratio.min(1.0),
            },
        );
    }
    report.treatments_ingested = panel.treatments.len();

    // --- ET file ---
    let mut reader = open(et_file)?;
    let head = headers(et_file, &mut reader)?;
    let cols = Columns::resolve("et", &head, &ET_COLUMNS)?;
    for record in reader.records() {
        let record = record.map_err(|source| PanelError::Csv {
            file: et_file.display().to_string(),
            source,
        })?;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        let month = parse_month(
            cols.get(&record, "year").unwrap_or(""),
            cols.get(&record, "month").unwrap_or(""),
        );
        let et = parse_f64(cols.get(&record, "et0_inches").unwrap_or(""));
        match (month, et) {
            (Ok(m), Ok(v)) if v.is_finite() => {
                panel.et_series.insert(m, v);
            }
            (Err(reason), _) => report.row_issues.push(ReportEntry {
                row: line,
                reason,
                field: "month".into(),
            }),
            (_, _) => report.row_issues.push(ReportEntry {
                row: line,
                reason: "bad et0 value".into(),
                field: "et0_inches".into(),
            }),
        }
    }

    Ok((panel, report))
}
