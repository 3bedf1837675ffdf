//! CSV writers for the documented panel schemas. Ingesting what these write
//! reproduces the panel exactly; the synthetic generator relies on that.

use super::{PanelError, UsagePanel};
use std::path::{Path, PathBuf};

fn io_err(file: &Path) -> impl FnOnce(std::io::Error) -> PanelError + '_ {
    move |source| PanelError::Io {
        file: file.display().to_string(),
        source,
    }
}

fn csv_err(file: &Path) -> impl FnOnce(csv::Error) -> PanelError + '_ {
    move |source| PanelError::Csv {
        file: file.display().to_string(),
        source,
    }
}

/// Writes usage.csv, rebates.csv, and et.csv into `dir`, returning the paths.
pub fn write_panel_csvs(panel: &UsagePanel, dir: &Path) -> Result<[PathBuf; 3], PanelError> {
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    let usage_path = dir.join("usage.csv");
    let rebate_path = dir.join("rebates.csv");
    let et_path = dir.join("et.csv");

    let any_budget = panel.series.values().any(|s| s.budget.is_some());
    let mut w = csv::Writer::from_path(&usage_path).map_err(csv_err(&usage_path))?;
    let mut header = vec![
        "customer_id",
        "year",
        "month",
        "usage_ccf",
    ];
    if any_budget {
        header.push("budget_ccf");
    }
    header.extend_from_slice(&[
        "hh_size",
        "irr_area_sf",
        "zip_code",
        "median_hh_income",
        "population_density",
    ]);
    w.write_record(&header).map_err(csv_err(&usage_path))?;
    for (id, series) in &panel.series {
        let account = panel
            .accounts
            .get(id)
            .ok_or_else(|| PanelError::UnknownCustomer(id.clone()))?;
        for (i, &usage) in series.usage.iter().enumerate() {
            let m = series.month_at(i);
            let mut row = vec![
                id.clone(),
                m.year.to_string(),
                m.month.to_string(),
                usage.to_string(),
            ];
            if any_budget {
                row.push(match &series.budget {
                    Some(b) => b[i].to_string(),
                    None => String::new(),
                });
            }
            row.extend_from_slice(&[
                account.hh_size.to_string(),
                account.irr_area_sf.to_string(),
                account.zip_code.clone(),
                account.median_hh_income.to_string(),
                account.population_density.to_string(),
            ]);
            w.write_record(&row).map_err(csv_err(&usage_path))?;
        }
    }
    w.flush().map_err(io_err(&usage_path))?;

    let mut w = csv::Writer::from_path(&rebate_path).map_err(csv_err(&rebate_path))?;
    w.write_record(["customer_id", "inspection_year", "inspection_month", "rebate_quantity_sf"])
        .map_err(csv_err(&rebate_path))?;
    for (id, ev) in &panel.treatments {
        w.write_record([
            id.clone(),
            ev.inspection_month.year.to_string(),
            ev.inspection_month.month.to_string(),
            ev.rebate_quantity.to_string(),
        ])
        .map_err(csv_err(&rebate_path))?;
    }
    w.flush().map_err(io_err(&rebate_path))?;

    let mut w = csv::Writer::from_path(&et_path).map_err(csv_err(&et_path))?;
    w.write_record(["year", "month", "et0_inches"]).map_err(csv_err(&et_path))?;
    for (m, v) in &panel.et_series {
        w.write_record([m.year.to_string(), m.month.to_string(), v.to_string()])
            .map_err(csv_err(&et_path))?;
    }
    w.flush().map_err(io_err(&et_path))?;

    Ok([usage_path, rebate_path, et_path])
}
