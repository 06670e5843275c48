//! Column-aligned result tables with a JSON mirror.

use serde::{Deserialize, Serialize};

use crate::detector::EvalReport;
use crate::error::{Error, Result};

/// A percentage rounded to the printed precision.
fn pct(v: f64) -> f64 {
    (v * 1000.0).round() / 10.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub acc: f64,
    pub ap: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub name: String,
    pub cells: Vec<Cell>,
    pub mean: Cell,
}

/// Acc/AP in percent with one decimal, sources as columns, mean last.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Table {
    pub columns: Vec<String>,
    pub rows: Vec<TableRow>,
}

impl Table {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("table serialises")
    }

    pub fn to_text(&self) -> String {
        let name_w = self.rows.iter().map(|r| r.name.len()).chain([6]).max().unwrap_or(6);
        let cols: Vec<&str> = self.columns.iter().map(String::as_str).chain(["Mean"]).collect();
        let col_w: Vec<usize> = cols.iter().map(|c| c.len().max(11)).collect();
        let mut out = format!("{:<name_w$}", "Method");
        for (c, w) in cols.iter().zip(&col_w) {
            out.push_str(&format!(" | {c:^w$}"));
        }
        out.push('\n');
        out.push_str(&format!("{:<name_w$}", ""));
        for w in &col_w {
            out.push_str(&format!(" | {:^w$}", format!("{:>5} {:>5}", "Acc", "AP")));
        }
        out.push('\n');
        out.push_str(&"-".repeat(out.lines().next().map_or(0, str::len)));
        out.push('\n');
        for row in &self.rows {
            out.push_str(&format!("{:<name_w$}", row.name));
            for (cell, w) in row.cells.iter().chain([&row.mean]).zip(&col_w) {
                out.push_str(&format!(" | {:^w$}", format!("{:>5.1} {:>5.1}", cell.acc, cell.ap)));
            }
            out.push('\n');
        }
        out
    }
}

/// Builds one table row per named report. All reports must cover the same
/// sources in the same order.
pub fn emit_table<S: AsRef<str>>(reports: &[(S, &EvalReport)]) -> Result<Table> {
    let (_, first) = reports.first().ok_or_else(|| Error::invalid("no reports to tabulate"))?;
    let columns: Vec<String> = first.sources.iter().map(|s| s.source.clone()).collect();
    let mut rows = Vec::with_capacity(reports.len());
    for (name, report) in reports {
        let ids: Vec<&str> = report.sources.iter().map(|s| s.source.as_str()).collect();
        if ids != columns {
            return Err(Error::invalid(format!(
                "report `{}` covers {ids:?}, expected {columns:?}",
                name.as_ref()
            )));
        }
        rows.push(TableRow {
            name: name.as_ref().to_string(),
            cells: report
                .sources
                .iter()
                .map(|s| Cell {
                    acc: pct(s.acc),
                    ap: pct(s.ap),
                })
                .collect(),
            mean: Cell {
                acc: pct(report.mean_acc),
                ap: pct(report.mean_ap),
            },
        });
    }
    Ok(Table { columns, rows })
}
