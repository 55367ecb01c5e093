//! Result tables: plain text for terminals, CSV for plotting, JSON for
//! everything else.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::orchestrator::{Column, CrossCell, ExperimentReport, SummaryCell};

pub const CSV_HEADER: &str = "method,round,mean,std,n_seeds";

fn columns(reports: &[ExperimentReport]) -> Vec<Column> {
    let mut cols: Vec<Column> = reports
        .iter()
        .flat_map(|r| r.summary.iter().map(|c| c.column.clone()))
        .collect();
    cols.sort();
    cols.dedup();
    cols
}

/// Success rates as percentages, `mean ± std`, one row per method.
pub fn text_table(reports: &[ExperimentReport]) -> String {
    let cols = columns(reports);
    let width = reports.iter().map(|r| r.label.len()).max().unwrap_or(0).max(6);
    let mut out = format!("{:<width$}", "Method");
    for c in &cols {
        let _ = write!(out, " | {:>13}", c.title());
    }
    out.push('\n');
    let _ = writeln!(out, "{}", "-".repeat(width + cols.len() * 16));
    for r in reports {
        let _ = write!(out, "{:<width$}", r.label);
        for c in &cols {
            match r.cell(c) {
                Some(s) => {
                    let _ = write!(out, " | {:>13}", format!("{:.1} ± {:.1}", s.mean * 100.0, s.std * 100.0));
                }
                None => {
                    let _ = write!(out, " | {:>13}", "");
                }
            }
        }
        out.push('\n');
    }
    out
}

pub fn to_csv(reports: &[ExperimentReport]) -> String {
    let mut out = format!("{CSV_HEADER}\n");
    for r in reports {
        for c in &r.summary {
            // `{}` on f64 prints the shortest string that parses back exactly.
            let _ = writeln!(out, "{},{},{},{},{}", r.method, c.column.label(), c.mean, c.std, c.n_seeds);
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct CsvRow {
    pub method: String,
    pub cell: SummaryCell,
}

pub fn parse_csv(text: &str) -> Result<Vec<CsvRow>> {
    let mut lines = text.lines().enumerate();
    let bad = |line: usize, message: String| Error::SchemaViolation { line: line + 1, message };
    match lines.next() {
        Some((_, h)) if h == CSV_HEADER => {}
        _ => return Err(bad(0, format!("expected header `{CSV_HEADER}`"))),
    }
    let mut rows = Vec::new();
    for (i, line) in lines {
        if line.is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 5 {
            return Err(bad(i, format!("expected 5 fields, found {}", f.len())));
        }
        let num = |s: &str| s.parse::<f64>().map_err(|e| bad(i, e.to_string()));
        rows.push(CsvRow {
            method: f[0].to_string(),
            cell: SummaryCell {
                column: Column::parse(f[1]).ok_or_else(|| bad(i, format!("bad round `{}`", f[1])))?,
                mean: num(f[2])?,
                std: num(f[3])?,
                n_seeds: f[4].parse().map_err(|e: std::num::ParseIntError| bad(i, e.to_string()))?,
            },
        });
    }
    Ok(rows)
}

/// Trainer rows by collector columns; cells a trainer cannot use read `n/a`.
pub fn cross_table(cells: &[CrossCell]) -> String {
    let mut collectors: Vec<&str> = cells.iter().map(|c| c.collector.as_str()).collect();
    collectors.sort_unstable();
    collectors.dedup();
    let mut trainers: Vec<&str> = Vec::new();
    for c in cells {
        if !trainers.contains(&c.trainer.as_str()) {
            trainers.push(&c.trainer);
        }
    }
    let width = trainers.iter().map(|t| t.len()).max().unwrap_or(0).max("trained \\ collected".len());
    let mut out = format!("{:<width$}", "trained \\ collected");
    for c in &collectors {
        let _ = write!(out, " | {c:>12}");
    }
    out.push('\n');
    for t in &trainers {
        let _ = write!(out, "{t:<width$}");
        for c in &collectors {
            let v = cells
                .iter()
                .find(|x| x.trainer == *t && x.collector == *c)
                .and_then(|x| x.best_success)
                .map_or_else(|| "n/a".to_string(), |s| format!("{:.1}", s * 100.0));
            let _ = write!(out, " | {v:>12}");
        }
        out.push('\n');
    }
    out
}
