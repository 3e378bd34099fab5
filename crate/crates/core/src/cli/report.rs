use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use serde::Deserialize;

use super::stages::ResultRecord;
use crate::error::{Error, Result};
use crate::eval_probe::MetricReport;

/// A results file holds either an array of records or a single record.
#[derive(Deserialize)]
#[serde(untagged)]
enum ResultsFile {
    Many(Vec<ResultRecord>),
    One(Box<ResultRecord>),
}

/// Comparison table: one row per `(task, model, k)`, one column per metric.
#[derive(Clone, Debug, PartialEq)]
pub struct ReportTable {
    pub metrics: Vec<String>,
    pub rows: Vec<ReportRow>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReportRow {
    pub task: String,
    pub model: String,
    pub k: Option<usize>,
    /// `"mean (std)"` per metric column; empty when absent.
    pub cells: Vec<String>,
}

/// Reads every `*.json` file in `results_dir`, in file-name order.
pub fn load_results(results_dir: &Path) -> Result<Vec<MetricReport>> {
    let entries = std::fs::read_dir(results_dir).map_err(|e| Error::io(results_dir, e))?;
    let mut files: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && p.extension().is_some_and(|x| x == "json"))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::invalid(format!("{}: no results files found", results_dir.display())));
    }
    let mut out = Vec::new();
    for f in files {
        let text = std::fs::read_to_string(&f).map_err(|e| Error::io(&f, e))?;
        match serde_json::from_str::<ResultsFile>(&text).map_err(|e| Error::json(&f, e))? {
            ResultsFile::Many(v) => out.extend(v.into_iter().map(|r| r.report)),
            ResultsFile::One(r) => out.push(r.report),
        }
    }
    Ok(out)
}

/// Builds the comparison table from the results files in `results_dir`.
pub fn report(results_dir: &Path) -> Result<ReportTable> {
    Ok(build_table(&load_results(results_dir)?))
}

pub fn build_table(reports: &[MetricReport]) -> ReportTable {
    let metrics: Vec<String> = {
        let mut seen = Vec::new();
        for r in reports {
            if !seen.contains(&r.metric) {
                seen.push(r.metric.clone());
            }
        }
        seen
    };
    // Rows keep first-appearance order; a later duplicate overwrites the cell.
    let mut order: Vec<(String, String, Option<usize>)> = Vec::new();
    let mut cells: BTreeMap<(String, String, Option<usize>), Vec<String>> = BTreeMap::new();
    for r in reports {
        let key = (r.task.clone(), r.model.clone(), r.k);
        if !cells.contains_key(&key) {
            order.push(key.clone());
        }
        let row = cells.entry(key).or_insert_with(|| vec![String::new(); metrics.len()]);
        let col = metrics.iter().position(|m| *m == r.metric).expect("metric collected above");
        row[col] = r.cell();
    }
    let rows = order
        .into_iter()
        .map(|key| {
            let c = cells[&key].clone();
            ReportRow { task: key.0, model: key.1, k: key.2, cells: c }
        })
        .collect();
    ReportTable { metrics, rows }
}

impl ReportTable {
    fn header(&self) -> Vec<String> {
        let mut h: Vec<String> = ["task", "model", "k"].map(String::from).to_vec();
        h.extend(self.metrics.iter().map(|m| m.to_uppercase()));
        h
    }

    fn body(&self) -> Vec<Vec<String>> {
        self.rows
            .iter()
            .map(|r| {
                let mut line = vec![r.task.clone(), r.model.clone(), r.k.map_or_else(|| "-".into(), |k| k.to_string())];
                line.extend(r.cells.iter().cloned());
                line
            })
            .collect()
    }

    /// Fixed-width text table.
    pub fn to_text(&self) -> String {
        let header = self.header();
        let body = self.body();
        let widths: Vec<usize> = (0..header.len())
            .map(|j| body.iter().map(|r| r[j].len()).chain([header[j].len()]).max().unwrap_or(0))
            .collect();
        let fmt = |cols: &[String]| {
            let parts: Vec<String> = cols.iter().zip(&widths).map(|(c, w)| format!("{c:<w$}")).collect();
            parts.join("  ").trim_end().to_string()
        };
        let mut out = vec![fmt(&header), widths.iter().map(|w| "-".repeat(*w)).collect::<Vec<_>>().join("  ")];
        out.extend(body.iter().map(|r| fmt(r)));
        out.join("\n") + "\n"
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let io = |e: csv::Error| Error::invalid(format!("csv export: {e}"));
        w.write_record(self.header()).map_err(io)?;
        for r in self.body() {
            w.write_record(r).map_err(io)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::invalid(format!("csv export: {e}")))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    /// Writes `report.txt` and `report.csv` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<(PathBuf, PathBuf)> {
        let txt = dir.join("report.txt");
        let csv = dir.join("report.csv");
        std::fs::write(&txt, self.to_text()).map_err(|e| Error::io(&txt, e))?;
        std::fs::write(&csv, self.to_csv()?).map_err(|e| Error::io(&csv, e))?;
        Ok((txt, csv))
    }

    pub fn tasks(&self) -> BTreeSet<&str> {
        self.rows.iter().map(|r| r.task.as_str()).collect()
    }
}
