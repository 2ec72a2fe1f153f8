//! Metrics bundle and its on-disk forms: long-format CSV, a JSON summary and
//! gnuplot-ready tables.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::stats::{PairedTest, Stat};
use super::{ExperimentError, Scenario};
use crate::lemma::EquivalenceReport;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub scenario: String,
    pub seed: u64,
    /// `None` for whole-run aggregates.
    pub round: Option<u64>,
    /// `None` for fleet-wide values.
    pub agent: Option<u32>,
    pub metric: String,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AsrReport {
    pub policy: String,
    pub seeds: usize,
    pub asr_mean: f64,
    pub asr_std: f64,
    pub benefit_pct_vs_nl: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub label: String,
    pub n: usize,
    /// Zero for protocols without a participation gate.
    pub participation_level: usize,
    pub budget: usize,
    pub chunk_size_bytes: usize,
    pub chunk_count: usize,
    /// Mean and spread across seeds of each per-seed scalar.
    pub metrics: BTreeMap<String, Stat>,
    pub asr: Vec<AsrReport>,
    pub comparisons: Vec<PairedTest>,
}

impl CellSummary {
    pub fn metric(&self, name: &str) -> Option<Stat> {
        self.metrics.get(name).copied()
    }

    pub fn comparison(&self, lower: &str, higher: &str) -> Option<&PairedTest> {
        self.comparisons.iter().find(|c| c.lower == lower && c.higher == higher)
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Summary {
    pub scenario: Scenario,
    pub seeds: Vec<u64>,
    pub cells: Vec<CellSummary>,
    pub lemma: Option<EquivalenceReport>,
}

impl Summary {
    pub fn cell(&self, label: &str) -> Option<&CellSummary> {
        self.cells.iter().find(|c| c.label == label)
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricsBundle {
    pub scenario: Scenario,
    pub rows: Vec<MetricRow>,
    pub summary: Summary,
}

fn io(context: impl Into<String>) -> impl FnOnce(std::io::Error) -> ExperimentError {
    let context = context.into();
    move |source| ExperimentError::Io { context, source }
}

fn csv_err(e: csv::Error) -> ExperimentError {
    match e.into_kind() {
        csv::ErrorKind::Io(source) => ExperimentError::Io { context: "metrics.csv".into(), source },
        other => ExperimentError::Encode(format!("{other:?}")),
    }
}

fn write_metrics_csv(rows: &[MetricRow], path: &Path) -> Result<(), ExperimentError> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(["scenario", "seed", "round", "agent", "metric", "value"]).map_err(csv_err)?;
    for r in rows {
        let round = r.round.map(|x| x.to_string()).unwrap_or_default();
        let agent = r.agent.map(|x| x.to_string()).unwrap_or_default();
        w.write_record([r.scenario.as_str(), &r.seed.to_string(), &round, &agent, &r.metric, &r.value.to_string()])
            .map_err(csv_err)?;
    }
    w.flush().map_err(io(path.display().to_string()))
}

/// Fleet-wide per-round metrics averaged over seeds, one gnuplot data block
/// per cell.
fn per_round_table(rows: &[MetricRow]) -> String {
    let mut cells: Vec<&str> = Vec::new();
    let mut data: BTreeMap<(&str, u64), BTreeMap<&str, Vec<f64>>> = BTreeMap::new();
    let mut columns: BTreeMap<&str, BTreeSet<&str>> = BTreeMap::new();
    for r in rows {
        let (Some(round), None) = (r.round, r.agent) else { continue };
        if !cells.contains(&r.scenario.as_str()) {
            cells.push(&r.scenario);
        }
        columns.entry(&r.scenario).or_default().insert(&r.metric);
        data.entry((&r.scenario, round)).or_default().entry(&r.metric).or_default().push(r.value);
    }
    let mut out = String::new();
    for (i, cell) in cells.iter().enumerate() {
        if i > 0 {
            out.push_str("\n\n");
        }
        let cols: Vec<&str> = columns[cell].iter().copied().collect();
        out.push_str(&format!("# {cell}\n# round {}\n", cols.join(" ")));
        for ((_, round), metrics) in data.range((*cell, 0)..=(*cell, u64::MAX)) {
            out.push_str(&round.to_string());
            for c in &cols {
                match metrics.get(c) {
                    Some(xs) => out.push_str(&format!(" {}", xs.iter().sum::<f64>() / xs.len() as f64)),
                    None => out.push_str(" NaN"),
                }
            }
            out.push('\n');
        }
    }
    out
}

fn asr_table(summary: &Summary) -> String {
    let mut out = String::from("# cell policy asr_mean asr_std benefit_pct_vs_nl\n");
    for c in &summary.cells {
        for a in &c.asr {
            out.push_str(&format!("\"{}\" {} {} {} {}\n", c.label, a.policy, a.asr_mean, a.asr_std, a.benefit_pct_vs_nl));
        }
    }
    out
}

/// Write `metrics.csv`, `summary.json`, `per_round.dat` and `asr.dat` into
/// `out_dir`, creating it if needed. Same bundle, same bytes.
pub fn emit_reports(bundle: &MetricsBundle, out_dir: &Path) -> Result<Vec<PathBuf>, ExperimentError> {
    fs::create_dir_all(out_dir).map_err(io(out_dir.display().to_string()))?;
    let metrics = out_dir.join("metrics.csv");
    write_metrics_csv(&bundle.rows, &metrics)?;

    let summary = out_dir.join("summary.json");
    let json = serde_json::to_string_pretty(&bundle.summary).map_err(|e| ExperimentError::Encode(e.to_string()))?;
    let mut f = fs::File::create(&summary).map_err(io(summary.display().to_string()))?;
    writeln!(f, "{json}").map_err(io(summary.display().to_string()))?;

    let per_round = out_dir.join("per_round.dat");
    fs::write(&per_round, per_round_table(&bundle.rows)).map_err(io(per_round.display().to_string()))?;
    let asr = out_dir.join("asr.dat");
    fs::write(&asr, asr_table(&bundle.summary)).map_err(io(asr.display().to_string()))?;
    Ok(vec![metrics, summary, per_round, asr])
}
