//! Tables derived from the results ledger: per-cell accuracy summaries,
//! gate activations and paired method comparisons.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::Serialize;

use crate::experiment::{io_err, ExperimentError, ExperimentResult, Result, Status};
use crate::gating::{gate_report, mean_sd, Stream};
use crate::model::Variant;
use crate::nde::Backbone;
use crate::stats::{compare_pairs, PairedComparison, StatsError};

/// Sort key putting backbones and variants in declaration order.
fn group_key(r: &ExperimentResult) -> (String, usize, usize, i64) {
    (
        r.dataset.clone(),
        Backbone::ALL.iter().position(|&b| b == r.backbone).unwrap_or(0),
        Variant::ALL.iter().position(|&v| v == r.variant).unwrap_or(0),
        rate_key(r.missing_rate),
    )
}

fn rate_key(rate: f64) -> i64 {
    (rate * 1e9).round() as i64
}

fn groups(results: &[ExperimentResult]) -> BTreeMap<(String, usize, usize, i64), Vec<&ExperimentResult>> {
    let mut g: BTreeMap<_, Vec<&ExperimentResult>> = BTreeMap::new();
    for r in results {
        g.entry(group_key(r)).or_default().push(r);
    }
    g
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SummaryRow {
    pub dataset: String,
    pub backbone: Backbone,
    pub variant: Variant,
    pub missing_rate: f64,
    pub runs: usize,
    pub failed: usize,
    pub accuracy_mean: Option<f64>,
    /// Sample sd over seeds; absent for fewer than two runs.
    pub accuracy_sd: Option<f64>,
    pub auroc_mean: Option<f64>,
    pub auroc_sd: Option<f64>,
}

fn mean_and_sd(xs: &[f64]) -> (Option<f64>, Option<f64>) {
    if xs.is_empty() {
        return (None, None);
    }
    let (m, s) = mean_sd(xs);
    (Some(m), (xs.len() > 1).then_some(s))
}

/// Mean ± sd of test accuracy and AUROC per (dataset, backbone, variant,
/// missing rate).
pub fn summarize(results: &[ExperimentResult]) -> Vec<SummaryRow> {
    groups(results)
        .into_values()
        .map(|rs| {
            let ok: Vec<&&ExperimentResult> = rs.iter().filter(|r| r.status == Status::Ok).collect();
            let acc: Vec<f64> = ok.iter().filter_map(|r| r.accuracy).collect();
            let auc: Vec<f64> = ok.iter().filter_map(|r| r.auroc).collect();
            let (accuracy_mean, accuracy_sd) = mean_and_sd(&acc);
            let (auroc_mean, auroc_sd) = mean_and_sd(&auc);
            SummaryRow {
                dataset: rs[0].dataset.clone(),
                backbone: rs[0].backbone,
                variant: rs[0].variant,
                missing_rate: rs[0].missing_rate,
                runs: ok.len(),
                failed: rs.len() - ok.len(),
                accuracy_mean,
                accuracy_sd,
                auroc_mean,
                auroc_sd,
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GateRow {
    pub dataset: String,
    pub backbone: Backbone,
    pub variant: Variant,
    pub missing_rate: f64,
    pub stream: Stream,
    pub mean: f64,
    pub sd: f64,
    pub stochastic_mean: f64,
}

/// Three rows (raw, path, latent) per gated (dataset, backbone, variant,
/// missing rate) group with at least one successful run.
pub fn gate_rows(results: &[ExperimentResult]) -> Vec<GateRow> {
    let mut out = Vec::new();
    for rs in groups(results).into_values() {
        let eval: Vec<[f64; 3]> = rs.iter().filter_map(|r| r.gates).collect();
        if eval.is_empty() {
            continue;
        }
        let stochastic: Vec<[f64; 3]> = rs.iter().filter_map(|r| r.gates_stochastic).collect();
        for g in gate_report(&eval, &stochastic) {
            out.push(GateRow {
                dataset: rs[0].dataset.clone(),
                backbone: rs[0].backbone,
                variant: rs[0].variant,
                missing_rate: rs[0].missing_rate,
                stream: g.stream,
                mean: g.mean,
                sd: g.sd,
                stochastic_mean: g.stochastic_mean,
            });
        }
    }
    out
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map_or_else(String::new, |v| format!("{v:.6}"))
}

fn csv_err(path: &Path) -> impl Fn(csv::Error) -> ExperimentError + '_ {
    move |e| ExperimentError::Invalid(format!("{}: {e}", path.display()))
}

pub fn write_summary_csv(rows: &[SummaryRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err(path))?;
    w.write_record([
        "dataset",
        "backbone",
        "variant",
        "missing_rate",
        "runs",
        "failed",
        "accuracy_mean",
        "accuracy_sd",
        "auroc_mean",
        "auroc_sd",
        "accuracy",
    ])
    .map_err(csv_err(path))?;
    for r in rows {
        let display = match (r.accuracy_mean, r.accuracy_sd) {
            (Some(m), Some(s)) => format!("{m:.3} ± {s:.3}"),
            (Some(m), None) => format!("{m:.3}"),
            _ => String::new(),
        };
        w.write_record([
            r.dataset.clone(),
            r.backbone.name().to_string(),
            r.variant.name().to_string(),
            r.missing_rate.to_string(),
            r.runs.to_string(),
            r.failed.to_string(),
            fmt_opt(r.accuracy_mean),
            fmt_opt(r.accuracy_sd),
            fmt_opt(r.auroc_mean),
            fmt_opt(r.auroc_sd),
            display,
        ])
        .map_err(csv_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

pub fn write_gate_csv(rows: &[GateRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err(path))?;
    w.write_record(["dataset", "backbone", "variant", "missing_rate", "stream", "mean", "sd", "stochastic_mean"])
        .map_err(csv_err(path))?;
    for r in rows {
        w.write_record([
            r.dataset.clone(),
            r.backbone.name().to_string(),
            r.variant.name().to_string(),
            r.missing_rate.to_string(),
            r.stream.name().to_string(),
            format!("{:.6}", r.mean),
            format!("{:.6}", r.sd),
            format!("{:.6}", r.stochastic_mean),
        ])
        .map_err(csv_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

/// A (backbone, variant) pair written `backbone/variant`, e.g. `cde/tandem`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Method {
    pub backbone: Backbone,
    pub variant: Variant,
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.backbone.name(), self.variant.name())
    }
}

impl FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let (b, v) = s.split_once('/').ok_or_else(|| format!("expected backbone/variant, got {s:?}"))?;
        Ok(Self {
            backbone: b.parse()?,
            variant: v.parse()?,
        })
    }
}

/// Mean accuracy over successful seeds per (dataset, missing rate) cell.
pub fn cell_scores(results: &[ExperimentResult], method: Method) -> BTreeMap<String, f64> {
    let mut acc: BTreeMap<(String, i64), (f64, Vec<f64>)> = BTreeMap::new();
    for r in results {
        if r.backbone != method.backbone || r.variant != method.variant || r.status != Status::Ok {
            continue;
        }
        if let Some(a) = r.accuracy {
            acc.entry((r.dataset.clone(), rate_key(r.missing_rate)))
                .or_insert_with(|| (r.missing_rate, Vec::new()))
                .1
                .push(a);
        }
    }
    acc.into_iter()
        .map(|((d, _), (rate, xs))| (format!("{d}@{rate}"), xs.iter().sum::<f64>() / xs.len() as f64))
        .collect()
}

/// W/T/L and one-sided Wilcoxon ("A beats B") per pair, Holm-adjusted
/// across pairs.
pub fn compare(results: &[ExperimentResult], pairs: &[(Method, Method)]) -> Result<Vec<PairedComparison>> {
    if results.is_empty() {
        return Err(ExperimentError::NoResults("ledger".into()));
    }
    let scored: Vec<_> = pairs
        .iter()
        .map(|(a, b)| (a.to_string(), b.to_string(), cell_scores(results, *a), cell_scores(results, *b)))
        .collect();
    compare_pairs(&scored).map_err(|e| match e {
        StatsError::Misaligned { missing_a, missing_b } => {
            let mut parts = Vec::new();
            if !missing_a.is_empty() {
                parts.push(format!("missing for A: {}", missing_a.join(", ")));
            }
            if !missing_b.is_empty() {
                parts.push(format!("missing for B: {}", missing_b.join(", ")));
            }
            ExperimentError::CellMismatch(parts.join("; "))
        }
        StatsError::Empty => ExperimentError::CellMismatch("no cells with results for either method".into()),
        other => ExperimentError::Invalid(other.to_string()),
    })
}

pub fn write_compare_csv(rows: &[PairedComparison], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err(path))?;
    w.write_record(["method_a", "method_b", "cells", "wins", "ties", "losses", "p_raw", "p_adjusted", "significant"])
        .map_err(csv_err(path))?;
    for r in rows {
        w.write_record([
            r.method_a.clone(),
            r.method_b.clone(),
            r.cells.to_string(),
            r.wtl.wins.to_string(),
            r.wtl.ties.to_string(),
            r.wtl.losses.to_string(),
            r.p_raw.map_or_else(|| "NA".into(), |p| format!("{p:.6}")),
            r.p_adjusted.map_or_else(|| "NA".into(), |p| format!("{p:.6}")),
            if r.significant { "*".into() } else { String::new() },
        ])
        .map_err(csv_err(path))?;
    }
    w.flush().map_err(io_err(path))
}
