use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use tandem::experiment::{self, dump_attention, read_results, Cell, CellSelector, ExperimentError, Run, Status};
use tandem::model::Variant;
use tandem::nde::Backbone;
use tandem::report::{self, Method};

/// Attention-guided neural differential equations for time series
/// classification with missing values.
#[derive(Parser)]
#[command(name = "tandem", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write split indices and missingness masks for every (rate, seed).
    Prepare {
        /// Run manifest (JSON).
        manifest: PathBuf,
    },
    /// Train the selected cells and append results to results.jsonl.
    ///
    /// Cells already in the ledger are skipped. Set TANDEM_WORKERS to bound
    /// the number of cells trained in parallel.
    Train {
        manifest: PathBuf,
        #[command(flatten)]
        select: Selector,
    },
    /// Summarize a results ledger into CSV tables.
    Report {
        /// results.jsonl written by `train`.
        results: PathBuf,
        /// Output directory [default: <results dir>/report].
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also dump attention matrices for this many test samples per
        /// successful cell (needs --manifest).
        #[arg(long, default_value_t = 0)]
        attention_samples: usize,
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Paired comparison of methods over (dataset, missing rate) cells.
    Compare {
        results: PathBuf,
        /// `A:B` where each side is `backbone/variant`, e.g.
        /// `cde/tandem:cde/no_attention`. Tests "A beats B". Repeatable.
        #[arg(long = "pair", required = true)]
        pairs: Vec<String>,
        /// Write the comparison CSV here as well as printing it.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write per-head T×T attention matrices of trained cells.
    DumpAttention {
        manifest: PathBuf,
        #[command(flatten)]
        select: Selector,
        /// Test-split sample index. Repeatable.
        #[arg(long = "sample", default_values_t = [0usize])]
        samples: Vec<usize>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct Selector {
    #[arg(long = "dataset")]
    datasets: Vec<String>,
    #[arg(long = "rate")]
    rates: Vec<f64>,
    #[arg(long = "seed")]
    seeds: Vec<u64>,
    #[arg(long = "backbone")]
    backbones: Vec<Backbone>,
    #[arg(long = "variant")]
    variants: Vec<Variant>,
}

impl From<Selector> for CellSelector {
    fn from(s: Selector) -> Self {
        Self {
            datasets: s.datasets,
            rates: s.rates,
            seeds: s.seeds,
            backbones: s.backbones,
            variants: s.variants,
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn run(command: Command) -> experiment::Result<()> {
    match command {
        Command::Prepare { manifest } => {
            let run = Run::load(&manifest)?;
            let n = experiment::prepare(&run)?;
            println!("wrote {n} mask files for {} dataset(s) under {}", run.datasets.len(), run.output.join("prepared").display());
        }
        Command::Train { manifest, select } => {
            let run = Run::load(&manifest)?;
            let s = experiment::train_cells(&run, &select.into(), experiment::worker_count())?;
            println!(
                "trained {} cell(s), {} failed, {} already in {}",
                s.trained,
                s.failed,
                s.skipped,
                run.results_path().display()
            );
        }
        Command::Report {
            results,
            out,
            attention_samples,
            manifest,
        } => report_cmd(&results, out, attention_samples, manifest)?,
        Command::Compare { results, pairs, out } => {
            let pairs = pairs.iter().map(|p| parse_pair(p)).collect::<experiment::Result<Vec<_>>>()?;
            let rs = load_nonempty(&results)?;
            let rows = report::compare(&rs, &pairs)?;
            println!("{:<24} {:<24} {:>5} {:>9} {:>9} {:>9}", "A", "B", "cells", "W/T/L", "p", "p_holm");
            for r in &rows {
                let p = |x: Option<f64>| x.map_or_else(|| "NA".to_string(), |v| format!("{v:.4}"));
                println!(
                    "{:<24} {:<24} {:>5} {:>9} {:>9} {:>9}{}",
                    r.method_a,
                    r.method_b,
                    r.cells,
                    format!("{}/{}/{}", r.wtl.wins, r.wtl.ties, r.wtl.losses),
                    p(r.p_raw),
                    p(r.p_adjusted),
                    if r.significant { " *" } else { "" }
                );
            }
            if let Some(path) = out {
                report::write_compare_csv(&rows, &path)?;
            }
        }
        Command::DumpAttention {
            manifest,
            select,
            samples,
            out,
        } => {
            let run = Run::load(&manifest)?;
            let cells = CellSelector::from(select).select(&run)?;
            let mut n = 0;
            for cell in cells.iter().filter(|c| c.variant != Variant::NoAttention) {
                n += dump_attention(&run, cell, &samples, &out)?.len();
            }
            println!("wrote {n} attention matrices under {}", out.display());
        }
    }
    Ok(())
}

fn parse_pair(s: &str) -> experiment::Result<(Method, Method)> {
    let (a, b) = s
        .split_once(':')
        .ok_or_else(|| ExperimentError::Invalid(format!("pair {s:?} is not of the form A:B")))?;
    let m = |x: &str| x.parse::<Method>().map_err(ExperimentError::Invalid);
    Ok((m(a)?, m(b)?))
}

fn load_nonempty(path: &Path) -> experiment::Result<Vec<experiment::ExperimentResult>> {
    let rs = read_results(path)?;
    if rs.is_empty() {
        return Err(ExperimentError::NoResults(path.display().to_string()));
    }
    Ok(rs)
}

fn report_cmd(results: &Path, out: Option<PathBuf>, attention_samples: usize, manifest: Option<PathBuf>) -> experiment::Result<()> {
    let rs = load_nonempty(results)?;
    let out = out.unwrap_or_else(|| results.parent().unwrap_or(Path::new(".")).join("report"));
    fs::create_dir_all(&out).map_err(|e| ExperimentError::Invalid(format!("{}: {e}", out.display())))?;
    let summary = report::summarize(&rs);
    report::write_summary_csv(&summary, &out.join("summary.csv"))?;
    let gates = report::gate_rows(&rs);
    report::write_gate_csv(&gates, &out.join("gates.csv"))?;
    println!("{:<12} {:<6} {:<14} {:>5} {:>5} {:>15}", "dataset", "model", "variant", "rate", "runs", "accuracy");
    for r in &summary {
        let acc = match (r.accuracy_mean, r.accuracy_sd) {
            (Some(m), Some(s)) => format!("{m:.3} ± {s:.3}"),
            (Some(m), None) => format!("{m:.3}"),
            _ => "failed".into(),
        };
        println!(
            "{:<12} {:<6} {:<14} {:>5} {:>5} {:>15}",
            r.dataset,
            r.backbone.name(),
            r.variant.name(),
            r.missing_rate,
            r.runs,
            acc
        );
    }
    if attention_samples > 0 {
        let manifest = manifest.ok_or_else(|| ExperimentError::Invalid("--attention-samples needs --manifest".into()))?;
        let run = Run::load(&manifest)?;
        let indices: Vec<usize> = (0..attention_samples).collect();
        let dir = out.join("attention");
        for r in rs.iter().filter(|r| r.status == Status::Ok && r.variant != Variant::NoAttention) {
            let cell: Cell = r.cell();
            dump_attention(&run, &cell, &indices, &dir)?;
        }
    }
    println!("wrote {}", out.display());
    Ok(())
}
