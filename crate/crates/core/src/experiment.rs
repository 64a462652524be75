//! Experiment grids on disk.
//!
//! A [`RunManifest`] names datasets, missing rates, seeds, backbones and
//! variants. `prepare` materializes one mask file per (rate, seed) and one
//! split file per seed; `train_cells` trains every selected
//! (dataset, backbone, variant, rate, seed) cell and appends one
//! [`ExperimentResult`] per cell to `results.jsonl`.
//!
//! Output layout under the manifest's `output` directory:
//!
//! ```text
//! prepared/<dataset>/prepared.json
//! prepared/<dataset>/split_seed<s>.json
//! prepared/<dataset>/mask_rate<r>_seed<s>.csv
//! search/<dataset>_<backbone>_<variant>.json
//! checkpoints/<dataset>/<backbone>_<variant>_rate<r>_seed<s>.json
//! results.jsonl
//! timings.jsonl
//! ```

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::mpsc;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::checkpoint::{self, CheckpointError};
use crate::data::{
    inject_missingness, load_dataset, normalize, read_manifest, read_mask_file, rescale_dataset, split, write_mask_file, DataError, Dataset,
    Layout, MaskMode, Split, SplitSpec,
};
use crate::model::{prepare_dataset, ModelError, Noise, PreparedSample, TandemConfig, TandemModel, Variant};
use crate::nde::Backbone;
use crate::rng;
use crate::search::{search_hyperparameters, Candidate, SearchSpace, Trial};
use crate::train::{eval_noise_seed, evaluate, train, TrainConfig, TrainError};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error("not prepared: {0} (run `tandem prepare` first)")]
    NotPrepared(String),
    #[error("no results in {0}")]
    NoResults(String),
    #[error("cells differ between methods: {0}")]
    CellMismatch(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

impl ExperimentError {
    /// Process exit code for this error.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Invalid(_) | Self::Data(_) => 2,
            Self::NoResults(_) => 3,
            Self::CellMismatch(_) => 4,
            Self::NotPrepared(_) => 5,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, ExperimentError>;

pub(crate) fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ExperimentError + '_ {
    move |source| ExperimentError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(io_err(&tmp))?;
    fs::rename(&tmp, path).map_err(io_err(path))
}

/// Model and optimizer settings used when no search is run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Hyperparameters {
    pub lr: f64,
    pub batch_size: usize,
    pub classifier_lr_multiplier: f64,
    pub d_z: usize,
    pub d_h: usize,
    #[serde(rename = "H")]
    pub heads: usize,
    pub n_l: usize,
    pub n_h: usize,
    pub tau: f64,
}

impl Default for Hyperparameters {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            batch_size: 32,
            classifier_lr_multiplier: 1.0,
            d_z: 16,
            d_h: 32,
            heads: 4,
            n_l: 2,
            n_h: 32,
            tau: 1.0,
        }
    }
}

impl Hyperparameters {
    fn with_candidate(self, c: &Candidate) -> Self {
        Self {
            lr: c.lr,
            batch_size: c.batch_size,
            n_l: c.n_l,
            n_h: c.n_h,
            ..self
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainingSettings {
    pub max_epochs: usize,
    pub patience: usize,
    /// Epoch cap for each search trial.
    pub search_epochs: usize,
}

impl Default for TrainingSettings {
    fn default() -> Self {
        Self {
            max_epochs: 200,
            patience: 20,
            search_epochs: 200,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub name: String,
    /// Dataset manifests, relative to this file.
    pub datasets: Vec<PathBuf>,
    pub missing_rates: Vec<f64>,
    pub seeds: Vec<u64>,
    pub backbones: Vec<Backbone>,
    pub variants: Vec<Variant>,
    /// Random-search trials per (dataset, backbone, variant); 0 uses
    /// `hyperparameters` as given.
    #[serde(default)]
    pub search_budget: usize,
    /// Output directory, relative to this file.
    pub output: PathBuf,
    #[serde(default)]
    pub mask_mode: MaskMode,
    /// Rescale every series to this length. Without it, datasets with
    /// unequal lengths are rescaled to their longest series.
    #[serde(default)]
    pub length: Option<usize>,
    #[serde(default)]
    pub hyperparameters: Hyperparameters,
    #[serde(default)]
    pub training: TrainingSettings,
}

/// A validated manifest with resolved paths.
#[derive(Debug, Clone)]
pub struct Run {
    pub manifest: RunManifest,
    pub datasets: Vec<DatasetEntry>,
    pub output: PathBuf,
}

#[derive(Debug, Clone)]
pub struct DatasetEntry {
    pub name: String,
    pub manifest: PathBuf,
    pub layout: Layout,
}

impl Run {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| ExperimentError::Invalid(format!("{}: {e}", path.display())))?;
        let manifest: RunManifest = serde_json::from_str(&text).map_err(|e| ExperimentError::Invalid(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_manifest(manifest, base)
    }

    pub fn from_manifest(manifest: RunManifest, base: &Path) -> Result<Self> {
        let invalid = |m: String| Err(ExperimentError::Invalid(m));
        if manifest.datasets.is_empty() || manifest.seeds.is_empty() || manifest.backbones.is_empty() || manifest.variants.is_empty() {
            return invalid("datasets, seeds, backbones and variants must be nonempty".into());
        }
        if manifest.missing_rates.is_empty() {
            return invalid("missing_rates must be nonempty".into());
        }
        if let Some(r) = manifest.missing_rates.iter().find(|r| !(0.0..1.0).contains(*r)) {
            return invalid(format!("missing rate {r} outside [0, 1)"));
        }
        if manifest.length.is_some_and(|l| l < 2) {
            return invalid("length must be at least 2".into());
        }
        if unique_count(manifest.seeds.iter().copied()) != manifest.seeds.len()
            || unique_count(manifest.missing_rates.iter().map(|r| r.to_bits())) != manifest.missing_rates.len()
        {
            return invalid("duplicate seeds or missing rates".into());
        }
        let mut datasets = Vec::new();
        for rel in &manifest.datasets {
            let path = base.join(rel);
            if !path.is_file() {
                return invalid(format!("dataset manifest {} does not exist", path.display()));
            }
            let m = read_manifest(&path)?;
            let csv = path.parent().unwrap_or(Path::new(".")).join(&m.csv);
            if !csv.is_file() {
                return invalid(format!("data file {} does not exist", csv.display()));
            }
            let name = m.name.clone().unwrap_or_else(|| {
                path.parent()
                    .and_then(|p| p.file_name())
                    .map_or_else(|| "dataset".to_string(), |n| n.to_string_lossy().into_owned())
            });
            if datasets.iter().any(|d: &DatasetEntry| d.name == name) {
                return invalid(format!("two datasets are named {name:?}"));
            }
            datasets.push(DatasetEntry {
                name,
                manifest: path,
                layout: m.layout,
            });
        }
        let output = base.join(&manifest.output);
        Ok(Self { manifest, datasets, output })
    }

    pub fn dataset(&self, name: &str) -> Result<&DatasetEntry> {
        self.datasets
            .iter()
            .find(|d| d.name == name)
            .ok_or_else(|| ExperimentError::Invalid(format!("unknown dataset {name:?}")))
    }

    pub fn prepared_dir(&self, dataset: &str) -> PathBuf {
        self.output.join("prepared").join(dataset)
    }

    pub fn results_path(&self) -> PathBuf {
        self.output.join("results.jsonl")
    }

    pub fn timings_path(&self) -> PathBuf {
        self.output.join("timings.jsonl")
    }

    pub fn checkpoint_path(&self, cell: &Cell) -> PathBuf {
        self.output.join("checkpoints").join(&cell.dataset).join(format!(
            "{}_{}_rate{}_seed{}.json",
            cell.backbone.name(),
            cell.variant.name(),
            cell.rate,
            cell.seed
        ))
    }

    fn search_path(&self, dataset: &str, backbone: Backbone, variant: Variant) -> PathBuf {
        self.output.join("search").join(format!("{dataset}_{}_{}.json", backbone.name(), variant.name()))
    }

    /// Every cell of the grid in canonical order.
    pub fn cells(&self) -> Vec<Cell> {
        let m = &self.manifest;
        let mut out = Vec::new();
        for d in &self.datasets {
            for &backbone in &m.backbones {
                for &variant in &m.variants {
                    for &rate in &m.missing_rates {
                        for &seed in &m.seeds {
                            out.push(Cell {
                                dataset: d.name.clone(),
                                backbone,
                                variant,
                                rate,
                                seed,
                            });
                        }
                    }
                }
            }
        }
        out
    }
}

fn unique_count<T: std::hash::Hash + Eq>(it: impl Iterator<Item = T>) -> usize {
    it.collect::<HashSet<_>>().len()
}

fn mask_file(rate: f64, seed: u64) -> String {
    format!("mask_rate{rate}_seed{seed}.csv")
}

fn split_file(seed: u64) -> String {
    format!("split_seed{seed}.json")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct PreparedIndex {
    dataset: String,
    samples: usize,
    mask_mode: MaskMode,
    missing_rates: Vec<f64>,
    seeds: Vec<u64>,
}

/// Write split and mask files for every dataset, rate and seed. Each
/// dataset directory is built beside its destination and renamed into
/// place. Returns the number of mask files written.
pub fn prepare(run: &Run) -> Result<usize> {
    let mut masks = 0;
    for entry in &run.datasets {
        let ds = load_dataset(&entry.manifest)?;
        let dest = run.prepared_dir(&entry.name);
        let parent = dest.parent().expect("prepared dir has a parent");
        fs::create_dir_all(parent).map_err(io_err(parent))?;
        let tmp = parent.join(format!(".{}.tmp", entry.name));
        if tmp.exists() {
            fs::remove_dir_all(&tmp).map_err(io_err(&tmp))?;
        }
        fs::create_dir_all(&tmp).map_err(io_err(&tmp))?;
        let m = &run.manifest;
        for &seed in &m.seeds {
            let s = split(&ds, &SplitSpec::with_seed(seed))?;
            let json = serde_json::to_string_pretty(&s).expect("split serializes");
            fs::write(tmp.join(split_file(seed)), json).map_err(io_err(&tmp))?;
            for &rate in &m.missing_rates {
                let masked = inject_missingness(&ds, rate, seed, m.mask_mode)?;
                write_mask_file(&masked, tmp.join(mask_file(rate, seed)), entry.layout)?;
                masks += 1;
            }
        }
        let index = PreparedIndex {
            dataset: entry.name.clone(),
            samples: ds.len(),
            mask_mode: m.mask_mode,
            missing_rates: m.missing_rates.clone(),
            seeds: m.seeds.clone(),
        };
        fs::write(tmp.join("prepared.json"), serde_json::to_string_pretty(&index).expect("index serializes")).map_err(io_err(&tmp))?;
        if dest.exists() {
            fs::remove_dir_all(&dest).map_err(io_err(&dest))?;
        }
        fs::rename(&tmp, &dest).map_err(io_err(&dest))?;
    }
    Ok(masks)
}

/// One (dataset, backbone, variant, missing rate, seed) training job.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub dataset: String,
    pub backbone: Backbone,
    pub variant: Variant,
    pub rate: f64,
    pub seed: u64,
}

impl Cell {
    pub fn key(&self) -> String {
        format!("{}/{}/{}/{}/{}", self.dataset, self.backbone.name(), self.variant.name(), self.rate, self.seed)
    }
}

/// Repeatable cell filters; an empty list matches everything.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CellSelector {
    pub datasets: Vec<String>,
    pub rates: Vec<f64>,
    pub seeds: Vec<u64>,
    pub backbones: Vec<Backbone>,
    pub variants: Vec<Variant>,
}

impl CellSelector {
    pub fn matches(&self, c: &Cell) -> bool {
        fn ok<T: PartialEq>(list: &[T], v: &T) -> bool {
            list.is_empty() || list.contains(v)
        }
        ok(&self.datasets, &c.dataset) && ok(&self.rates, &c.rate) && ok(&self.seeds, &c.seed) && ok(&self.backbones, &c.backbone) && ok(&self.variants, &c.variant)
    }

    /// Cells of `run` that match, or an error when a filter names something
    /// outside the manifest.
    pub fn select(&self, run: &Run) -> Result<Vec<Cell>> {
        let m = &run.manifest;
        for d in &self.datasets {
            run.dataset(d)?;
        }
        let outside = |what: &str, v: String| Err(ExperimentError::Invalid(format!("{what} {v} is not in the manifest")));
        if let Some(r) = self.rates.iter().find(|r| !m.missing_rates.contains(r)) {
            return outside("missing rate", r.to_string());
        }
        if let Some(s) = self.seeds.iter().find(|s| !m.seeds.contains(s)) {
            return outside("seed", s.to_string());
        }
        if let Some(b) = self.backbones.iter().find(|b| !m.backbones.contains(b)) {
            return outside("backbone", b.to_string());
        }
        if let Some(v) = self.variants.iter().find(|v| !m.variants.contains(v)) {
            return outside("variant", v.name().to_string());
        }
        Ok(run.cells().into_iter().filter(|c| self.matches(c)).collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Status {
    Ok,
    Failed,
}

/// One ledger line. Wall time is kept out of the ledger (see
/// `timings.jsonl`) so reruns produce identical lines.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub dataset: String,
    pub backbone: Backbone,
    pub variant: Variant,
    pub missing_rate: f64,
    pub seed: u64,
    pub status: Status,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub accuracy: Option<f64>,
    pub auroc: Option<f64>,
    pub test_loss: Option<f64>,
    /// Eval-mode gate values `sigmoid(ℓ / τ)` for (raw, path, latent).
    pub gates: Option<[f64; 3]>,
    /// Mean of stochastic training-mode gate draws.
    pub gates_stochastic: Option<[f64; 3]>,
    pub epochs_run: usize,
    pub best_epoch: Option<usize>,
    pub best_val_loss: Option<f64>,
    pub hyperparameters: Hyperparameters,
}

impl ExperimentResult {
    pub fn cell(&self) -> Cell {
        Cell {
            dataset: self.dataset.clone(),
            backbone: self.backbone,
            variant: self.variant,
            rate: self.missing_rate,
            seed: self.seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Timing {
    cell: String,
    seconds: f64,
}

/// Train, validation and test splits of one (dataset, rate, seed), masked,
/// normalized with train statistics and rescaled to a common length.
pub struct CellData {
    pub train: Vec<PreparedSample>,
    pub val: Vec<PreparedSample>,
    pub test: Vec<PreparedSample>,
    pub channels: usize,
    pub classes: usize,
}

pub fn cell_data(run: &Run, dataset: &Dataset, name: &str, rate: f64, seed: u64) -> Result<CellData> {
    let entry = run.dataset(name)?;
    let dir = run.prepared_dir(name);
    let mask = dir.join(mask_file(rate, seed));
    let split_path = dir.join(split_file(seed));
    if !mask.is_file() || !split_path.is_file() {
        return Err(ExperimentError::NotPrepared(format!("{name} at rate {rate}, seed {seed}")));
    }
    let masked = read_mask_file(dataset, &mask, entry.layout)?;
    let text = fs::read_to_string(&split_path).map_err(io_err(&split_path))?;
    let s: Split = serde_json::from_str(&text).map_err(|e| ExperimentError::NotPrepared(format!("{}: {e}", split_path.display())))?;
    if s.train.iter().chain(&s.val).chain(&s.test).any(|&i| i >= masked.len()) {
        return Err(ExperimentError::NotPrepared(format!("{} does not match the dataset", split_path.display())));
    }
    let (tr, va, te, _) = normalize(&masked.subset(&s.train), &masked.subset(&s.val), &masked.subset(&s.test));
    let target = run.manifest.length.or_else(|| {
        let lens: HashSet<usize> = masked.samples.iter().map(|x| x.len()).collect();
        (lens.len() > 1).then(|| lens.into_iter().max().unwrap_or(2))
    });
    let (tr, va, te) = match target {
        Some(l) => (rescale_dataset(&tr, l)?, rescale_dataset(&va, l)?, rescale_dataset(&te, l)?),
        None => (tr, va, te),
    };
    let opts = crate::interp::PathOptions::default();
    Ok(CellData {
        train: prepare_dataset(&tr, opts)?,
        val: prepare_dataset(&va, opts)?,
        test: prepare_dataset(&te, opts)?,
        channels: masked.channels,
        classes: masked.classes,
    })
}

fn model_config(cell: &Cell, h: &Hyperparameters, channels: usize, classes: usize) -> TandemConfig {
    let mut c = TandemConfig::new(cell.backbone, cell.variant, channels, classes);
    c.d_z = h.d_z;
    c.d_h = h.d_h;
    c.heads = h.heads;
    c.n_l = h.n_l;
    c.n_h = h.n_h;
    c.tau = h.tau;
    c.seed = cell.seed;
    c
}

fn train_config(h: &Hyperparameters, max_epochs: usize, patience: usize, seed: u64) -> TrainConfig {
    TrainConfig {
        lr: h.lr,
        classifier_lr_multiplier: h.classifier_lr_multiplier,
        batch_size: h.batch_size,
        max_epochs,
        patience,
        seed,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchRecord {
    pub best: Candidate,
    pub trials: Vec<Trial>,
}

/// Tuned hyperparameters for (dataset, backbone, variant): searched on the
/// 0% split of the first seed and cached on disk.
fn tuned(run: &Run, dataset: &Dataset, name: &str, backbone: Backbone, variant: Variant) -> Result<Hyperparameters> {
    let m = &run.manifest;
    if m.search_budget == 0 {
        return Ok(m.hyperparameters);
    }
    let path = run.search_path(name, backbone, variant);
    if let Ok(text) = fs::read_to_string(&path) {
        if let Ok(rec) = serde_json::from_str::<SearchRecord>(&text) {
            return Ok(m.hyperparameters.with_candidate(&rec.best));
        }
    }
    let seed = m.seeds[0];
    let data = if m.missing_rates.contains(&0.0) {
        cell_data(run, dataset, name, 0.0, seed)?
    } else {
        return Err(ExperimentError::Invalid("hyperparameter search needs missing rate 0 in the manifest".into()));
    };
    let cell = Cell {
        dataset: name.to_string(),
        backbone,
        variant,
        rate: 0.0,
        seed,
    };
    let space = SearchSpace::default();
    let search_seed = rng::derive_seed(&[seed, backbone as u64, variant as u64]);
    let (best, trials) = search_hyperparameters(&space, m.search_budget, search_seed, |c| {
        let h = m.hyperparameters.with_candidate(c);
        let mc = model_config(&cell, &h, data.channels, data.classes);
        let tc = train_config(&h, m.training.search_epochs, m.training.patience, seed);
        train(&mc, &tc, &data.train, &data.val, None).map(|(_, hist)| hist.best_val_loss)
    });
    let parent = path.parent().expect("search dir");
    fs::create_dir_all(parent).map_err(io_err(parent))?;
    let rec = SearchRecord { best, trials };
    write_atomic(&path, serde_json::to_string_pretty(&rec).expect("search record serializes").as_bytes())?;
    Ok(m.hyperparameters.with_candidate(&best))
}

const GATE_DRAWS: usize = 1000;
const GATE_STOCH_TAG: u64 = 0x4753_544F;

/// Train and evaluate one cell. Divergence yields a failed result rather
/// than an error.
pub fn run_cell(run: &Run, dataset: &Dataset, cell: &Cell, h: &Hyperparameters) -> Result<(ExperimentResult, Option<TandemModel>)> {
    let data = cell_data(run, dataset, &cell.dataset, cell.rate, cell.seed)?;
    let t = &run.manifest.training;
    let mc = model_config(cell, h, data.channels, data.classes);
    let tc = train_config(h, t.max_epochs, t.patience, cell.seed);
    let mut result = ExperimentResult {
        dataset: cell.dataset.clone(),
        backbone: cell.backbone,
        variant: cell.variant,
        missing_rate: cell.rate,
        seed: cell.seed,
        status: Status::Failed,
        error: None,
        accuracy: None,
        auroc: None,
        test_loss: None,
        gates: None,
        gates_stochastic: None,
        epochs_run: 0,
        best_epoch: None,
        best_val_loss: None,
        hyperparameters: *h,
    };
    let (model, history) = match train(&mc, &tc, &data.train, &data.val, None) {
        Ok(x) => x,
        Err(e @ (TrainError::Diverged { .. } | TrainError::NonFiniteGradient(_))) => {
            result.error = Some(e.to_string());
            return Ok((result, None));
        }
        Err(e) => return Err(e.into()),
    };
    let metrics = match evaluate(&model, &data.test, h.batch_size, cell.seed) {
        Ok(m) => m,
        Err(e) => {
            result.error = Some(e.to_string());
            return Ok((result, None));
        }
    };
    result.status = Status::Ok;
    result.accuracy = Some(metrics.accuracy);
    result.auroc = metrics.auroc;
    result.test_loss = Some(metrics.loss);
    result.epochs_run = history.epochs_run;
    result.best_epoch = Some(history.best_epoch);
    result.best_val_loss = Some(history.best_val_loss);
    if cell.variant.gated() {
        result.gates = Some(model.gates.eval_values(&model.params));
        let mut r = rng::stream(&[cell.seed, GATE_STOCH_TAG]);
        result.gates_stochastic = Some(model.gates.stochastic_means(&model.params, GATE_DRAWS, &mut r));
    }
    Ok((result, Some(model)))
}

/// Parse ledger lines, ignoring a torn final line.
pub fn read_results(path: &Path) -> Result<Vec<ExperimentResult>> {
    let text = match fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(io_err(path)(e)),
    };
    let complete = text.ends_with('\n');
    let lines: Vec<&str> = text.lines().collect();
    let mut out = Vec::new();
    for (i, line) in lines.iter().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str(line) {
            Ok(r) => out.push(r),
            Err(_) if i + 1 == lines.len() && !complete => {}
            Err(e) => return Err(ExperimentError::Invalid(format!("{} line {}: {e}", path.display(), i + 1))),
        }
    }
    Ok(out)
}

/// Drop a torn final line so appends start on a fresh line.
fn repair_ledger(path: &Path) -> Result<()> {
    let Ok(text) = fs::read_to_string(path) else {
        return Ok(());
    };
    if !text.is_empty() && !text.ends_with('\n') {
        let keep = text.rfind('\n').map_or(0, |i| i + 1);
        fs::write(path, &text[..keep]).map_err(io_err(path))?;
    }
    Ok(())
}

fn append_line(path: &Path, line: &str) -> Result<()> {
    let mut f = fs::OpenOptions::new().create(true).append(true).open(path).map_err(io_err(path))?;
    f.write_all(format!("{line}\n").as_bytes()).map_err(io_err(path))
}

/// Worker count from `TANDEM_WORKERS`, defaulting to the available cores.
pub fn worker_count() -> usize {
    std::env::var("TANDEM_WORKERS")
        .ok()
        .and_then(|v| v.parse().ok())
        .filter(|&n: &usize| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct TrainSummary {
    pub trained: usize,
    pub skipped: usize,
    pub failed: usize,
}

/// Train the selected cells not yet in the ledger. Cells run on a pool of
/// `workers` threads; results are appended in canonical cell order.
pub fn train_cells(run: &Run, selector: &CellSelector, workers: usize) -> Result<TrainSummary> {
    let cells = selector.select(run)?;
    for entry in &run.datasets {
        if cells.iter().any(|c| c.dataset == entry.name) && !run.prepared_dir(&entry.name).join("prepared.json").is_file() {
            return Err(ExperimentError::NotPrepared(entry.name.clone()));
        }
    }
    fs::create_dir_all(&run.output).map_err(io_err(&run.output))?;
    let ledger = run.results_path();
    repair_ledger(&ledger)?;
    let done: HashSet<String> = read_results(&ledger)?.iter().map(|r| r.cell().key()).collect();
    let todo: Vec<Cell> = cells.into_iter().filter(|c| !done.contains(&c.key())).collect();
    let mut summary = TrainSummary {
        skipped: done.len(),
        ..TrainSummary::default()
    };
    if todo.is_empty() {
        return Ok(summary);
    }

    let mut datasets = BTreeMap::new();
    for c in &todo {
        if !datasets.contains_key(&c.dataset) {
            datasets.insert(c.dataset.clone(), load_dataset(&run.dataset(&c.dataset)?.manifest)?);
        }
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| ExperimentError::Invalid(format!("worker pool: {e}")))?;

    let mut triples: Vec<(String, Backbone, Variant)> = Vec::new();
    for c in &todo {
        let t = (c.dataset.clone(), c.backbone, c.variant);
        if !triples.contains(&t) {
            triples.push(t);
        }
    }
    let hypers: Vec<Hyperparameters> = pool.install(|| {
        triples
            .par_iter()
            .map(|(d, b, v)| tuned(run, &datasets[d], d, *b, *v))
            .collect::<Result<Vec<_>>>()
    })?;
    let hyper = |c: &Cell| hypers[triples.iter().position(|t| t.0 == c.dataset && t.1 == c.backbone && t.2 == c.variant).expect("triple")];

    let total = todo.len();
    let (tx, rx) = mpsc::channel::<(usize, Result<(ExperimentResult, f64)>)>();
    let collector = move |rx: mpsc::Receiver<(usize, Result<(ExperimentResult, f64)>)>| -> Result<TrainSummary> {
        let mut pending = BTreeMap::new();
        let mut next = 0;
        let mut first_err = None;
        let mut s = summary;
        for (i, r) in rx {
            pending.insert(i, r);
            while let Some(r) = pending.remove(&next) {
                match r {
                    Ok((res, secs)) => {
                        let key = res.cell().key();
                        eprintln!(
                            "[{}/{total}] {key}: {} ({} epochs, {secs:.1}s)",
                            next + 1,
                            res.accuracy.map_or_else(|| format!("failed: {}", res.error.as_deref().unwrap_or("")), |a| format!("accuracy {a:.3}")),
                            res.epochs_run,
                        );
                        if first_err.is_none() {
                            let line = serde_json::to_string(&res).expect("result serializes");
                            if let Err(e) = append_line(&ledger, &line)
                                .and_then(|()| append_line(&run.timings_path(), &serde_json::to_string(&Timing { cell: key, seconds: secs }).expect("timing serializes")))
                            {
                                first_err = Some(e);
                            }
                        }
                        if res.status == Status::Ok {
                            s.trained += 1;
                        } else {
                            s.failed += 1;
                        }
                    }
                    Err(e) => {
                        eprintln!("[{}/{total}] error: {e}", next + 1);
                        first_err.get_or_insert(e);
                    }
                }
                next += 1;
            }
        }
        first_err.map_or(Ok(s), Err)
    };

    std::thread::scope(|scope| {
        let handle = scope.spawn(move || collector(rx));
        pool.install(|| {
            todo.par_iter().enumerate().for_each_with(tx, |tx, (i, cell)| {
                let start = Instant::now();
                let out = run_cell(run, &datasets[&cell.dataset], cell, &hyper(cell)).and_then(|(res, model)| {
                    if let Some(m) = model {
                        let path = run.checkpoint_path(cell);
                        let dir = path.parent().expect("checkpoint dir");
                        fs::create_dir_all(dir).map_err(io_err(dir))?;
                        let tmp = path.with_extension("tmp");
                        checkpoint::save(&m, &tmp)?;
                        fs::rename(&tmp, &path).map_err(io_err(&path))?;
                    }
                    Ok((res, start.elapsed().as_secs_f64()))
                });
                let _ = tx.send((i, out));
            });
        });
        summary = handle.join().expect("collector thread panicked")?;
        Ok::<(), ExperimentError>(())
    })?;
    Ok(summary)
}

/// Per-head `T × T` attention matrices of the given test samples for every
/// attended stream of a trained cell, one CSV per (sample, stream, head).
pub fn dump_attention(run: &Run, cell: &Cell, indices: &[usize], out: &Path) -> Result<Vec<PathBuf>> {
    if cell.variant == Variant::NoAttention {
        return Err(ExperimentError::Invalid("no_attention has no attention weights".into()));
    }
    let path = run.checkpoint_path(cell);
    if !path.is_file() {
        return Err(ExperimentError::NotPrepared(format!("no checkpoint for {}", cell.key())));
    }
    let model = checkpoint::load(&path)?;
    let dataset = load_dataset(&run.dataset(&cell.dataset)?.manifest)?;
    let data = cell_data(run, &dataset, &cell.dataset, cell.rate, cell.seed)?;
    let mut written = Vec::new();
    for &i in indices {
        let sample = data
            .test
            .get(i)
            .ok_or_else(|| ExperimentError::Invalid(format!("test split has {} samples, asked for index {i}", data.test.len())))?;
        let dir = out.join(format!(
            "{}_{}_{}_rate{}_seed{}",
            cell.dataset,
            cell.backbone.name(),
            cell.variant.name(),
            cell.rate,
            cell.seed
        ))
        .join(format!("sample{i}"));
        fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        for &stream in cell.variant.streams() {
            let mut noise = Noise::seeded(0, [eval_noise_seed(cell.seed, i)]);
            let heads = model.attention_scores(sample, stream, &mut noise)?;
            for (h, w) in heads.iter().enumerate() {
                let file = dir.join(format!("{}_head{h}.csv", stream.name()));
                write_matrix(&file, w.data(), *w.shape().last().unwrap_or(&1))?;
                written.push(file);
            }
        }
    }
    Ok(written)
}

fn write_matrix(path: &Path, data: &[f64], cols: usize) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| ExperimentError::Invalid(format!("{}: {e}", path.display())))?;
    for row in data.chunks(cols) {
        w.write_record(row.iter().map(|v| format!("{v}")))
            .map_err(|e| ExperimentError::Invalid(format!("{}: {e}", path.display())))?;
    }
    w.flush().map_err(io_err(path))
}
