//! The assembled classifier: streams, attention, gates, fusion, head, loss.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attention::{AttentionAxis, StreamAttention};
use crate::data::{Dataset, TimeSeriesSample};
use crate::gating::{harden, GateBank, GateMode, Stream};
use crate::interp::{build_control_path, InterpError, PathOptions};
use crate::nde::{Backbone, BackboneInput, Grid, NdeBackbone};
use crate::nn::{Activation, Bound, Mlp, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Interp(#[from] InterpError),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("invalid batch: {0}")]
    Batch(String),
}

pub type Result<T> = std::result::Result<T, ModelError>;

/// The seven ablation configurations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "tandem")]
    Tandem,
    #[serde(rename = "tandem_soft")]
    TandemSoft,
    #[serde(rename = "concat_all")]
    ConcatAll,
    #[serde(rename = "concat_z_X")]
    ConcatZX,
    #[serde(rename = "concat_z_raw")]
    ConcatZRaw,
    #[serde(rename = "z_only")]
    ZOnly,
    #[serde(rename = "no_attention")]
    NoAttention,
}

impl Variant {
    pub const ALL: [Variant; 7] = [
        Variant::Tandem,
        Variant::TandemSoft,
        Variant::ConcatAll,
        Variant::ConcatZX,
        Variant::ConcatZRaw,
        Variant::ZOnly,
        Variant::NoAttention,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Tandem => "tandem",
            Variant::TandemSoft => "tandem_soft",
            Variant::ConcatAll => "concat_all",
            Variant::ConcatZX => "concat_z_X",
            Variant::ConcatZRaw => "concat_z_raw",
            Variant::ZOnly => "z_only",
            Variant::NoAttention => "no_attention",
        }
    }

    /// Attended streams feeding the classifier, in canonical order.
    pub fn streams(self) -> &'static [Stream] {
        match self {
            Variant::Tandem | Variant::TandemSoft | Variant::ConcatAll => &[Stream::Raw, Stream::Path, Stream::Latent],
            Variant::ConcatZX => &[Stream::Path, Stream::Latent],
            Variant::ConcatZRaw => &[Stream::Raw, Stream::Latent],
            Variant::ZOnly => &[Stream::Latent],
            Variant::NoAttention => &[],
        }
    }

    pub fn gated(self) -> bool {
        matches!(self, Variant::Tandem | Variant::TandemSoft)
    }

    /// Hard 0/1 gates at evaluation time.
    pub fn hard_at_eval(self) -> bool {
        self == Variant::Tandem
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Variant {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| format!("unknown variant {s:?}"))
    }
}

fn default_tau() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TandemConfig {
    pub backbone: Backbone,
    pub variant: Variant,
    /// Input channels.
    pub d: usize,
    pub d_z: usize,
    pub d_h: usize,
    #[serde(rename = "H")]
    pub heads: usize,
    /// Hidden layers per vector field.
    pub n_l: usize,
    /// Hidden width per vector field.
    pub n_h: usize,
    #[serde(rename = "C")]
    pub classes: usize,
    pub seed: u64,
    #[serde(default = "default_tau")]
    pub tau: f64,
    #[serde(default)]
    pub axis: AttentionAxis,
    #[serde(default)]
    pub path: PathOptions,
}

impl TandemConfig {
    pub fn new(backbone: Backbone, variant: Variant, d: usize, classes: usize) -> Self {
        Self {
            backbone,
            variant,
            d,
            d_z: 16,
            d_h: 32,
            heads: 4,
            n_l: 2,
            n_h: 32,
            classes,
            seed: 0,
            tau: 1.0,
            axis: AttentionAxis::Temporal,
            path: PathOptions::default(),
        }
    }

    pub fn path_channels(&self) -> usize {
        self.d + usize::from(self.path.append_time)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("d", self.d),
            ("d_z", self.d_z),
            ("d_h", self.d_h),
            ("H", self.heads),
            ("n_l", self.n_l),
            ("n_h", self.n_h),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(ModelError::Config(format!("{name} must be positive")));
        }
        if self.classes < 2 {
            return Err(ModelError::Config(format!("need at least 2 classes, got {}", self.classes)));
        }
        if self.d_h % self.heads != 0 {
            return Err(ModelError::Config(format!("d_h = {} is not a multiple of H = {}", self.d_h, self.heads)));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(ModelError::Config(format!("temperature must be positive, got {}", self.tau)));
        }
        Ok(())
    }

    pub fn classifier_input(&self) -> usize {
        match self.variant {
            Variant::NoAttention => self.d_z,
            v => v.streams().len() * self.d_h,
        }
    }
}

/// Everything a forward pass needs from one sample, computed once.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedSample {
    pub times: Vec<f64>,
    /// Zero-filled values `[T, d]`.
    pub raw: Vec<f64>,
    /// Control path on the grid `[T, path_channels]`.
    pub path: Vec<f64>,
    pub first: Vec<f64>,
    pub label: usize,
}

impl PreparedSample {
    pub fn new(sample: &TimeSeriesSample, options: PathOptions) -> Result<Self> {
        let path = build_control_path(sample, options)?;
        Ok(Self {
            times: sample.times().to_vec(),
            raw: sample.zero_filled(),
            path: path.eval_grid(sample.times())?,
            first: sample.first_observed(),
            label: sample.label(),
        })
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }
}

pub fn prepare_dataset(dataset: &Dataset, options: PathOptions) -> Result<Vec<PreparedSample>> {
    dataset.samples.iter().map(|s| PreparedSample::new(s, options)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ForwardOptions {
    pub mode: Mode,
    /// Fixed gate values replacing the gate bank (gated variants only).
    pub gate_override: Option<[f64; 3]>,
    /// Apply the variant's inference-time hardening in eval mode.
    pub harden: bool,
}

impl ForwardOptions {
    pub fn train() -> Self {
        Self {
            mode: Mode::Train,
            gate_override: None,
            harden: false,
        }
    }

    /// Inference: deterministic gates, hardened for `tandem`.
    pub fn eval() -> Self {
        Self {
            mode: Mode::Eval,
            gate_override: None,
            harden: true,
        }
    }

    /// Deterministic soft gates for every variant; used for snapshot
    /// selection, where a thresholded gate would make the loss flat in the
    /// logits.
    pub fn validation() -> Self {
        Self {
            harden: false,
            ..Self::eval()
        }
    }
}

/// Random streams consumed by one forward pass: Gumbel gate noise and one
/// Brownian stream per batch row.
#[derive(Debug, Clone)]
pub struct Noise {
    pub gate: ChaCha8Rng,
    pub sde: Vec<ChaCha8Rng>,
}

impl Noise {
    pub fn seeded(gate_seed: u64, sde_seeds: impl IntoIterator<Item = u64>) -> Self {
        Self {
            gate: ChaCha8Rng::seed_from_u64(gate_seed),
            sde: sde_seeds.into_iter().map(ChaCha8Rng::seed_from_u64).collect(),
        }
    }
}

pub struct ForwardOutput {
    /// `[B, C]` class probabilities.
    pub probs: Var,
    /// Classifier input `[B, width]`.
    pub features: Var,
    /// Attended final-time vectors per active stream.
    pub attended: Vec<(Stream, Var)>,
    /// Gate values applied (gated variants only).
    pub gates: Option<[f64; 3]>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TandemModel {
    pub config: TandemConfig,
    pub params: ParamStore,
    pub backbone: NdeBackbone,
    pub attention: [StreamAttention; 3],
    pub gates: GateBank,
    pub classifier: Mlp,
}

struct BatchInputs {
    rows: usize,
    len: usize,
    grid: Grid,
    raw: Tensor,
    path: Tensor,
    first: Tensor,
    increments: Vec<f64>,
}

impl TandemModel {
    /// Parameters are created in a fixed order (backbone, the three attention
    /// blocks, gates, classifier) from a generator seeded by `config.seed`,
    /// so variants with the same seed share every common initial weight.
    pub fn new(config: TandemConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(crate::rng::derive_seed(&[config.seed, 0x494E_4954]));
        let mut params = ParamStore::new();
        let backbone = NdeBackbone::new(
            &mut params,
            config.backbone,
            config.d,
            config.path_channels(),
            config.d_z,
            config.n_h,
            config.n_l,
            &mut rng,
        );
        let dims = [config.d, config.path_channels(), config.d_z];
        let mut blocks = Vec::with_capacity(3);
        for s in Stream::ALL {
            let name = format!("attn.{}", s.name());
            let block = StreamAttention::new(&mut params, &name, dims[s.index()], config.d_h, config.heads, config.axis, &mut rng)
                .map_err(ModelError::Config)?;
            blocks.push(block);
        }
        let attention: [StreamAttention; 3] = blocks.try_into().expect("three streams");
        let gates = GateBank::new(&mut params, config.tau).map_err(ModelError::Config)?;
        let width = config.classifier_input();
        let classifier = Mlp::new(&mut params, "classifier", width, width, 1, config.classes, Activation::Identity, true, &mut rng);
        Ok(Self {
            config,
            params,
            backbone,
            attention,
            gates,
            classifier,
        })
    }

    fn batch_inputs(&self, batch: &[&PreparedSample]) -> Result<BatchInputs> {
        let Some(first) = batch.first() else {
            return Err(ModelError::Batch("empty batch".into()));
        };
        let (rows, len, d, dc) = (batch.len(), first.len(), self.config.d, self.config.path_channels());
        for s in batch {
            if s.len() != len {
                return Err(ModelError::Batch(format!(
                    "series lengths differ within a batch ({} vs {len}); rescale to a common length first",
                    s.len()
                )));
            }
            if s.raw.len() != len * d || s.path.len() != len * dc {
                return Err(ModelError::Batch(format!(
                    "sample has {} channels, model expects d = {d}",
                    s.raw.len() / len.max(1)
                )));
            }
            if s.label == 0 || s.label > self.config.classes {
                return Err(ModelError::Batch(format!("label {} outside 1..={}", s.label, self.config.classes)));
            }
        }
        let time_rows: Vec<&[f64]> = batch.iter().map(|s| s.times.as_slice()).collect();
        let grid = Grid::per_row(&time_rows)?;
        let mut increments = Vec::with_capacity(rows * (len - 1) * dc);
        for s in batch {
            for k in 0..len - 1 {
                for c in 0..dc {
                    increments.push(s.path[(k + 1) * dc + c] - s.path[k * dc + c]);
                }
            }
        }
        Ok(BatchInputs {
            rows,
            len,
            grid,
            raw: Tensor::new(vec![rows, len, d], batch.iter().flat_map(|s| s.raw.iter().copied()).collect())?,
            path: Tensor::new(vec![rows, len, dc], batch.iter().flat_map(|s| s.path.iter().copied()).collect())?,
            first: Tensor::new(vec![rows, d], batch.iter().flat_map(|s| s.first.iter().copied()).collect())?,
            increments,
        })
    }

    /// Latent trajectory as `[B, T, d_z]`, plus its final state `[B, d_z]`.
    fn latent(&self, tape: &mut Tape, p: &Bound, inputs: &BatchInputs, noise: &mut Noise) -> Result<(Var, Var)> {
        if noise.sde.len() < inputs.rows && self.config.backbone == Backbone::Sde {
            return Err(ModelError::Batch(format!(
                "{} Brownian streams for {} rows",
                noise.sde.len(),
                inputs.rows
            )));
        }
        let first = tape.constant(inputs.first.clone());
        let rows = inputs.rows.min(noise.sde.len());
        let states = self.backbone.trajectory(
            tape,
            p,
            BackboneInput {
                first,
                grid: &inputs.grid,
                increments: &inputs.increments,
                noise: &mut noise.sde[..rows],
            },
        )?;
        let last = *states.last().expect("non-empty trajectory");
        let flat = if states.len() == 1 { states[0] } else { tape.concat_last_dim(&states)? };
        let seq = tape.reshape(flat, &[inputs.rows, inputs.len, self.config.d_z])?;
        Ok((seq, last))
    }

    fn stream_seq(&self, tape: &mut Tape, stream: Stream, inputs: &BatchInputs, latent: Var) -> Var {
        match stream {
            Stream::Raw => tape.constant(inputs.raw.clone()),
            Stream::Path => tape.constant(inputs.path.clone()),
            Stream::Latent => latent,
        }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, batch: &[&PreparedSample], opts: ForwardOptions, noise: &mut Noise) -> Result<ForwardOutput> {
        let inputs = self.batch_inputs(batch)?;
        let (seq, last) = self.latent(tape, p, &inputs, noise)?;
        let variant = self.config.variant;

        let mut attended = Vec::new();
        for &s in variant.streams() {
            let x = self.stream_seq(tape, s, &inputs, seq);
            let out = self.attention[s.index()].attend_last(tape, p, x)?.output;
            tape.ensure_finite(out, &format!("attention.{}", s.name()))?;
            attended.push((s, out));
        }

        let mut gate_values = None;
        let features = if variant == Variant::NoAttention {
            last
        } else if variant.gated() {
            let gates: [Var; 3] = match opts.gate_override {
                Some(g) => g.map(|v| tape.constant(Tensor::vector(vec![v]))),
                None => {
                    let mode = match opts.mode {
                        Mode::Train => GateMode::TrainStochastic,
                        Mode::Eval => GateMode::EvalDeterministic,
                    };
                    let soft = self.gates.sample(tape, p, mode, &mut noise.gate)?;
                    if opts.mode == Mode::Eval && opts.harden && variant.hard_at_eval() {
                        soft.map(|g| tape.constant(Tensor::vector(vec![harden(tape.value(g).data()[0])])))
                    } else {
                        soft
                    }
                }
            };
            gate_values = Some(gates.map(|g| tape.value(g).data()[0]));
            let phis: Vec<Var> = attended.iter().map(|a| a.1).collect();
            crate::gating::fuse(tape, &phis, &gates)?
        } else if attended.len() == 1 {
            attended[0].1
        } else {
            let phis: Vec<Var> = attended.iter().map(|a| a.1).collect();
            tape.concat_last_dim(&phis)?
        };

        let logits = self.classifier.forward(tape, p, features)?;
        let probs = tape.softmax_last_dim(logits)?;
        tape.ensure_finite(probs, "classifier")?;
        Ok(ForwardOutput {
            probs,
            features,
            attended,
            gates: gate_values,
        })
    }

    /// Per-head attention weight matrices for one sample and stream
    /// (`[1, T, T]` each on the temporal axis), evaluated in eval mode.
    pub fn attention_scores(&self, sample: &PreparedSample, stream: Stream, noise: &mut Noise) -> Result<Vec<Tensor>> {
        let mut tape = Tape::with_checks(false);
        let p = self.params.bind(&mut tape);
        let inputs = self.batch_inputs(&[sample])?;
        let (seq, _) = self.latent(&mut tape, &p, &inputs, noise)?;
        let x = self.stream_seq(&mut tape, stream, &inputs, seq);
        Ok(self.attention[stream.index()].scores(&mut tape, &p, x)?)
    }

    /// Class probabilities for each sample, in batches of `batch_size`.
    /// Row `i` draws Brownian increments from `sde_seed(i)`.
    pub fn predict(&self, samples: &[PreparedSample], batch_size: usize, sde_seed: impl Fn(usize) -> u64) -> Result<Vec<Vec<f64>>> {
        let mut out = Vec::with_capacity(samples.len());
        let idx: Vec<usize> = (0..samples.len()).collect();
        for chunk in idx.chunks(batch_size.max(1)) {
            let batch: Vec<&PreparedSample> = chunk.iter().map(|&i| &samples[i]).collect();
            let mut noise = Noise::seeded(0, chunk.iter().map(|&i| sde_seed(i)));
            let mut tape = Tape::with_checks(false);
            let p = self.params.bind(&mut tape);
            let f = self.forward(&mut tape, &p, &batch, ForwardOptions::eval(), &mut noise)?;
            let probs = tape.value(f.probs);
            out.extend((0..chunk.len()).map(|r| probs.row(r).to_vec()));
        }
        Ok(out)
    }
}

pub const LOG_FLOOR: f64 = 1e-12;

/// Mean cross-entropy `-(1/N) Σ log max(ŷ_y, 1e-12)`.
pub fn cross_entropy(tape: &mut Tape, probs: Var, labels: &[usize]) -> Result<Var> {
    let shape = tape.shape(probs).to_vec();
    let [n, c] = shape[..] else {
        return Err(ModelError::Batch(format!("probabilities must be [N, C], got {shape:?}")));
    };
    if n == 0 || labels.is_empty() {
        return Err(ModelError::Batch("empty batch".into()));
    }
    if labels.len() != n {
        return Err(ModelError::Batch(format!("{} labels for {n} rows", labels.len())));
    }
    let mut onehot = vec![0.0; n * c];
    for (i, &y) in labels.iter().enumerate() {
        if y == 0 || y > c {
            return Err(ModelError::Batch(format!("label {y} outside 1..={c}")));
        }
        onehot[i * c + y - 1] = 1.0;
    }
    let clamped = tape.clamp_min(probs, LOG_FLOOR)?;
    let logp = tape.log(clamped)?;
    let y = tape.constant(Tensor::new(vec![n, c], onehot)?);
    let picked = tape.mul(logp, y)?;
    let total = tape.sum(picked)?;
    Ok(tape.scale(total, -1.0 / n as f64)?)
}

/// Batch loss: forward then cross-entropy.
pub fn batch_loss(model: &TandemModel, tape: &mut Tape, p: &Bound, batch: &[&PreparedSample], opts: ForwardOptions, noise: &mut Noise) -> Result<(Var, ForwardOutput)> {
    let out = model.forward(tape, p, batch, opts, noise)?;
    let labels: Vec<usize> = batch.iter().map(|s| s.label).collect();
    let loss = cross_entropy(tape, out.probs, &labels)?;
    Ok((loss, out))
}
