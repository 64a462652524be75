//! Gumbel-Sigmoid stream gates and gated fusion.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::nn::{Bound, ParamId, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::{Result, Tensor, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stream {
    /// Zero-filled observations `x̃`.
    Raw,
    /// Control path `X`.
    Path,
    /// Latent trajectory `z`.
    Latent,
}

impl Stream {
    pub const ALL: [Stream; 3] = [Stream::Raw, Stream::Path, Stream::Latent];

    pub fn name(self) -> &'static str {
        match self {
            Stream::Raw => "raw",
            Stream::Path => "path",
            Stream::Latent => "latent",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateMode {
    TrainStochastic,
    EvalDeterministic,
}

/// Standard Gumbel draw `-ln(-ln U)`, `U ~ Uniform(0, 1)` open.
pub fn gumbel(rng: &mut ChaCha8Rng) -> f64 {
    let u: f64 = rng.sample(rand::distr::Open01);
    -(-u.ln()).ln()
}

/// `sigmoid((ℓ + G) / τ)`; `noise = None` is the deterministic gate.
pub fn gate_value(logit: f64, tau: f64, noise: Option<f64>) -> f64 {
    crate::tape::sigmoid((logit + noise.unwrap_or(0.0)) / tau)
}

/// `1` if `σ > 0.5`, else `0`.
pub fn harden(sigma: f64) -> f64 {
    if sigma > 0.5 {
        1.0
    } else {
        0.0
    }
}

/// `1 - exp(-exp(ℓ))`: probability that a `τ → 0` gate exceeds one half.
pub fn exceedance_probability(logit: f64) -> f64 {
    1.0 - (-logit.exp()).exp()
}

#[derive(Debug, Clone, PartialEq)]
pub struct GateBank {
    pub logits: [ParamId; 3],
    pub tau: f64,
}

impl GateBank {
    /// Logits start at zero.
    pub fn new(store: &mut ParamStore, tau: f64) -> std::result::Result<Self, String> {
        check_tau(tau).map_err(|e| e.to_string())?;
        let logits = Stream::ALL.map(|s| store.add(format!("gate.{}", s.name()), Tensor::vector(vec![0.0]), false));
        Ok(Self { logits, tau })
    }

    pub fn logit_values(&self, store: &ParamStore) -> [f64; 3] {
        self.logits.map(|id| store.get(id).data()[0])
    }

    /// Deterministic eval-mode gate values.
    pub fn eval_values(&self, store: &ParamStore) -> [f64; 3] {
        self.logit_values(store).map(|l| gate_value(l, self.tau, None))
    }

    /// Mean of stochastic gate values over `draws` noise samples.
    pub fn stochastic_means(&self, store: &ParamStore, draws: usize, rng: &mut ChaCha8Rng) -> [f64; 3] {
        self.logit_values(store).map(|l| {
            (0..draws).map(|_| gate_value(l, self.tau, Some(gumbel(rng)))).sum::<f64>() / draws as f64
        })
    }

    /// One gate per stream as a `[1]` tape value. Train mode draws fresh
    /// Gumbel noise from `rng`; eval mode uses none. Both keep the gradient
    /// path to the logits.
    pub fn sample(&self, tape: &mut Tape, p: &Bound, mode: GateMode, rng: &mut ChaCha8Rng) -> Result<[Var; 3]> {
        check_tau(self.tau)?;
        let mut out = Vec::with_capacity(3);
        for &id in &self.logits {
            let mut x = p.var(id);
            if mode == GateMode::TrainStochastic {
                let g = tape.constant(Tensor::vector(vec![gumbel(rng)]));
                x = tape.add(x, g)?;
            }
            let x = tape.scale(x, 1.0 / self.tau)?;
            out.push(tape.sigmoid(x)?);
        }
        Ok([out[0], out[1], out[2]])
    }
}

fn check_tau(tau: f64) -> Result<()> {
    if tau > 0.0 && tau.is_finite() {
        Ok(())
    } else {
        Err(TensorError::InvalidShape {
            op: "gumbel_sigmoid",
            shape: vec![],
            reason: format!("temperature must be positive, got {tau}"),
        })
    }
}

/// `concat_k(σ_k · Φ_k)`. Every `Φ_k` must have the same shape.
pub fn fuse(tape: &mut Tape, phis: &[Var], gates: &[Var]) -> Result<Var> {
    if phis.len() != gates.len() || phis.is_empty() {
        return Err(TensorError::ShapeMismatch {
            op: "fuse",
            lhs: vec![phis.len()],
            rhs: vec![gates.len()],
        });
    }
    let first = tape.shape(phis[0]).to_vec();
    let mut parts = Vec::with_capacity(phis.len());
    for (&phi, &g) in phis.iter().zip(gates) {
        if tape.shape(phi) != first.as_slice() {
            return Err(TensorError::ShapeMismatch {
                op: "fuse",
                lhs: first,
                rhs: tape.shape(phi).to_vec(),
            });
        }
        parts.push(tape.mul_scalar(phi, g)?);
    }
    tape.concat_last_dim(&parts)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateSummary {
    pub stream: Stream,
    pub mean: f64,
    /// Sample standard deviation; 0 for a single run.
    pub sd: f64,
    pub stochastic_mean: f64,
}

pub fn mean_sd(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Per-stream mean and sd of eval-mode gate values over runs, with the mean
/// of each run's stochastic gate average alongside.
pub fn gate_report(eval: &[[f64; 3]], stochastic: &[[f64; 3]]) -> Vec<GateSummary> {
    Stream::ALL
        .iter()
        .map(|&s| {
            let vals: Vec<f64> = eval.iter().map(|g| g[s.index()]).collect();
            let st: Vec<f64> = stochastic.iter().map(|g| g[s.index()]).collect();
            let (mean, sd) = mean_sd(&vals);
            GateSummary {
                stream: s,
                mean,
                sd,
                stochastic_mean: if st.is_empty() { f64::NAN } else { mean_sd(&st).0 },
            }
        })
        .collect()
}
