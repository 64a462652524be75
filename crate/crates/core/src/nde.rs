//! Latent trajectories from neural ODE, CDE and SDE backbones.
//!
//! All three use explicit Euler steps on the sample's own time grid and are
//! unrolled on the tape, so gradients are exact for the discretized solver.
//! Vector fields see `[z, t]`.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::nn::{Activation, Bound, Linear, Mlp, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::{Result, Tensor, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Backbone {
    Ode,
    Cde,
    Sde,
}

impl Backbone {
    pub const ALL: [Backbone; 3] = [Backbone::Ode, Backbone::Cde, Backbone::Sde];

    pub fn name(self) -> &'static str {
        match self {
            Backbone::Ode => "ode",
            Backbone::Cde => "cde",
            Backbone::Sde => "sde",
        }
    }
}

impl std::fmt::Display for Backbone {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Backbone {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "ode" => Ok(Backbone::Ode),
            "cde" => Ok(Backbone::Cde),
            "sde" => Ok(Backbone::Sde),
            _ => Err(format!("unknown backbone {s:?} (expected ode, cde or sde)")),
        }
    }
}

/// Time grids for a batch of `rows` series of equal length.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    rows: usize,
    len: usize,
    /// Row-major `[rows, len]`.
    times: Vec<f64>,
    shared: bool,
}

impl Grid {
    pub fn shared(rows: usize, times: &[f64]) -> Self {
        Self {
            rows,
            len: times.len(),
            times: times.repeat(rows),
            shared: true,
        }
    }

    pub fn per_row(rows: &[&[f64]]) -> Result<Self> {
        let len = rows.first().map_or(0, |r| r.len());
        if let Some(bad) = rows.iter().find(|r| r.len() != len) {
            return Err(TensorError::ShapeMismatch {
                op: "grid",
                lhs: vec![len],
                rhs: vec![bad.len()],
            });
        }
        let shared = rows.windows(2).all(|w| w[0] == w[1]);
        Ok(Self {
            rows: rows.len(),
            len,
            times: rows.concat(),
            shared,
        })
    }

    pub fn uniform(rows: usize, steps: usize) -> Self {
        let times: Vec<f64> = (0..=steps).map(|k| k as f64 / steps as f64).collect();
        Self::shared(rows, &times)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn time(&self, row: usize, k: usize) -> f64 {
        self.times[row * self.len + k]
    }

    fn dt(&self, row: usize, k: usize) -> f64 {
        self.time(row, k + 1) - self.time(row, k)
    }

    /// `[rows, 1]` column of `t_k`.
    fn time_column(&self, tape: &mut Tape, k: usize) -> Var {
        let col = (0..self.rows).map(|b| self.time(b, k)).collect();
        tape.constant(Tensor::new(vec![self.rows, 1], col).expect("column shape"))
    }

    /// `Δt_k · v` for `v` of shape `[rows, width]`.
    fn times_dt(&self, tape: &mut Tape, v: Var, k: usize) -> Result<Var> {
        if self.shared {
            return tape.scale(v, self.dt(0, k));
        }
        let width = tape.shape(v)[1];
        let data = (0..self.rows).flat_map(|b| std::iter::repeat_n(self.dt(b, k), width)).collect();
        let c = tape.constant(Tensor::new(vec![self.rows, width], data)?);
        tape.mul(v, c)
    }
}

fn check_state(tape: &Tape, z: Var, kind: &str, step: usize) -> Result<()> {
    if tape.value(z).all_finite() {
        Ok(())
    } else {
        Err(TensorError::NonFinite {
            op: format!("{kind} integration, step {step}"),
        })
    }
}

fn check_start(tape: &Tape, z0: Var, grid: &Grid) -> Result<usize> {
    let s = tape.shape(z0);
    if s.len() != 2 || s[0] != grid.rows() || grid.is_empty() {
        return Err(TensorError::ShapeMismatch {
            op: "integrate",
            lhs: s.to_vec(),
            rhs: vec![grid.rows(), grid.len()],
        });
    }
    Ok(s[1])
}

/// Euler: `z_{k+1} = z_k + Δt_k f(t_k, z_k)`. Returns all `T` states.
pub fn integrate_ode(
    tape: &mut Tape,
    z0: Var,
    grid: &Grid,
    mut field: impl FnMut(&mut Tape, Var, Var) -> Result<Var>,
) -> Result<Vec<Var>> {
    check_start(tape, z0, grid)?;
    let mut states = Vec::with_capacity(grid.len());
    states.push(z0);
    let mut z = z0;
    for k in 0..grid.len() - 1 {
        let t = grid.time_column(tape, k);
        let f = field(tape, t, z)?;
        let step = grid.times_dt(tape, f, k)?;
        z = tape.add(z, step)?;
        check_state(tape, z, "ode", k + 1)?;
        states.push(z);
    }
    Ok(states)
}

/// Euler for a controlled equation:
/// `z_{k+1} = z_k + F(t_k, z_k) (X(t_{k+1}) - X(t_k))`.
///
/// `increments` is `[rows, T-1, channels]` row-major. The field returns
/// `[rows, d_z * channels]`, read as a `d_z × channels` matrix per row.
pub fn integrate_cde(
    tape: &mut Tape,
    z0: Var,
    grid: &Grid,
    increments: &[f64],
    channels: usize,
    mut field: impl FnMut(&mut Tape, Var, Var) -> Result<Var>,
) -> Result<Vec<Var>> {
    let dz = check_start(tape, z0, grid)?;
    let (rows, steps) = (grid.rows(), grid.len() - 1);
    if increments.len() != rows * steps * channels {
        return Err(TensorError::ShapeMismatch {
            op: "integrate_cde",
            lhs: vec![increments.len()],
            rhs: vec![rows, steps, channels],
        });
    }
    let mut states = Vec::with_capacity(grid.len());
    states.push(z0);
    let mut z = z0;
    for k in 0..steps {
        let t = grid.time_column(tape, k);
        let f = field(tape, t, z)?;
        if tape.shape(f) != [rows, dz * channels] {
            return Err(TensorError::ShapeMismatch {
                op: "integrate_cde field",
                lhs: tape.shape(f).to_vec(),
                rhs: vec![rows, dz * channels],
            });
        }
        let fm = tape.reshape(f, &[rows, dz, channels])?;
        let dx: Vec<f64> = (0..rows)
            .flat_map(|b| {
                let off = (b * steps + k) * channels;
                increments[off..off + channels].iter().copied()
            })
            .collect();
        let dx = tape.constant(Tensor::new(vec![rows, channels, 1], dx)?);
        let step = tape.matmul(fm, dx)?;
        let step = tape.reshape(step, &[rows, dz])?;
        z = tape.add(z, step)?;
        check_state(tape, z, "cde", k + 1)?;
        states.push(z);
    }
    Ok(states)
}

/// Euler–Maruyama with diagonal noise:
/// `z_{k+1} = z_k + Δt_k f(t_k, z_k) + g(t_k, z_k) ⊙ ΔB_k`,
/// `ΔB_k ~ N(0, Δt_k)` drawn from `noise[row]`.
pub fn integrate_sde(
    tape: &mut Tape,
    z0: Var,
    grid: &Grid,
    mut drift: impl FnMut(&mut Tape, Var, Var) -> Result<Var>,
    mut diffusion: impl FnMut(&mut Tape, Var, Var) -> Result<Var>,
    noise: &mut [ChaCha8Rng],
) -> Result<Vec<Var>> {
    let dz = check_start(tape, z0, grid)?;
    if noise.len() != grid.rows() {
        return Err(TensorError::ShapeMismatch {
            op: "integrate_sde noise",
            lhs: vec![noise.len()],
            rhs: vec![grid.rows()],
        });
    }
    let mut states = Vec::with_capacity(grid.len());
    states.push(z0);
    let mut z = z0;
    for k in 0..grid.len() - 1 {
        let t = grid.time_column(tape, k);
        let f = drift(tape, t, z)?;
        let g = diffusion(tape, t, z)?;
        let mut db = Vec::with_capacity(grid.rows() * dz);
        for (b, rng) in noise.iter_mut().enumerate() {
            let sd = grid.dt(b, k).sqrt();
            db.extend((0..dz).map(|_| sd * rng.sample::<f64, _>(StandardNormal)));
        }
        let db = tape.constant(Tensor::new(vec![grid.rows(), dz], db)?);
        let det = grid.times_dt(tape, f, k)?;
        let z_det = tape.add(z, det)?;
        let stoch = tape.mul(g, db)?;
        z = tape.add(z_det, stoch)?;
        check_state(tape, z, "sde", k + 1)?;
        states.push(z);
    }
    Ok(states)
}

/// Tanh-terminated MLP over `[z, t]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VectorField {
    pub mlp: Mlp,
}

impl VectorField {
    pub fn new(store: &mut ParamStore, name: &str, dz: usize, output: usize, hidden: usize, layers: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            mlp: Mlp::new(store, name, dz + 1, hidden, layers, output, Activation::Tanh, false, rng),
        }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, t: Var, z: Var) -> Result<Var> {
        let x = tape.concat_last_dim(&[z, t])?;
        self.mlp.forward(tape, p, x)
    }
}

/// `z0 = η(X(t₁))`, a linear map of each channel's first observed value.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct InitialStateNet {
    pub linear: Linear,
}

impl InitialStateNet {
    pub fn new(store: &mut ParamStore, d: usize, dz: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            linear: Linear::new(store, "init", d, dz, true, false, rng),
        }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, first: Var) -> Result<Var> {
        self.linear.forward(tape, p, first)
    }
}

/// Backbone parameters. The CDE field outputs `d_z × path_channels`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NdeBackbone {
    pub kind: Backbone,
    pub init: InitialStateNet,
    pub drift: VectorField,
    pub diffusion: Option<VectorField>,
    pub dz: usize,
    pub path_channels: usize,
}

/// Per-batch inputs the backbone consumes.
pub struct BackboneInput<'a> {
    /// `[rows, d]` first observed values (0 where a channel is never observed).
    pub first: Var,
    pub grid: &'a Grid,
    /// `[rows, T-1, path_channels]` control-path increments.
    pub increments: &'a [f64],
    pub noise: &'a mut [ChaCha8Rng],
}

impl NdeBackbone {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        kind: Backbone,
        d: usize,
        path_channels: usize,
        dz: usize,
        hidden: usize,
        layers: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let init = InitialStateNet::new(store, d, dz, rng);
        let out = if kind == Backbone::Cde { dz * path_channels } else { dz };
        let drift = VectorField::new(store, "field.f", dz, out, hidden, layers, rng);
        let diffusion = (kind == Backbone::Sde).then(|| VectorField::new(store, "field.g", dz, dz, hidden, layers, rng));
        Self {
            kind,
            init,
            drift,
            diffusion,
            dz,
            path_channels,
        }
    }

    pub fn trajectory(&self, tape: &mut Tape, p: &Bound, input: BackboneInput<'_>) -> Result<Vec<Var>> {
        let z0 = self.init.forward(tape, p, input.first)?;
        let f = |tape: &mut Tape, t: Var, z: Var| self.drift.forward(tape, p, t, z);
        match self.kind {
            Backbone::Ode => integrate_ode(tape, z0, input.grid, f),
            Backbone::Cde => integrate_cde(tape, z0, input.grid, input.increments, self.path_channels, f),
            Backbone::Sde => {
                let g_field = self.diffusion.as_ref().expect("sde has a diffusion field");
                let g = |tape: &mut Tape, t: Var, z: Var| g_field.forward(tape, p, t, z);
                integrate_sde(tape, z0, input.grid, f, g, input.noise)
            }
        }
    }
}
