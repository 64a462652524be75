//! Named parameter storage and the dense layers built on it.
//!
//! Parameters live in a [`ParamStore`] between steps. Each forward pass binds
//! every stored tensor as a leaf of a fresh [`Tape`]; layers look up their
//! leaves through [`ParamId`] handles.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::tape::{Tape, Var};
use crate::tensor::{Result, Tensor, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub value: Tensor,
    /// Belongs to the classifier head (own learning-rate multiplier).
    pub classifier: bool,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor, classifier: bool) -> ParamId {
        let name = name.into();
        debug_assert!(self.entries.iter().all(|e| e.name != name), "duplicate parameter {name}");
        self.entries.push(ParamEntry {
            name,
            value,
            classifier,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].value
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    /// Record every parameter as a leaf on `tape`.
    pub fn bind(&self, tape: &mut Tape) -> Bound {
        Bound {
            vars: self.entries.iter().map(|e| tape.param(e.value.clone())).collect(),
        }
    }
}

/// Tape leaves for one forward pass, indexed like the store.
#[derive(Debug, Clone)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

/// Uniform on `±1/sqrt(fan_in)`.
pub fn uniform_init(shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches buffer")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub input: usize,
    pub output: usize,
}

impl Linear {
    /// Weight stored as `[input, output]`.
    pub fn new(store: &mut ParamStore, name: &str, input: usize, output: usize, bias: bool, classifier: bool, rng: &mut ChaCha8Rng) -> Self {
        let weight = store.add(format!("{name}.weight"), uniform_init(&[input, output], input, rng), classifier);
        let bias = bias.then(|| store.add(format!("{name}.bias"), uniform_init(&[output], input, rng), classifier));
        Self {
            weight,
            bias,
            input,
            output,
        }
    }

    /// `x` has shape `[.., input]`; the result has shape `[.., output]`.
    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let shape = tape.shape(x).to_vec();
        if shape.last() != Some(&self.input) {
            return Err(TensorError::ShapeMismatch {
                op: "linear",
                lhs: shape,
                rhs: vec![self.input, self.output],
            });
        }
        let flat_rows: usize = shape[..shape.len() - 1].iter().product();
        let x2 = if shape.len() == 2 { x } else { tape.reshape(x, &[flat_rows, self.input])? };
        let mut y = tape.matmul(x2, p.var(self.weight))?;
        if let Some(b) = self.bias {
            let bb = tape.repeat(p.var(b), flat_rows)?;
            y = tape.add(y, bb)?;
        }
        if shape.len() == 2 {
            Ok(y)
        } else {
            let mut out = shape;
            *out.last_mut().unwrap() = self.output;
            tape.reshape(y, &out)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Identity,
    Relu,
    Tanh,
}

fn activate(tape: &mut Tape, x: Var, act: Activation) -> Result<Var> {
    match act {
        Activation::Identity => Ok(x),
        Activation::Relu => tape.relu(x),
        Activation::Tanh => tape.tanh(x),
    }
}

/// `hidden_layers` ReLU layers of width `hidden`, then a linear output layer
/// followed by `output_act`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    pub output_act: Activation,
}

impl Mlp {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        hidden: usize,
        hidden_layers: usize,
        output: usize,
        output_act: Activation,
        classifier: bool,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let mut layers = Vec::with_capacity(hidden_layers + 1);
        let mut width = input;
        for i in 0..hidden_layers {
            layers.push(Linear::new(store, &format!("{name}.{i}"), width, hidden, true, classifier, rng));
            width = hidden;
        }
        layers.push(Linear::new(store, &format!("{name}.{hidden_layers}"), width, output, true, classifier, rng));
        Self { layers, output_act }
    }

    /// Closed-form scalar parameter count.
    pub fn param_count(input: usize, hidden: usize, hidden_layers: usize, output: usize) -> usize {
        if hidden_layers == 0 {
            return (input + 1) * output;
        }
        (input + 1) * hidden + (hidden_layers - 1) * (hidden + 1) * hidden + (hidden + 1) * output
    }

    pub fn input(&self) -> usize {
        self.layers[0].input
    }

    pub fn output(&self) -> usize {
        self.layers.last().unwrap().output
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let mut h = x;
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(tape, p, h)?;
            h = activate(tape, h, if i == last { self.output_act } else { Activation::Relu })?;
        }
        Ok(h)
    }
}
