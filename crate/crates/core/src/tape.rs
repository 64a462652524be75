//! Define-by-run reverse-mode differentiation.
//!
//! Every operation applied through a [`Tape`] computes its value eagerly and
//! appends a node that remembers its inputs. Nodes are only ever appended, so
//! inputs always precede their consumers and [`Tape::backward`] is a single
//! reverse sweep over the node list.
//!
//! ```
//! use tandem::tape::Tape;
//! use tandem::tensor::Tensor;
//!
//! let mut tape = Tape::new();
//! let x = tape.param(Tensor::vector(vec![1.0, 2.0]));
//! let sq = tape.mul(x, x).unwrap();
//! let y = tape.sum(sq).unwrap();
//! let grads = tape.backward(y).unwrap();
//! assert_eq!(grads.get(x).unwrap().data(), &[2.0, 4.0]);
//! ```
//!
//! Broadcasting is limited to scalar-times-tensor ([`Tape::mul_scalar`],
//! [`Tape::scale`]); everything else must have matching shapes or go through
//! an explicit shape op.

use std::sync::atomic::{AtomicU64, Ordering};

use crate::tensor::{Result, Tensor, TensorError};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a node on a specific tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var {
    id: usize,
    tape: u64,
}

impl Var {
    pub fn index(self) -> usize {
        self.id
    }
}

#[derive(Debug, Clone)]
enum Op {
    Param,
    Constant,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    MulScalar(usize, usize),
    Scale(usize, f64),
    MatMul(usize, usize),
    Transpose(usize),
    Reshape(usize),
    Relu(usize),
    Tanh(usize),
    Sigmoid(usize),
    Exp(usize),
    Log(usize),
    ClampMin(usize, f64),
    Softmax(usize),
    Concat(Vec<usize>),
    Slice { input: usize, start: usize },
    Repeat(usize),
    Sum(usize),
    Mean(usize),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Param => "param",
            Op::Constant => "constant",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::MulScalar(..) => "mul_scalar",
            Op::Scale(..) => "scale",
            Op::MatMul(..) => "matmul",
            Op::Transpose(..) => "transpose",
            Op::Reshape(..) => "reshape",
            Op::Relu(..) => "relu",
            Op::Tanh(..) => "tanh",
            Op::Sigmoid(..) => "sigmoid",
            Op::Exp(..) => "exp",
            Op::Log(..) => "log",
            Op::ClampMin(..) => "clamp_min",
            Op::Softmax(..) => "softmax_last_dim",
            Op::Concat(..) => "concat_last_dim",
            Op::Slice { .. } => "slice_last_dim",
            Op::Repeat(..) => "repeat",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Append-only record of tensor operations.
#[derive(Debug)]
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
    checked: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of a scalar with respect to the leaves of a tape.
#[derive(Debug, Clone)]
pub struct Gradients {
    tape: u64,
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient for a parameter leaf. Parameters that do not influence the
    /// output get an all-zero gradient of their own shape.
    pub fn get(&self, var: Var) -> Result<Tensor> {
        if var.tape != self.tape || var.id >= self.shapes.len() {
            return Err(TensorError::UnknownNode);
        }
        Ok(self.grads[var.id]
            .clone()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[var.id])))
    }
}

impl Tape {
    /// Finite-value checking follows `debug_assertions`.
    pub fn new() -> Self {
        Self::with_checks(cfg!(debug_assertions))
    }

    pub fn with_checks(checked: bool) -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            checked,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn node(&self, v: Var) -> Result<&Node> {
        if v.tape != self.id {
            return Err(TensorError::UnknownNode);
        }
        self.nodes.get(v.id).ok_or(TensorError::UnknownNode)
    }

    /// Value of a recorded node.
    ///
    /// Panics if `v` belongs to another tape.
    pub fn value(&self, v: Var) -> &Tensor {
        &self.node(v).expect("variable from a different tape").value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Result<Var> {
        if self.checked && !value.all_finite() {
            return Err(TensorError::NonFinite {
                op: op.name().to_string(),
            });
        }
        let needs_grad = match &op {
            Op::Param => true,
            Op::Constant => false,
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::MulScalar(a, b) | Op::MatMul(a, b) => {
                self.nodes[*a].needs_grad || self.nodes[*b].needs_grad
            }
            Op::Concat(ins) => ins.iter().any(|&i| self.nodes[i].needs_grad),
            Op::Scale(a, _)
            | Op::Transpose(a)
            | Op::Reshape(a)
            | Op::Relu(a)
            | Op::Tanh(a)
            | Op::Sigmoid(a)
            | Op::Exp(a)
            | Op::Log(a)
            | Op::ClampMin(a, _)
            | Op::Softmax(a)
            | Op::Slice { input: a, .. }
            | Op::Repeat(a)
            | Op::Sum(a)
            | Op::Mean(a) => self.nodes[*a].needs_grad,
        };
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Ok(Var {
            id: self.nodes.len() - 1,
            tape: self.id,
        })
    }

    /// Trainable leaf: receives a gradient in [`Tape::backward`].
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Param)
            .expect("parameter tensors must be finite")
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Constant,
            needs_grad: false,
        });
        Var {
            id: self.nodes.len() - 1,
            tape: self.id,
        }
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.node(a)?.value.shape(), self.node(b)?.value.shape());
        if sa != sb {
            return Err(TensorError::ShapeMismatch {
                op,
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y);
        self.push(v, Op::Add(a.id, b.id))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y);
        self.push(v, Op::Sub(a.id, b.id))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y);
        self.push(v, Op::Mul(a.id, b.id))
    }

    /// `t * s` where `s` has shape `[]` or `[1]`.
    pub fn mul_scalar(&mut self, t: Var, s: Var) -> Result<Var> {
        let sv = self.node(s)?.value.clone();
        let Some(k) = sv.item() else {
            return Err(TensorError::ShapeMismatch {
                op: "mul_scalar",
                lhs: self.node(t)?.value.shape().to_vec(),
                rhs: sv.shape().to_vec(),
            });
        };
        let v = self.node(t)?.value.map(|x| x * k);
        self.push(v, Op::MulScalar(t.id, s.id))
    }

    /// Multiply by a fixed constant.
    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let v = self.node(a)?.value.map(|x| x * c);
        self.push(v, Op::Scale(a.id, c))
    }

    /// Matrix product. Supports `[m,k]·[k,n]`, batched `[b,m,k]·[b,k,n]` and
    /// `[b,m,k]·[k,n]` with a shared right-hand side.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (&self.node(a)?.value, &self.node(b)?.value);
        let dims = matmul_dims(av.shape(), bv.shape())?;
        let mut out = vec![0.0; dims.batch * dims.m * dims.n];
        for bi in 0..dims.batch {
            let a_off = bi * dims.m * dims.k;
            let b_off = if dims.shared_rhs { 0 } else { bi * dims.k * dims.n };
            let o_off = bi * dims.m * dims.n;
            gemm(
                &av.data()[a_off..a_off + dims.m * dims.k],
                &bv.data()[b_off..b_off + dims.k * dims.n],
                &mut out[o_off..o_off + dims.m * dims.n],
                dims.m,
                dims.k,
                dims.n,
            );
        }
        let shape = if av.rank() == 3 {
            vec![dims.batch, dims.m, dims.n]
        } else {
            vec![dims.m, dims.n]
        };
        let v = Tensor::new(shape, out)?;
        self.push(v, Op::MatMul(a.id, b.id))
    }

    /// Swap the last two dimensions of a rank-2 or rank-3 tensor.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let av = &self.node(a)?.value;
        let v = transpose_last2(av, "transpose")?;
        self.push(v, Op::Transpose(a.id))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let v = self.node(a)?.value.reshape(shape)?;
        self.push(v, Op::Reshape(a.id))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let v = self.node(a)?.value.map(|x| x.max(0.0));
        self.push(v, Op::Relu(a.id))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let v = self.node(a)?.value.map(f64::tanh);
        self.push(v, Op::Tanh(a.id))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let v = self.node(a)?.value.map(sigmoid);
        self.push(v, Op::Sigmoid(a.id))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let v = self.node(a)?.value.map(f64::exp);
        self.push(v, Op::Exp(a.id))
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        let v = self.node(a)?.value.map(f64::ln);
        self.push(v, Op::Log(a.id))
    }

    /// `max(x, floor)`; the gradient is zero where the floor is active.
    pub fn clamp_min(&mut self, a: Var, floor: f64) -> Result<Var> {
        let v = self.node(a)?.value.map(|x| x.max(floor));
        self.push(v, Op::ClampMin(a.id, floor))
    }

    pub fn softmax_last_dim(&mut self, a: Var) -> Result<Var> {
        let av = &self.node(a)?.value;
        if av.rank() == 0 || av.last_dim() == 0 {
            return Err(TensorError::InvalidShape {
                op: "softmax_last_dim",
                shape: av.shape().to_vec(),
                reason: "needs a non-empty last dimension".into(),
            });
        }
        let n = av.last_dim();
        let mut out = av.data().to_vec();
        for row in out.chunks_mut(n) {
            softmax_in_place(row);
        }
        let v = Tensor::new(av.shape().to_vec(), out)?;
        self.push(v, Op::Softmax(a.id))
    }

    /// Concatenate along the last dimension; leading dimensions must agree.
    pub fn concat_last_dim(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(TensorError::InvalidShape {
                op: "concat_last_dim",
                shape: vec![],
                reason: "no inputs".into(),
            });
        };
        let lead = {
            let s = self.node(first)?.value.shape();
            if s.is_empty() {
                return Err(TensorError::InvalidShape {
                    op: "concat_last_dim",
                    shape: vec![],
                    reason: "rank-0 input".into(),
                });
            }
            s[..s.len() - 1].to_vec()
        };
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.node(p)?.value.shape();
            if s.is_empty() || s[..s.len() - 1] != lead[..] {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_last_dim",
                    lhs: self.value(first).shape().to_vec(),
                    rhs: s.to_vec(),
                });
            }
            widths.push(s[s.len() - 1]);
        }
        let rows: usize = lead.iter().product();
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.nodes[p.id].value.data()[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead;
        shape.push(total);
        let v = Tensor::new(shape, out)?;
        self.push(v, Op::Concat(parts.iter().map(|p| p.id).collect()))
    }

    /// Columns `start..start+len` of the last dimension.
    pub fn slice_last_dim(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let av = &self.node(a)?.value;
        let w = av.last_dim();
        if av.rank() == 0 || start + len > w {
            return Err(TensorError::InvalidShape {
                op: "slice_last_dim",
                shape: av.shape().to_vec(),
                reason: format!("range {start}..{} out of bounds", start + len),
            });
        }
        let rows = av.len() / w.max(1);
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&av.data()[r * w + start..r * w + start + len]);
        }
        let mut shape = av.shape().to_vec();
        *shape.last_mut().unwrap() = len;
        let v = Tensor::new(shape, out)?;
        self.push(v, Op::Slice { input: a.id, start })
    }

    /// Stack `n` copies along a new leading axis: `s -> [n, ..s]`.
    pub fn repeat(&mut self, a: Var, n: usize) -> Result<Var> {
        let av = &self.node(a)?.value;
        let mut shape = vec![n];
        shape.extend_from_slice(av.shape());
        let v = Tensor::new(shape, av.data().repeat(n))?;
        self.push(v, Op::Repeat(a.id))
    }

    /// Sum of all elements, shape `[]`.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let v = Tensor::scalar(self.node(a)?.value.sum());
        self.push(v, Op::Sum(a.id))
    }

    /// Mean of all elements, shape `[]`.
    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let av = &self.node(a)?.value;
        if av.is_empty() {
            return Err(TensorError::InvalidShape {
                op: "mean",
                shape: av.shape().to_vec(),
                reason: "empty tensor".into(),
            });
        }
        let v = Tensor::scalar(av.sum() / av.len() as f64);
        self.push(v, Op::Mean(a.id))
    }

    /// Fail with a labelled error if `v` holds a non-finite value.
    pub fn ensure_finite(&self, v: Var, layer: &str) -> Result<()> {
        if self.node(v)?.value.all_finite() {
            Ok(())
        } else {
            Err(TensorError::NonFinite {
                op: layer.to_string(),
            })
        }
    }

    /// Reverse sweep from a scalar output.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        let out = self.node(output)?;
        if !out.value.is_scalar() {
            return Err(TensorError::NotScalar(out.value.shape().to_vec()));
        }
        let n = output.id + 1;
        let mut grads: Vec<Option<Tensor>> = vec![None; n];
        grads[output.id] = Some(Tensor::full(out.value.shape(), 1.0));
        let mut leaves: Vec<Option<Tensor>> = vec![None; self.nodes.len()];

        for i in (0..n).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            self.propagate(node, &g, &mut grads);
            if matches!(node.op, Op::Param) {
                leaves[i] = Some(g);
            }
        }
        Ok(Gradients {
            tape: self.id,
            grads: leaves,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let nodes = &self.nodes;
        let wants = |i: usize| nodes[i].needs_grad;
        let mut acc = |i: usize, t: Tensor| match &mut grads[i] {
            Some(existing) => existing.add_assign(&t),
            slot @ None => *slot = Some(t),
        };
        match &node.op {
            Op::Param | Op::Constant => {}
            Op::Add(a, b) => {
                if wants(*a) {
                    acc(*a, g.clone());
                }
                if wants(*b) {
                    acc(*b, g.clone());
                }
            }
            Op::Sub(a, b) => {
                if wants(*a) {
                    acc(*a, g.clone());
                }
                if wants(*b) {
                    acc(*b, g.map(|x| -x));
                }
            }
            Op::Mul(a, b) => {
                if wants(*a) {
                    acc(*a, g.zip_map(&nodes[*b].value, |x, y| x * y));
                }
                if wants(*b) {
                    acc(*b, g.zip_map(&nodes[*a].value, |x, y| x * y));
                }
            }
            Op::MulScalar(t, s) => {
                let sv = &nodes[*s].value;
                if wants(*t) {
                    let k = sv.data()[0];
                    acc(*t, g.map(|x| x * k));
                }
                if wants(*s) {
                    let dot: f64 = g
                        .data()
                        .iter()
                        .zip(nodes[*t].value.data())
                        .map(|(x, y)| x * y)
                        .sum();
                    acc(*s, Tensor::new(sv.shape().to_vec(), vec![dot]).unwrap());
                }
            }
            Op::Scale(a, c) => {
                if wants(*a) {
                    acc(*a, g.map(|x| x * c));
                }
            }
            Op::MatMul(a, b) => {
                let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
                let dims = matmul_dims(av.shape(), bv.shape()).expect("validated in forward");
                if wants(*a) {
                    let mut da = vec![0.0; av.len()];
                    for bi in 0..dims.batch {
                        let a_off = bi * dims.m * dims.k;
                        let b_off = if dims.shared_rhs { 0 } else { bi * dims.k * dims.n };
                        let g_off = bi * dims.m * dims.n;
                        gemm_nt(
                            &g.data()[g_off..g_off + dims.m * dims.n],
                            &bv.data()[b_off..b_off + dims.k * dims.n],
                            &mut da[a_off..a_off + dims.m * dims.k],
                            dims.m,
                            dims.n,
                            dims.k,
                        );
                    }
                    acc(*a, Tensor::new(av.shape().to_vec(), da).unwrap());
                }
                if wants(*b) {
                    let mut db = vec![0.0; bv.len()];
                    for bi in 0..dims.batch {
                        let a_off = bi * dims.m * dims.k;
                        let b_off = if dims.shared_rhs { 0 } else { bi * dims.k * dims.n };
                        let g_off = bi * dims.m * dims.n;
                        gemm_tn(
                            &av.data()[a_off..a_off + dims.m * dims.k],
                            &g.data()[g_off..g_off + dims.m * dims.n],
                            &mut db[b_off..b_off + dims.k * dims.n],
                            dims.m,
                            dims.k,
                            dims.n,
                        );
                    }
                    acc(*b, Tensor::new(bv.shape().to_vec(), db).unwrap());
                }
            }
            Op::Transpose(a) => {
                if wants(*a) {
                    acc(*a, transpose_last2(g, "transpose").unwrap());
                }
            }
            Op::Reshape(a) => {
                if wants(*a) {
                    acc(*a, g.reshape(nodes[*a].value.shape()).unwrap());
                }
            }
            Op::Relu(a) => {
                if wants(*a) {
                    acc(*a, g.zip_map(&nodes[*a].value, |x, y| if y > 0.0 { x } else { 0.0 }));
                }
            }
            Op::Tanh(a) => {
                if wants(*a) {
                    acc(*a, g.zip_map(&node.value, |x, y| x * (1.0 - y * y)));
                }
            }
            Op::Sigmoid(a) => {
                if wants(*a) {
                    acc(*a, g.zip_map(&node.value, |x, y| x * y * (1.0 - y)));
                }
            }
            Op::Exp(a) => {
                if wants(*a) {
                    acc(*a, g.zip_map(&node.value, |x, y| x * y));
                }
            }
            Op::Log(a) => {
                if wants(*a) {
                    acc(*a, g.zip_map(&nodes[*a].value, |x, y| x / y));
                }
            }
            Op::ClampMin(a, floor) => {
                if wants(*a) {
                    let f = *floor;
                    acc(*a, g.zip_map(&nodes[*a].value, |x, y| if y > f { x } else { 0.0 }));
                }
            }
            Op::Softmax(a) => {
                if wants(*a) {
                    let y = &node.value;
                    let n = y.last_dim();
                    let mut out = vec![0.0; y.len()];
                    for ((o, gy), yy) in out
                        .chunks_mut(n)
                        .zip(g.data().chunks(n))
                        .zip(y.data().chunks(n))
                    {
                        let dot: f64 = gy.iter().zip(yy).map(|(p, q)| p * q).sum();
                        for j in 0..n {
                            o[j] = yy[j] * (gy[j] - dot);
                        }
                    }
                    acc(*a, Tensor::new(y.shape().to_vec(), out).unwrap());
                }
            }
            Op::Concat(ins) => {
                let total = node.value.last_dim();
                let rows = node.value.len() / total.max(1);
                let mut offset = 0;
                for &i in ins {
                    let w = nodes[i].value.last_dim();
                    if wants(i) {
                        let mut part = Vec::with_capacity(rows * w);
                        for r in 0..rows {
                            part.extend_from_slice(&g.data()[r * total + offset..r * total + offset + w]);
                        }
                        acc(i, Tensor::new(nodes[i].value.shape().to_vec(), part).unwrap());
                    }
                    offset += w;
                }
            }
            Op::Slice { input, start } => {
                if wants(*input) {
                    let src = &nodes[*input].value;
                    let w = src.last_dim();
                    let len = node.value.last_dim();
                    let mut full = vec![0.0; src.len()];
                    for (r, gr) in g.data().chunks(len.max(1)).enumerate() {
                        full[r * w + start..r * w + start + len].copy_from_slice(gr);
                    }
                    acc(*input, Tensor::new(src.shape().to_vec(), full).unwrap());
                }
            }
            Op::Repeat(a) => {
                if wants(*a) {
                    let src = &nodes[*a].value;
                    let mut out = vec![0.0; src.len()];
                    for chunk in g.data().chunks(src.len().max(1)) {
                        for (o, c) in out.iter_mut().zip(chunk) {
                            *o += c;
                        }
                    }
                    acc(*a, Tensor::new(src.shape().to_vec(), out).unwrap());
                }
            }
            Op::Sum(a) => {
                if wants(*a) {
                    acc(*a, Tensor::full(nodes[*a].value.shape(), g.data()[0]));
                }
            }
            Op::Mean(a) => {
                if wants(*a) {
                    let src = &nodes[*a].value;
                    acc(*a, Tensor::full(src.shape(), g.data()[0] / src.len() as f64));
                }
            }
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

struct MatmulDims {
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    shared_rhs: bool,
}

fn matmul_dims(a: &[usize], b: &[usize]) -> Result<MatmulDims> {
    let mismatch = || TensorError::ShapeMismatch {
        op: "matmul",
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    };
    match (a, b) {
        (&[m, k], &[k2, n]) if k == k2 => Ok(MatmulDims {
            batch: 1,
            m,
            k,
            n,
            shared_rhs: true,
        }),
        (&[bs, m, k], &[bs2, k2, n]) if bs == bs2 && k == k2 => Ok(MatmulDims {
            batch: bs,
            m,
            k,
            n,
            shared_rhs: false,
        }),
        (&[bs, m, k], &[k2, n]) if k == k2 => Ok(MatmulDims {
            batch: bs,
            m,
            k,
            n,
            shared_rhs: true,
        }),
        _ => Err(mismatch()),
    }
}

/// out[m,n] += a[m,k] · b[k,n]
fn gemm(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
}

/// out[m,k] += g[m,n] · b[k,n]ᵀ
fn gemm_nt(g: &[f64], b: &[f64], out: &mut [f64], m: usize, n: usize, k: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            out[i * k + p] += grow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
        }
    }
}

/// out[k,n] += a[m,k]ᵀ · g[m,n]
fn gemm_tn(a: &[f64], g: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, gv) in orow.iter_mut().zip(grow) {
                *o += aip * gv;
            }
        }
    }
}

fn transpose_last2(t: &Tensor, op: &'static str) -> Result<Tensor> {
    let (batch, r, c) = match t.shape() {
        &[r, c] => (1, r, c),
        &[b, r, c] => (b, r, c),
        s => {
            return Err(TensorError::InvalidShape {
                op,
                shape: s.to_vec(),
                reason: "expected rank 2 or 3".into(),
            })
        }
    };
    let mut out = vec![0.0; t.len()];
    for bi in 0..batch {
        let off = bi * r * c;
        for i in 0..r {
            for j in 0..c {
                out[off + j * r + i] = t.data()[off + i * c + j];
            }
        }
    }
    let mut shape = t.shape().to_vec();
    let n = shape.len();
    shape.swap(n - 2, n - 1);
    Tensor::new(shape, out)
}
