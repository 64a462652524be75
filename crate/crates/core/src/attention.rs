//! Per-stream multi-head self-attention with a sigmoid on the output.
//!
//! Along [`AttentionAxis::Temporal`] the tokens are time steps. Along
//! [`AttentionAxis::Feature`] the tokens are the channels of the final time
//! step, each a scalar. No positional encoding is used.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::nn::{uniform_init, Bound, ParamId, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::{Result, Tensor, TensorError};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttentionAxis {
    #[default]
    Temporal,
    Feature,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StreamAttention {
    /// `[token_dim, H * d_key]`, heads side by side.
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    /// `[H * d_key, d_h]` (temporal) or `[d_in * H * d_key, d_h]` (feature).
    pub wo: ParamId,
    pub heads: usize,
    pub d_key: usize,
    pub d_in: usize,
    pub d_h: usize,
    pub axis: AttentionAxis,
}

/// Attended outputs and per-head weights `[B, queries, tokens]`.
pub struct Attended {
    pub output: Var,
    pub weights: Vec<Var>,
}

impl StreamAttention {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        d_in: usize,
        d_h: usize,
        heads: usize,
        axis: AttentionAxis,
        rng: &mut ChaCha8Rng,
    ) -> std::result::Result<Self, String> {
        if heads == 0 || d_h % heads != 0 {
            return Err(format!("d_h = {d_h} is not a positive multiple of H = {heads}"));
        }
        let d_key = d_h / heads;
        let token = match axis {
            AttentionAxis::Temporal => d_in,
            AttentionAxis::Feature => 1,
        };
        let hk = heads * d_key;
        let mut proj = |suffix: &str, rows: usize, cols: usize, store: &mut ParamStore| {
            store.add(format!("{name}.{suffix}"), uniform_init(&[rows, cols], rows, rng), false)
        };
        let wq = proj("wq", token, hk, store);
        let wk = proj("wk", token, hk, store);
        let wv = proj("wv", token, hk, store);
        let wo_rows = match axis {
            AttentionAxis::Temporal => hk,
            AttentionAxis::Feature => d_in * hk,
        };
        let wo = proj("wo", wo_rows, d_h, store);
        Ok(Self {
            wq,
            wk,
            wv,
            wo,
            heads,
            d_key,
            d_in,
            d_h,
            axis,
        })
    }

    fn check_input(&self, tape: &Tape, seq: Var) -> Result<(usize, usize)> {
        match *tape.shape(seq) {
            [b, t, d] if d == self.d_in && t >= 1 => Ok((b, t)),
            _ => Err(TensorError::ShapeMismatch {
                op: "attend_stream",
                lhs: tape.shape(seq).to_vec(),
                rhs: vec![0, 0, self.d_in],
            }),
        }
    }

    /// Scaled dot-product attention of `queries` over `tokens`, both
    /// `[B, n, token_dim]`; returns pre-projection `[B, n_q, H*d_key]`.
    fn mix(&self, tape: &mut Tape, p: &Bound, queries: Var, tokens: Var) -> Result<(Var, Vec<Var>)> {
        let q = tape.matmul(queries, p.var(self.wq))?;
        let k = tape.matmul(tokens, p.var(self.wk))?;
        let v = tape.matmul(tokens, p.var(self.wv))?;
        let scale = 1.0 / (self.d_key as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        let mut weights = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (qh, kh, vh) = if self.heads == 1 {
                (q, k, v)
            } else {
                let off = h * self.d_key;
                (
                    tape.slice_last_dim(q, off, self.d_key)?,
                    tape.slice_last_dim(k, off, self.d_key)?,
                    tape.slice_last_dim(v, off, self.d_key)?,
                )
            };
            let kt = tape.transpose(kh)?;
            let s = tape.matmul(qh, kt)?;
            let s = tape.scale(s, scale)?;
            let w = tape.softmax_last_dim(s)?;
            outs.push(tape.matmul(w, vh)?);
            weights.push(w);
        }
        let cat = if outs.len() == 1 { outs[0] } else { tape.concat_last_dim(&outs)? };
        Ok((cat, weights))
    }

    /// Last token of `[B, T, d]` as `[B, 1, d]`.
    fn last_token(tape: &mut Tape, seq: Var, b: usize, t: usize, d: usize) -> Result<Var> {
        if t == 1 {
            return Ok(seq);
        }
        let flat = tape.reshape(seq, &[b, t * d])?;
        let last = tape.slice_last_dim(flat, (t - 1) * d, d)?;
        tape.reshape(last, &[b, 1, d])
    }

    /// Final-time attended vector `Φ(T)`, shape `[B, d_h]`.
    pub fn attend_last(&self, tape: &mut Tape, p: &Bound, seq: Var) -> Result<Attended> {
        let (b, t) = self.check_input(tape, seq)?;
        match self.axis {
            AttentionAxis::Temporal => {
                let query = Self::last_token(tape, seq, b, t, self.d_in)?;
                let (cat, weights) = self.mix(tape, p, query, seq)?;
                let y = tape.matmul(cat, p.var(self.wo))?;
                let y = tape.sigmoid(y)?;
                let output = tape.reshape(y, &[b, self.d_h])?;
                Ok(Attended { output, weights })
            }
            AttentionAxis::Feature => {
                let last = Self::last_token(tape, seq, b, t, self.d_in)?;
                let tokens = tape.reshape(last, &[b, self.d_in, 1])?;
                let (cat, weights) = self.mix(tape, p, tokens, tokens)?;
                let flat = tape.reshape(cat, &[b, self.d_in * self.heads * self.d_key])?;
                let y = tape.matmul(flat, p.var(self.wo))?;
                let output = tape.sigmoid(y)?;
                Ok(Attended { output, weights })
            }
        }
    }

    /// Attended sequence `[B, T, d_h]` with every time step as a query.
    /// Temporal axis only.
    pub fn attend_all(&self, tape: &mut Tape, p: &Bound, seq: Var) -> Result<Attended> {
        self.check_input(tape, seq)?;
        if self.axis != AttentionAxis::Temporal {
            return Err(TensorError::InvalidShape {
                op: "attend_all",
                shape: tape.shape(seq).to_vec(),
                reason: "full-sequence attention is defined for the temporal axis only".into(),
            });
        }
        let (cat, weights) = self.mix(tape, p, seq, seq)?;
        let y = tape.matmul(cat, p.var(self.wo))?;
        let output = tape.sigmoid(y)?;
        Ok(Attended { output, weights })
    }

    /// Softmaxed per-head weight matrices, each `[B, T, T]` (temporal) or
    /// `[B, d_in, d_in]` (feature).
    pub fn scores(&self, tape: &mut Tape, p: &Bound, seq: Var) -> Result<Vec<Tensor>> {
        let att = match self.axis {
            AttentionAxis::Temporal => self.attend_all(tape, p, seq)?,
            AttentionAxis::Feature => self.attend_last(tape, p, seq)?,
        };
        Ok(att.weights.iter().map(|&w| tape.value(w).clone()).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;

    fn block(d_in: usize, d_h: usize, heads: usize, seed: u64) -> (ParamStore, StreamAttention) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = StreamAttention::new(&mut store, "a", d_in, d_h, heads, AttentionAxis::Temporal, &mut rng).unwrap();
        (store, a)
    }

    fn seq(tape: &mut Tape, b: usize, t: usize, d: usize, data: Vec<f64>) -> Var {
        tape.constant(Tensor::new(vec![b, t, d], data).unwrap())
    }

    #[test]
    fn hand_computed_two_tokens() {
        let (mut store, a) = block(1, 1, 1, 0);
        for id in [a.wq, a.wk, a.wv, a.wo] {
            *store.get_mut(id) = Tensor::matrix(1, 1, vec![1.0]).unwrap();
        }
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let x = seq(&mut tape, 1, 2, 1, vec![1.0, 2.0]);
        let all = a.attend_all(&mut tape, &p, x).unwrap();
        let w = tape.value(all.weights[0]).data().to_vec();
        assert!((w[0] - 0.2689414213699951).abs() < 1e-12 && (w[1] - 0.7310585786300049).abs() < 1e-12);
        let attended: f64 = w[0] * 1.0 + w[1] * 2.0;
        assert!((attended - 1.7310585786300049).abs() < 1e-12);
        let y = tape.value(all.output).data()[0];
        assert!((y - 0.8495).abs() < 5e-5);
        assert!((y - crate::tape::sigmoid(attended)).abs() < 1e-15);
    }

    #[test]
    fn single_token_weight_is_one() {
        let (store, a) = block(3, 4, 2, 1);
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let x = seq(&mut tape, 1, 1, 3, vec![0.5, -1.0, 2.0]);
        let out = a.attend_last(&mut tape, &p, x).unwrap();
        for w in &out.weights {
            assert_eq!(tape.value(*w).data(), &[1.0]);
        }
        // sigmoid(W_O · concat_h(W_V^h x))
        let v: Vec<f64> = (0..4)
            .map(|j| (0..3).map(|i| [0.5, -1.0, 2.0][i] * store.get(a.wv).at2(i, j)).sum())
            .collect();
        for o in 0..4 {
            let pre: f64 = (0..4).map(|j| v[j] * store.get(a.wo).at2(j, o)).sum();
            assert!((tape.value(out.output).data()[o] - crate::tape::sigmoid(pre)).abs() < 1e-14);
        }
    }

    #[test]
    fn identical_tokens_give_uniform_rows() {
        let (store, a) = block(2, 4, 2, 2);
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let x = seq(&mut tape, 1, 5, 2, [0.3, -0.7].repeat(5));
        for w in a.scores(&mut tape, &p, x).unwrap() {
            assert!(w.data().iter().all(|&v| (v - 0.2).abs() < 1e-15));
        }
        let out = a.attend_all(&mut tape, &p, x).unwrap();
        let o = tape.value(out.output);
        for r in 1..5 {
            assert_eq!(&o.data()[r * 4..(r + 1) * 4], &o.data()[..4]);
        }
    }

    #[test]
    fn last_query_matches_full_attention_row() {
        let (store, a) = block(3, 6, 3, 3);
        let data: Vec<f64> = (0..2 * 7 * 3).map(|i| ((i * 37 % 11) as f64 - 5.0) / 3.0).collect();
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let x = seq(&mut tape, 2, 7, 3, data);
        let last = a.attend_last(&mut tape, &p, x).unwrap();
        let all = a.attend_all(&mut tape, &p, x).unwrap();
        let (lo, ao) = (tape.value(last.output), tape.value(all.output));
        for b in 0..2 {
            assert_eq!(lo.row(b), &ao.data()[(b * 7 + 6) * 6..(b * 7 + 7) * 6]);
        }
    }

    #[test]
    fn wrong_input_width_is_an_error() {
        let (store, a) = block(3, 4, 2, 4);
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let x = seq(&mut tape, 1, 2, 2, vec![0.0; 4]);
        assert!(a.attend_last(&mut tape, &p, x).is_err());
    }

    #[test]
    fn feature_axis_shapes() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a = StreamAttention::new(&mut store, "f", 3, 4, 2, AttentionAxis::Feature, &mut rng).unwrap();
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let x = seq(&mut tape, 2, 4, 3, (0..24).map(|i| i as f64 / 10.0).collect());
        let out = a.attend_last(&mut tape, &p, x).unwrap();
        assert_eq!(tape.shape(out.output), &[2, 4]);
        assert_eq!(tape.shape(out.weights[0]), &[2, 3, 3]);
    }

    proptest! {
        #[test]
        fn rows_stochastic_outputs_bounded(data in prop::collection::vec(-3.0f64..3.0, 2 * 6 * 3), seed in 0u64..50) {
            let (store, a) = block(3, 4, 2, seed);
            let mut tape = Tape::new();
            let p = store.bind(&mut tape);
            let x = seq(&mut tape, 2, 6, 3, data);
            let all = a.attend_all(&mut tape, &p, x).unwrap();
            for w in &all.weights {
                for row in tape.value(*w).data().chunks(6) {
                    prop_assert!(row.iter().all(|&v| v >= 0.0));
                    prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
                }
            }
            prop_assert!(tape.value(all.output).data().iter().all(|&v| v > 0.0 && v < 1.0));
        }

        #[test]
        fn permutation_equivariant(data in prop::collection::vec(-2.0f64..2.0, 5 * 2), shift in 1usize..5) {
            let (store, a) = block(2, 4, 2, 7);
            let perm: Vec<usize> = (0..5).map(|i| (i + shift) % 5).collect();
            let permuted: Vec<f64> = perm.iter().flat_map(|&i| data[i * 2..i * 2 + 2].to_vec()).collect();
            let mut tape = Tape::new();
            let p = store.bind(&mut tape);
            let x = seq(&mut tape, 1, 5, 2, data.clone());
            let xp = seq(&mut tape, 1, 5, 2, permuted);
            let o = a.attend_all(&mut tape, &p, x).unwrap().output;
            let op = a.attend_all(&mut tape, &p, xp).unwrap().output;
            let (o, op) = (tape.value(o).clone(), tape.value(op).clone());
            for (r, &src) in perm.iter().enumerate() {
                for j in 0..4 {
                    prop_assert!((op.data()[r * 4 + j] - o.data()[src * 4 + j]).abs() < 1e-12);
                }
            }
        }
    }
}
