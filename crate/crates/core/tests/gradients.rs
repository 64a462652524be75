mod common;

use common::{model_gradient_error, numeric_gradient, relative_error, tiny_batch};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tandem::model::{ForwardOptions, Mode, Noise, TandemConfig, TandemModel, Variant};
use tandem::nde::Backbone;
use tandem::tape::{Tape, Var};
use tandem::tensor::{Result, Tensor};

type Build = fn(&mut Tape, Var) -> Result<Var>;

struct Case {
    name: &'static str,
    shape: &'static [usize],
    /// Sample inputs away from kinks/poles.
    sample: fn(&mut ChaCha8Rng) -> f64,
    build: Build,
}

fn normal_ish(rng: &mut ChaCha8Rng) -> f64 {
    rng.random_range(-2.0..2.0)
}

fn away_from_zero(rng: &mut ChaCha8Rng) -> f64 {
    let m: f64 = rng.random_range(0.05..2.0);
    if rng.random::<bool>() {
        m
    } else {
        -m
    }
}

fn positive(rng: &mut ChaCha8Rng) -> f64 {
    rng.random_range(0.2..3.0)
}

fn constant_like(tape: &mut Tape, shape: &[usize], seed: u64) -> Var {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    tape.constant(Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap())
}

fn cases() -> Vec<Case> {
    vec![
        Case { name: "add", shape: &[2, 3], sample: normal_ish, build: |t, x| { let c = constant_like(t, &[2, 3], 1); t.add(x, c) } },
        Case { name: "add_self", shape: &[2, 3], sample: normal_ish, build: |t, x| t.add(x, x) },
        Case { name: "sub", shape: &[2, 3], sample: normal_ish, build: |t, x| { let c = constant_like(t, &[2, 3], 2); t.sub(c, x) } },
        Case { name: "mul", shape: &[2, 3], sample: normal_ish, build: |t, x| t.mul(x, x) },
        Case { name: "mul_scalar", shape: &[4], sample: normal_ish, build: |t, x| { let s = t.slice_last_dim(x, 0, 1)?; t.mul_scalar(x, s) } },
        Case { name: "scale", shape: &[3], sample: normal_ish, build: |t, x| t.scale(x, -1.7) },
        Case { name: "matmul", shape: &[2, 3], sample: normal_ish, build: |t, x| { let c = constant_like(t, &[3, 4], 3); let y = t.matmul(x, c)?; let xt = t.transpose(x)?; let z = t.matmul(xt, y)?; Ok(z) } },
        Case { name: "matmul_batched", shape: &[2, 2, 3], sample: normal_ish, build: |t, x| { let xt = t.transpose(x)?; t.matmul(x, xt) } },
        Case { name: "matmul_shared_rhs", shape: &[2, 2, 3], sample: normal_ish, build: |t, x| { let c = constant_like(t, &[3, 2], 4); t.matmul(x, c) } },
        Case { name: "transpose", shape: &[2, 3], sample: normal_ish, build: |t, x| t.transpose(x) },
        Case { name: "reshape", shape: &[2, 3], sample: normal_ish, build: |t, x| t.reshape(x, &[3, 2]) },
        Case { name: "relu", shape: &[6], sample: away_from_zero, build: |t, x| t.relu(x) },
        Case { name: "tanh", shape: &[6], sample: normal_ish, build: |t, x| t.tanh(x) },
        Case { name: "sigmoid", shape: &[6], sample: normal_ish, build: |t, x| t.sigmoid(x) },
        Case { name: "exp", shape: &[6], sample: normal_ish, build: |t, x| t.exp(x) },
        Case { name: "log", shape: &[6], sample: positive, build: |t, x| t.log(x) },
        Case { name: "clamp_min", shape: &[6], sample: away_from_zero, build: |t, x| t.clamp_min(x, 0.0) },
        Case { name: "softmax", shape: &[2, 4], sample: normal_ish, build: |t, x| t.softmax_last_dim(x) },
        Case { name: "concat", shape: &[2, 3], sample: normal_ish, build: |t, x| { let y = t.tanh(x)?; t.concat_last_dim(&[x, y, x]) } },
        Case { name: "slice", shape: &[2, 5], sample: normal_ish, build: |t, x| t.slice_last_dim(x, 1, 3) },
        Case { name: "repeat", shape: &[3], sample: normal_ish, build: |t, x| t.repeat(x, 4) },
        Case { name: "sum", shape: &[2, 3], sample: normal_ish, build: |t, x| t.sum(x) },
        Case { name: "mean", shape: &[2, 3], sample: normal_ish, build: |t, x| t.mean(x) },
    ]
}

/// `sum(op(x) ⊙ W)` for a fixed random `W`, making every output entry matter.
fn weighted(tape: &mut Tape, x: Var, build: Build) -> Var {
    let y = build(tape, x).unwrap();
    let shape = tape.shape(y).to_vec();
    let w = constant_like(tape, &shape, 99);
    let yw = tape.mul(y, w).unwrap();
    tape.sum(yw).unwrap()
}

fn eval(case: &Case, x: &[f64]) -> f64 {
    let mut tape = Tape::new();
    let v = tape.param(Tensor::new(case.shape.to_vec(), x.to_vec()).unwrap());
    let out = weighted(&mut tape, v, case.build);
    tape.value(out).data()[0]
}

#[test]
fn every_primitive_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for case in cases() {
        let n: usize = case.shape.iter().product();
        for point in 0..100 {
            let x: Vec<f64> = (0..n).map(|_| (case.sample)(&mut rng)).collect();
            let mut tape = Tape::new();
            let v = tape.param(Tensor::new(case.shape.to_vec(), x.clone()).unwrap());
            let out = weighted(&mut tape, v, case.build);
            let analytic = tape.backward(out).unwrap().get(v).unwrap();
            assert_eq!(analytic.shape(), case.shape);
            let numeric = numeric_gradient(&x, 1e-5, |p| eval(&case, p));
            let err = relative_error(analytic.data(), &numeric);
            assert!(err < 1e-4, "{} at point {point}: relative error {err}", case.name);
        }
    }
}

#[test]
fn composite_graph_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..20 {
        let x: Vec<f64> = (0..6).map(|_| normal_ish(&mut rng)).collect();
        let f = |tape: &mut Tape, v: Var| {
            let a = tape.tanh(v).unwrap();
            let m = tape.reshape(a, &[2, 3]).unwrap();
            let mt = tape.transpose(m).unwrap();
            let p = tape.matmul(m, mt).unwrap();
            let s = tape.softmax_last_dim(p).unwrap();
            let l = tape.log(s).unwrap();
            tape.mean(l).unwrap()
        };
        let mut tape = Tape::new();
        let v = tape.param(Tensor::vector(x.clone()));
        let out = f(&mut tape, v);
        let analytic = tape.backward(out).unwrap().get(v).unwrap();
        let numeric = numeric_gradient(&x, 1e-5, |p| {
            let mut t = Tape::new();
            let v = t.param(Tensor::vector(p.to_vec()));
            let o = f(&mut t, v);
            t.value(o).data()[0]
        });
        assert!(relative_error(analytic.data(), &numeric) < 1e-4);
    }
}

#[test]
fn backward_is_linear() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..20 {
        let x: Vec<f64> = (0..4).map(|_| normal_ish(&mut rng)).collect();
        let (a, b) = (rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0));
        let mut tape = Tape::new();
        let v = tape.param(Tensor::vector(x));
        let t = tape.tanh(v).unwrap();
        let f = tape.sum(t).unwrap();
        let e = tape.exp(v).unwrap();
        let g = tape.mean(e).unwrap();
        let af = tape.scale(f, a).unwrap();
        let bg = tape.scale(g, b).unwrap();
        let h = tape.add(af, bg).unwrap();
        let gf = tape.backward(f).unwrap().get(v).unwrap();
        let gg = tape.backward(g).unwrap().get(v).unwrap();
        let gh = tape.backward(h).unwrap().get(v).unwrap();
        for i in 0..4 {
            let want = a * gf.data()[i] + b * gg.data()[i];
            assert!((gh.data()[i] - want).abs() <= 1e-12 * (1.0 + want.abs()));
        }
    }
}

#[test]
fn replayed_backward_is_bitwise_identical() {
    let mut tape = Tape::new();
    let v = tape.param(Tensor::matrix(2, 2, vec![0.3, -1.2, 2.0, 0.7]).unwrap());
    let m = tape.matmul(v, v).unwrap();
    let s = tape.softmax_last_dim(m).unwrap();
    let l = tape.log(s).unwrap();
    let out = tape.sum(l).unwrap();
    let first = tape.backward(out).unwrap().get(v).unwrap();
    let second = tape.backward(out).unwrap().get(v).unwrap();
    assert_eq!(first.data(), second.data());
}

fn tiny(backbone: Backbone, variant: Variant) -> TandemConfig {
    TandemConfig {
        d_z: 3,
        d_h: 4,
        heads: 2,
        n_l: 1,
        n_h: 6,
        seed: 5,
        ..TandemConfig::new(backbone, variant, 2, 2)
    }
}

#[test]
fn full_model_gradients_for_every_backbone_and_variant() {
    let batch = tiny_batch();
    let noise = Noise::seeded(17, [1, 2]);
    for backbone in Backbone::ALL {
        for variant in Variant::ALL {
            let model = TandemModel::new(tiny(backbone, variant)).unwrap();
            let opts = ForwardOptions {
                mode: Mode::Train,
                gate_override: None,
                harden: false,
            };
            let err = model_gradient_error(&model, &batch, opts, &noise);
            assert!(err < 1e-3, "{backbone}/{variant}: relative error {err}");
        }
    }
}
