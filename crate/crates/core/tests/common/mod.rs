//! Oracles shared by the integration tests.
#![allow(dead_code)]

use tandem::data::TimeSeriesSample;
use tandem::interp::PathOptions;
use tandem::model::{batch_loss, ForwardOptions, Noise, PreparedSample, TandemModel};
use tandem::nn::ParamStore;
use tandem::tape::Tape;
use tandem::tensor::Tensor;

/// `‖a − n‖ / max(‖a‖, ‖n‖, 1e-8)` over all entries.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = analytic.iter().zip(numeric).map(|(a, n)| a - n).collect();
    norm(&diff) / norm(analytic).max(norm(numeric)).max(1e-8)
}

/// Central differences of `f` at `x` with step `h`.
pub fn numeric_gradient(x: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + h;
            let up = f(&probe);
            probe[i] = orig - h;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Tiny two-sample batch: T=4, d=2, three classes, one masked entry pattern.
pub fn tiny_batch() -> Vec<PreparedSample> {
    let times = vec![0.0, 0.3, 0.6, 1.0];
    let a = TimeSeriesSample::new(
        times.clone(),
        vec![0.5, -1.0, 0.3, 0.0, -0.2, 1.5, 1.0, 0.4],
        vec![true, true, true, false, false, true, true, true],
        2,
        1,
    )
    .unwrap();
    let b = TimeSeriesSample::fully_observed(times, vec![1.0, 0.1, 0.2, -0.3, 0.9, 0.0, -0.5, 0.6], 2, 2).unwrap();
    [a, b]
        .iter()
        .map(|s| PreparedSample::new(s, PathOptions::default()).unwrap())
        .collect()
}

/// Loss of `model` with parameters from `store`, fixed noise and options.
pub fn model_loss(model: &TandemModel, store: &ParamStore, batch: &[PreparedSample], opts: ForwardOptions, noise: &Noise) -> f64 {
    let mut tape = Tape::with_checks(false);
    let p = store.bind(&mut tape);
    let refs: Vec<&PreparedSample> = batch.iter().collect();
    let mut noise = noise.clone();
    let (loss, _) = batch_loss(model, &mut tape, &p, &refs, opts, &mut noise).unwrap();
    tape.value(loss).data()[0]
}

/// Worst per-parameter relative error of backprop against central
/// differences (h = 1e-5), over parameters that receive a nonzero gradient.
pub fn model_gradient_error(model: &TandemModel, batch: &[PreparedSample], opts: ForwardOptions, noise: &Noise) -> f64 {
    let mut tape = Tape::with_checks(false);
    let p = model.params.bind(&mut tape);
    let refs: Vec<&PreparedSample> = batch.iter().collect();
    let mut n = noise.clone();
    let (loss, _) = batch_loss(model, &mut tape, &p, &refs, opts, &mut n).unwrap();
    let grads = tape.backward(loss).unwrap();

    let mut worst = 0.0f64;
    for id in model.params.ids() {
        let analytic = grads.get(p.var(id)).unwrap();
        let base = model.params.get(id).clone();
        let numeric = numeric_gradient(base.data(), 1e-5, |x| {
            let mut store = model.params.clone();
            *store.get_mut(id) = Tensor::new(base.shape().to_vec(), x.to_vec()).unwrap();
            model_loss(model, &store, batch, opts, noise)
        });
        worst = worst.max(relative_error(analytic.data(), &numeric));
    }
    worst
}
