//! Linearly separable two-class toy data.

use rand::Rng;
use rand_distr::StandardNormal;

use super::io::uniform_times;
use super::{Dataset, Result, TimeSeriesSample};
use crate::rng;

/// Class 1 drifts up from +0.5, class 2 drifts down from -0.5, plus
/// Gaussian noise of sd `noise`. Labels alternate 1, 2, 1, ...
pub fn separable(n: usize, len: usize, channels: usize, noise: f64, seed: u64) -> Result<Dataset> {
    let times = uniform_times(len);
    let samples = (0..n)
        .map(|i| {
            let label = 1 + i % 2;
            let sign = if label == 1 { 1.0 } else { -1.0 };
            let mut r = rng::stream(&[seed, 0x5359_4E54, i as u64]);
            let values = (0..len * channels)
                .map(|k| {
                    let t = times[k / channels];
                    sign * (0.5 + t) + noise * r.sample::<f64, _>(StandardNormal)
                })
                .collect();
            TimeSeriesSample::fully_observed(times.clone(), values, channels, label)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut ds = Dataset::new("synthetic", samples, 2, format!("separable(n={n}, T={len}, d={channels}, seed={seed})"))?;
    ds.ids = (0..n).map(|i| format!("s{i}")).collect();
    Ok(ds)
}
