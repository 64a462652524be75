//! Length rescaling and per-channel normalization.

use serde::{Deserialize, Serialize};

use super::io::uniform_times;
use super::{DataError, Dataset, Result, TimeSeriesSample};

pub const SD_FLOOR: f64 = 1e-8;

/// Piecewise-linear interpolation through `(xs, ys)`, clamped outside.
/// Exact at every knot.
fn lerp_at(xs: &[f64], ys: &[f64], x: f64) -> f64 {
    let n = xs.len();
    if n == 0 {
        return 0.0;
    }
    if x <= xs[0] {
        return ys[0];
    }
    if x >= xs[n - 1] {
        return ys[n - 1];
    }
    let k = xs.partition_point(|&t| t <= x) - 1;
    let w = (x - xs[k]) / (xs[k + 1] - xs[k]);
    ys[k] + w * (ys[k + 1] - ys[k])
}

/// Resample onto `target` points evenly spaced in index space.
///
/// Position `j` maps to fractional source index `p = j (T-1) / (L-1)`.
/// Times are interpolated linearly in `p`, values per channel linearly in
/// time through that channel's observed points, and the mask is copied from
/// the nearest source index (ties to the lower index).
pub fn rescale_length(sample: &TimeSeriesSample, target: usize) -> Result<TimeSeriesSample> {
    if target < 2 {
        return Err(DataError::InvalidSample(format!("rescale target {target} < 2")));
    }
    let (len, d) = (sample.len(), sample.channels());
    let src_idx: Vec<f64> = (0..len).map(|i| i as f64).collect();
    let positions: Vec<f64> = if len == 1 {
        vec![0.0; target]
    } else {
        (0..target).map(|j| (j * (len - 1)) as f64 / (target - 1) as f64).collect()
    };
    let times = if len == 1 {
        uniform_times(target)
    } else {
        positions.iter().map(|&p| lerp_at(&src_idx, sample.times(), p)).collect()
    };

    let mut values = vec![0.0; target * d];
    let mut mask = vec![false; target * d];
    for c in 0..d {
        let (kx, ky): (Vec<f64>, Vec<f64>) = (0..len)
            .filter(|&t| sample.is_observed(t, c))
            .map(|t| (sample.times()[t], sample.value(t, c)))
            .unzip();
        for (j, &p) in positions.iter().enumerate() {
            let nearest = if p - p.floor() > 0.5 { p.ceil() } else { p.floor() } as usize;
            let src_time = if len == 1 { sample.times()[0] } else { times[j] };
            values[j * d + c] = lerp_at(&kx, &ky, src_time);
            mask[j * d + c] = sample.is_observed(nearest, c);
        }
    }
    TimeSeriesSample::new(times, values, mask, d, sample.label())
}

pub fn rescale_dataset(dataset: &Dataset, target: usize) -> Result<Dataset> {
    let samples = dataset
        .samples
        .iter()
        .map(|s| rescale_length(s, target))
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        samples,
        ..dataset.clone()
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub mean: f64,
    pub sd: f64,
}

/// Population mean and sd of observed entries, per channel. A channel with no
/// observations gets (0, 1).
pub fn channel_stats(train: &Dataset) -> Vec<ChannelStats> {
    (0..train.channels)
        .map(|c| {
            let vals: Vec<f64> = train
                .samples
                .iter()
                .flat_map(|s| (0..s.len()).filter(move |&t| s.is_observed(t, c)).map(move |t| s.value(t, c)))
                .collect();
            if vals.is_empty() {
                return ChannelStats { mean: 0.0, sd: 1.0 };
            }
            let n = vals.len() as f64;
            let mean = vals.iter().sum::<f64>() / n;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            ChannelStats {
                mean,
                sd: var.sqrt().max(SD_FLOOR),
            }
        })
        .collect()
}

pub fn apply_stats(dataset: &Dataset, stats: &[ChannelStats]) -> Dataset {
    dataset.map_samples(|s| {
        let d = s.channels();
        let values = s
            .values()
            .iter()
            .zip(s.mask())
            .enumerate()
            .map(|(k, (&v, &m))| {
                let st = stats[k % d];
                if m {
                    (v - st.mean) / st.sd
                } else {
                    v
                }
            })
            .collect();
        s.with_values(values)
    })
}

/// Z-score observed entries with statistics from the training split.
pub fn normalize(train: &Dataset, val: &Dataset, test: &Dataset) -> (Dataset, Dataset, Dataset, Vec<ChannelStats>) {
    let stats = channel_stats(train);
    (
        apply_stats(train, &stats),
        apply_stats(val, &stats),
        apply_stats(test, &stats),
        stats,
    )
}
