//! Exact-count missingness injection.

use rand::seq::index;
use serde::{Deserialize, Serialize};

use super::{DataError, Dataset, Result};
use crate::rng;

const STREAM_TAG: u64 = 0x4D41_534B; // "MASK"

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskMode {
    /// Each channel loses its own `round(rate * T)` time indices.
    #[default]
    PerChannel,
    /// All channels lose the same time indices.
    PerTimestep,
}

/// Number of masked time indices for a series of length `len`.
pub fn masked_count(rate: f64, len: usize) -> usize {
    (rate * len as f64).round() as usize
}

/// Mask `round(rate * T)` uniformly chosen time indices per sample and
/// channel. The draw for (sample `i`, channel `c`) depends only on
/// `(seed, i, c)`, so subsets and reorderings of other samples do not
/// affect it.
pub fn inject_missingness(dataset: &Dataset, rate: f64, seed: u64, mode: MaskMode) -> Result<Dataset> {
    if !(0.0..1.0).contains(&rate) {
        return Err(DataError::InvalidRate(rate));
    }
    if let Some(i) = dataset.samples.iter().position(|s| !s.is_fully_observed()) {
        return Err(DataError::MaskNotFull(i));
    }
    let mut samples = Vec::with_capacity(dataset.len());
    for (i, s) in dataset.samples.iter().enumerate() {
        let (len, d) = (s.len(), s.channels());
        let k = masked_count(rate, len);
        if k >= len {
            return Err(DataError::TooFewObservations { rate, len });
        }
        let mut mask = vec![true; len * d];
        match mode {
            MaskMode::PerChannel => {
                for c in 0..d {
                    let mut r = rng::stream(&[seed, STREAM_TAG, i as u64, c as u64]);
                    for t in index::sample(&mut r, len, k) {
                        mask[t * d + c] = false;
                    }
                }
            }
            MaskMode::PerTimestep => {
                let mut r = rng::stream(&[seed, STREAM_TAG, i as u64, u64::MAX]);
                for t in index::sample(&mut r, len, k) {
                    mask[t * d..(t + 1) * d].fill(false);
                }
            }
        }
        samples.push(s.with_mask(mask)?);
    }
    Ok(Dataset {
        samples,
        ..dataset.clone()
    })
}
