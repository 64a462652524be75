//! Time series samples, datasets and the preprocessing pipeline:
//! ingestion, missingness injection, stratified splits, length rescaling and
//! per-channel normalization.

mod io;
mod missing;
pub mod synthetic;
mod split;
mod transform;

use thiserror::Error;

use crate::interp::{check_increasing, InterpError};

pub use io::{load_dataset, read_manifest, read_mask_file, write_dataset, write_mask_file, Layout, Manifest};
pub use missing::{inject_missingness, masked_count, MaskMode};
pub use split::{split, Split, SplitSpec};
pub use transform::{apply_stats, channel_stats, normalize, rescale_dataset, rescale_length, ChannelStats};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("manifest error: {0}")]
    Manifest(String),
    #[error("csv error at row {row}: {message}")]
    Csv { row: usize, message: String },
    #[error("no samples")]
    NoSamples,
    #[error("sample {sample}: {message}")]
    Ragged { sample: String, message: String },
    #[error("row {row}: unknown label {label:?} (expected 1..={classes})")]
    UnknownLabel {
        row: usize,
        label: String,
        classes: usize,
    },
    #[error("row {row}, column {column}: cannot parse {value:?} as a number")]
    ParseFloat {
        row: usize,
        column: usize,
        value: String,
    },
    #[error("missing rate {0} outside [0, 1)")]
    InvalidRate(f64),
    #[error("missing rate {rate} leaves no observation in a series of length {len}")]
    TooFewObservations { rate: f64, len: usize },
    #[error("missingness injection needs fully observed input (sample {0} has masked entries)")]
    MaskNotFull(usize),
    #[error("split needs at least 10 samples, got {0}")]
    TooFewSamples(usize),
    #[error("class {class} has only {count} samples; stratified splitting needs at least 3")]
    ClassTooSmall { class: usize, count: usize },
    #[error("split fractions must be non-negative and sum to 1, got {0:?}")]
    BadFractions([f64; 3]),
    #[error("invalid sample: {0}")]
    InvalidSample(String),
    #[error(transparent)]
    Interp(#[from] InterpError),
}

pub type Result<T> = std::result::Result<T, DataError>;

/// One series: ground-truth values `x`, observation mask `M`, normalized
/// times and a 1-based class label. Values and mask are time-major
/// (`[t * channels + c]`).
#[derive(Debug, Clone, PartialEq)]
pub struct TimeSeriesSample {
    values: Vec<f64>,
    mask: Vec<bool>,
    times: Vec<f64>,
    channels: usize,
    label: usize,
}

impl TimeSeriesSample {
    pub fn new(
        times: Vec<f64>,
        values: Vec<f64>,
        mask: Vec<bool>,
        channels: usize,
        label: usize,
    ) -> Result<Self> {
        if times.is_empty() || channels == 0 {
            return Err(DataError::InvalidSample("empty series".into()));
        }
        if values.len() != times.len() * channels || mask.len() != values.len() {
            return Err(DataError::InvalidSample(format!(
                "{} times x {channels} channels does not match {} values / {} mask entries",
                times.len(),
                values.len(),
                mask.len()
            )));
        }
        if label == 0 {
            return Err(DataError::InvalidSample("labels are 1-based".into()));
        }
        check_increasing(&times)?;
        Ok(Self {
            values,
            mask,
            times,
            channels,
            label,
        })
    }

    pub fn fully_observed(times: Vec<f64>, values: Vec<f64>, channels: usize, label: usize) -> Result<Self> {
        let mask = vec![true; values.len()];
        Self::new(times, values, mask, channels, label)
    }

    /// Series length `T`.
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn label(&self) -> usize {
        self.label
    }

    pub fn value(&self, t: usize, c: usize) -> f64 {
        self.values[t * self.channels + c]
    }

    pub fn is_observed(&self, t: usize, c: usize) -> bool {
        self.mask[t * self.channels + c]
    }

    pub fn observed_count(&self, c: usize) -> usize {
        (0..self.len()).filter(|&t| self.is_observed(t, c)).count()
    }

    pub fn is_fully_observed(&self) -> bool {
        self.mask.iter().all(|&m| m)
    }

    /// `x̃ = M ⊙ x`: masked entries are exactly zero.
    pub fn zero_filled(&self) -> Vec<f64> {
        self.values
            .iter()
            .zip(&self.mask)
            .map(|(&v, &m)| if m { v } else { 0.0 })
            .collect()
    }

    /// Each channel's earliest observed value, 0 for a channel never observed.
    /// Equals the control path at the first time step.
    pub fn first_observed(&self) -> Vec<f64> {
        (0..self.channels)
            .map(|c| (0..self.len()).find(|&t| self.is_observed(t, c)).map_or(0.0, |t| self.value(t, c)))
            .collect()
    }

    pub fn with_mask(&self, mask: Vec<bool>) -> Result<Self> {
        Self::new(self.times.clone(), self.values.clone(), mask, self.channels, self.label)
    }

    pub(crate) fn with_values(&self, values: Vec<f64>) -> Self {
        debug_assert_eq!(values.len(), self.values.len());
        Self {
            values,
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub samples: Vec<TimeSeriesSample>,
    /// Sample identifiers as they appeared in the source file.
    pub ids: Vec<String>,
    pub classes: usize,
    pub channels: usize,
    pub provenance: String,
}

impl Dataset {
    pub fn new(
        name: impl Into<String>,
        samples: Vec<TimeSeriesSample>,
        classes: usize,
        provenance: impl Into<String>,
    ) -> Result<Self> {
        let Some(first) = samples.first() else {
            return Err(DataError::NoSamples);
        };
        let channels = first.channels();
        if let Some(bad) = samples.iter().position(|s| s.channels() != channels) {
            return Err(DataError::Ragged {
                sample: bad.to_string(),
                message: format!("expected {channels} channels, found {}", samples[bad].channels()),
            });
        }
        if let Some(s) = samples.iter().find(|s| s.label() > classes) {
            return Err(DataError::UnknownLabel {
                row: 0,
                label: s.label().to_string(),
                classes,
            });
        }
        let ids = (0..samples.len()).map(|i| i.to_string()).collect();
        Ok(Self {
            name: name.into(),
            samples,
            ids,
            classes,
            channels,
            provenance: provenance.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.samples.iter().map(TimeSeriesSample::label).collect()
    }

    /// Samples at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            name: self.name.clone(),
            samples: indices.iter().map(|&i| self.samples[i].clone()).collect(),
            ids: indices.iter().map(|&i| self.ids[i].clone()).collect(),
            classes: self.classes,
            channels: self.channels,
            provenance: self.provenance.clone(),
        }
    }

    pub fn map_samples(&self, f: impl Fn(&TimeSeriesSample) -> TimeSeriesSample) -> Self {
        Self {
            samples: self.samples.iter().map(f).collect(),
            ..self.clone()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_filled_masks_exactly() {
        let s = TimeSeriesSample::new(
            vec![0.0, 1.0],
            vec![1.5, -2.0, 3.0, 4.0],
            vec![true, false, false, true],
            2,
            1,
        )
        .unwrap();
        assert_eq!(s.zero_filled(), vec![1.5, 0.0, 0.0, 4.0]);
        assert_eq!(s.first_observed(), vec![1.5, 4.0]);
    }

    #[test]
    fn sample_validation() {
        assert!(TimeSeriesSample::fully_observed(vec![0.0, 0.0], vec![1.0, 2.0], 1, 1).is_err());
        assert!(TimeSeriesSample::fully_observed(vec![0.0, 1.0], vec![1.0], 1, 1).is_err());
        assert!(TimeSeriesSample::fully_observed(vec![0.0, 1.0], vec![1.0, 2.0], 1, 0).is_err());
    }
}
