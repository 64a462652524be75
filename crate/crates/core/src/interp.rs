//! Natural cubic spline control paths built from partially observed series.
//!
//! Each channel is fitted independently through its own observed points.
//! Outside the first/last observed time the path is held constant, a channel
//! with a single observation is constant, and a channel with none is zero.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::TimeSeriesSample;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum InterpError {
    #[error("timestamps must be strictly increasing (index {index}: {prev} then {next})")]
    NonIncreasingTimes { index: usize, prev: f64, next: f64 },
    #[error("evaluation time {0} is not finite")]
    NonFiniteTime(f64),
    #[error("increment bounds out of order: {s0} > {s1}")]
    ReversedInterval { s0: f64, s1: f64 },
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PathOptions {
    /// Append the (normalized) observation time as an extra, last channel.
    pub append_time: bool,
}

/// Piecewise cubic through one channel's observed knots.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelSpline {
    knots: Vec<f64>,
    values: Vec<f64>,
    /// `[a, b, c, d]` per segment in powers of `s - knots[i]`.
    coeffs: Vec<[f64; 4]>,
}

impl ChannelSpline {
    /// Natural cubic spline (zero second derivative at both ends).
    ///
    /// `knots` must be strictly increasing; this is checked by the caller.
    pub fn natural(knots: Vec<f64>, values: Vec<f64>) -> Self {
        debug_assert_eq!(knots.len(), values.len());
        let n = knots.len();
        if n < 2 {
            return Self {
                knots,
                values,
                coeffs: Vec::new(),
            };
        }
        let h: Vec<f64> = knots.windows(2).map(|w| w[1] - w[0]).collect();
        let second = natural_second_derivatives(&h, &values);
        let coeffs = (0..n - 1)
            .map(|i| {
                let a = values[i];
                let b = (values[i + 1] - values[i]) / h[i] - h[i] * (2.0 * second[i] + second[i + 1]) / 6.0;
                let c = second[i] / 2.0;
                let d = (second[i + 1] - second[i]) / (6.0 * h[i]);
                [a, b, c, d]
            })
            .collect();
        Self {
            knots,
            values,
            coeffs,
        }
    }

    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    fn segment(&self, s: f64) -> Option<(usize, f64)> {
        let n = self.knots.len();
        if n < 2 || s <= self.knots[0] || s >= self.knots[n - 1] {
            return None;
        }
        let i = self.knots.partition_point(|&k| k <= s) - 1;
        Some((i, s - self.knots[i]))
    }

    pub fn eval(&self, s: f64) -> f64 {
        match self.knots.len() {
            0 => 0.0,
            1 => self.values[0],
            n => match self.segment(s) {
                Some((i, u)) => {
                    let [a, b, c, d] = self.coeffs[i];
                    a + u * (b + u * (c + u * d))
                }
                None if s <= self.knots[0] => self.values[0],
                None => self.values[n - 1],
            },
        }
    }

    /// First derivative; zero in the clamped regions. At an interior knot
    /// this is the right-hand derivative.
    pub fn derivative(&self, s: f64) -> f64 {
        match self.segment(s) {
            Some((i, u)) => {
                let [_, b, c, d] = self.coeffs[i];
                b + u * (2.0 * c + 3.0 * d * u)
            }
            None => 0.0,
        }
    }

    /// Left-hand derivative at `s` (uses the segment ending at `s`).
    pub fn left_derivative(&self, s: f64) -> f64 {
        let n = self.knots.len();
        if n < 2 || s <= self.knots[0] || s > self.knots[n - 1] {
            return 0.0;
        }
        let i = self.knots.partition_point(|&k| k < s) - 1;
        let u = s - self.knots[i];
        let [_, b, c, d] = self.coeffs[i];
        b + u * (2.0 * c + 3.0 * d * u)
    }
}

/// Solve the tridiagonal system for interior second derivatives (Thomas
/// algorithm); the two end values are fixed at zero.
fn natural_second_derivatives(h: &[f64], y: &[f64]) -> Vec<f64> {
    let n = y.len();
    let mut m = vec![0.0; n];
    if n < 3 {
        return m;
    }
    let interior = n - 2;
    let mut diag = Vec::with_capacity(interior);
    let mut upper = Vec::with_capacity(interior);
    let mut rhs = Vec::with_capacity(interior);
    for i in 1..n - 1 {
        diag.push(2.0 * (h[i - 1] + h[i]));
        upper.push(h[i]);
        rhs.push(6.0 * ((y[i + 1] - y[i]) / h[i] - (y[i] - y[i - 1]) / h[i - 1]));
    }
    // Forward elimination; the sub-diagonal entry for row r is h[r].
    for r in 1..interior {
        let w = h[r] / diag[r - 1];
        diag[r] -= w * upper[r - 1];
        rhs[r] -= w * rhs[r - 1];
    }
    let mut x = vec![0.0; interior];
    x[interior - 1] = rhs[interior - 1] / diag[interior - 1];
    for r in (0..interior - 1).rev() {
        x[r] = (rhs[r] - upper[r] * x[r + 1]) / diag[r];
    }
    m[1..n - 1].copy_from_slice(&x);
    m
}

/// Continuous control path `X(s)`, one spline per channel.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlPath {
    channels: Vec<ChannelSpline>,
}

impl ControlPath {
    pub fn from_channels(channels: Vec<ChannelSpline>) -> Self {
        Self { channels }
    }

    pub fn channel_count(&self) -> usize {
        self.channels.len()
    }

    pub fn channel(&self, c: usize) -> &ChannelSpline {
        &self.channels[c]
    }

    pub fn eval(&self, s: f64) -> Result<Vec<f64>, InterpError> {
        if !s.is_finite() {
            return Err(InterpError::NonFiniteTime(s));
        }
        Ok(self.channels.iter().map(|c| c.eval(s)).collect())
    }

    pub fn derivative(&self, s: f64) -> Result<Vec<f64>, InterpError> {
        if !s.is_finite() {
            return Err(InterpError::NonFiniteTime(s));
        }
        Ok(self.channels.iter().map(|c| c.derivative(s)).collect())
    }

    /// `X(s1) - X(s0)`.
    pub fn increment(&self, s0: f64, s1: f64) -> Result<Vec<f64>, InterpError> {
        if s0 > s1 {
            return Err(InterpError::ReversedInterval { s0, s1 });
        }
        let a = self.eval(s0)?;
        let b = self.eval(s1)?;
        Ok(b.iter().zip(&a).map(|(x, y)| x - y).collect())
    }

    /// Path values at every grid time, row-major `[grid.len(), channels]`.
    pub fn eval_grid(&self, grid: &[f64]) -> Result<Vec<f64>, InterpError> {
        let mut out = Vec::with_capacity(grid.len() * self.channels.len());
        for &s in grid {
            out.extend(self.eval(s)?);
        }
        Ok(out)
    }
}

pub fn check_increasing(times: &[f64]) -> Result<(), InterpError> {
    for (i, w) in times.windows(2).enumerate() {
        if !(w[1] > w[0]) {
            return Err(InterpError::NonIncreasingTimes {
                index: i + 1,
                prev: w[0],
                next: w[1],
            });
        }
    }
    Ok(())
}

/// Fit one natural spline per channel through that channel's observed points.
pub fn build_control_path(
    sample: &TimeSeriesSample,
    options: PathOptions,
) -> Result<ControlPath, InterpError> {
    let times = sample.times();
    check_increasing(times)?;
    let mut channels = Vec::with_capacity(sample.channels() + usize::from(options.append_time));
    for c in 0..sample.channels() {
        let (knots, values): (Vec<f64>, Vec<f64>) = (0..sample.len())
            .filter(|&t| sample.is_observed(t, c))
            .map(|t| (times[t], sample.value(t, c)))
            .unzip();
        channels.push(ChannelSpline::natural(knots, values));
    }
    if options.append_time {
        channels.push(ChannelSpline::natural(times.to_vec(), times.to_vec()));
    }
    Ok(ControlPath { channels })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn two_knot() -> ChannelSpline {
        ChannelSpline::natural(vec![0.0, 1.0], vec![0.0, 2.0])
    }

    /// Natural spline second derivatives by dense Gaussian elimination over
    /// the full n×n system, including the two boundary rows.
    fn dense_oracle(t: &[f64], y: &[f64], s: f64) -> f64 {
        let n = t.len();
        let mut a = vec![vec![0.0; n + 1]; n];
        a[0][0] = 1.0;
        a[n - 1][n - 1] = 1.0;
        for i in 1..n - 1 {
            let (h0, h1) = (t[i] - t[i - 1], t[i + 1] - t[i]);
            a[i][i - 1] = h0;
            a[i][i] = 2.0 * (h0 + h1);
            a[i][i + 1] = h1;
            a[i][n] = 6.0 * ((y[i + 1] - y[i]) / h1 - (y[i] - y[i - 1]) / h0);
        }
        for col in 0..n {
            let piv = (col..n).max_by(|&p, &q| a[p][col].abs().total_cmp(&a[q][col].abs())).unwrap();
            a.swap(col, piv);
            for r in 0..n {
                if r != col {
                    let f = a[r][col] / a[col][col];
                    for k in col..=n {
                        a[r][k] -= f * a[col][k];
                    }
                }
            }
        }
        let m: Vec<f64> = (0..n).map(|i| a[i][n] / a[i][i]).collect();
        let i = (0..n - 1).find(|&i| s >= t[i] && s <= t[i + 1]).unwrap();
        let h = t[i + 1] - t[i];
        let (l, r) = (t[i + 1] - s, s - t[i]);
        m[i] * l.powi(3) / (6.0 * h)
            + m[i + 1] * r.powi(3) / (6.0 * h)
            + (y[i] / h - m[i] * h / 6.0) * l
            + (y[i + 1] / h - m[i + 1] * h / 6.0) * r
    }

    #[test]
    fn two_knots_are_linear() {
        let s = two_knot();
        assert!((s.eval(0.5) - 1.0).abs() < 1e-15);
        assert!((s.derivative(0.5) - 2.0).abs() < 1e-15);
    }

    #[test]
    fn single_knot_is_constant() {
        let s = ChannelSpline::natural(vec![0.4], vec![7.0]);
        for x in [0.0, 0.4, 0.9, 1.0] {
            assert_eq!(s.eval(x), 7.0);
            assert_eq!(s.derivative(x), 0.0);
        }
    }

    #[test]
    fn empty_channel_is_zero() {
        let s = ChannelSpline::natural(vec![], vec![]);
        assert_eq!(s.eval(0.3), 0.0);
        assert_eq!(s.derivative(0.3), 0.0);
    }

    #[test]
    fn clamps_outside_knots() {
        let s = ChannelSpline::natural(vec![0.2, 0.5, 0.8], vec![1.0, 3.0, 2.0]);
        assert_eq!(s.eval(0.0), 1.0);
        assert_eq!(s.eval(1.0), 2.0);
    }

    #[test]
    fn three_knot_value_matches_dense_solve() {
        let t = [0.0, 0.5, 1.0];
        let y = [1.0, 3.0, 2.0];
        let s = ChannelSpline::natural(t.to_vec(), y.to_vec());
        let expected = dense_oracle(&t, &y, 0.25);
        assert!((s.eval(0.25) - expected).abs() < 1e-12);
        // M1 = 6*((2-3)/0.5 - (3-1)/0.5)/2 = -18; S(0.25) = 2.28125
        assert!((expected - 2.28125).abs() < 1e-12);
    }

    #[test]
    fn increment_identities() {
        let p = ControlPath::from_channels(vec![two_knot()]);
        assert_eq!(p.increment(0.3, 0.3).unwrap(), vec![0.0]);
        let inc = p.increment(0.1, 0.3).unwrap();
        assert!((inc[0] - 0.4).abs() < 1e-15);
        assert!(matches!(p.increment(0.5, 0.2), Err(InterpError::ReversedInterval { .. })));
        assert!(p.eval(f64::NAN).is_err());
    }

    #[test]
    fn rejects_non_increasing_times() {
        assert!(check_increasing(&[0.0, 0.5, 0.5]).is_err());
        assert!(check_increasing(&[0.0, 0.7, 0.5]).is_err());
    }

    #[test]
    fn time_channel_appended() {
        let sample = TimeSeriesSample::fully_observed(vec![0.0, 0.5, 1.0], vec![3.0, 1.0, 2.0], 1, 1).unwrap();
        let p = build_control_path(&sample, PathOptions { append_time: true }).unwrap();
        assert_eq!(p.channel_count(), 2);
        let v = p.eval(0.3).unwrap();
        assert!((v[1] - 0.3).abs() < 1e-15);
    }

    #[test]
    fn path_start_is_first_observation() {
        let sample = TimeSeriesSample::new(
            vec![0.0, 0.4, 1.0],
            vec![9.0, 0.0, 2.0, 0.0, 5.0, 0.0],
            vec![false, false, true, false, true, false],
            2,
            1,
        )
        .unwrap();
        let p = build_control_path(&sample, PathOptions::default()).unwrap();
        assert_eq!(p.eval(0.0).unwrap(), sample.first_observed());
        assert_eq!(sample.first_observed(), vec![2.0, 0.0]);
    }

    fn knot_set() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
        (2usize..12).prop_flat_map(|n| {
            (
                prop::collection::vec(0.05f64..1.0, n),
                prop::collection::vec(-5.0f64..5.0, n),
            )
                .prop_map(|(gaps, ys)| {
                    let mut t = Vec::with_capacity(gaps.len());
                    let mut acc = 0.0;
                    for g in gaps {
                        t.push(acc);
                        acc += g;
                    }
                    (t, ys)
                })
        })
    }

    proptest! {
        #[test]
        fn reproduces_knots((t, y) in knot_set()) {
            let s = ChannelSpline::natural(t.clone(), y.clone());
            for (ti, yi) in t.iter().zip(&y) {
                prop_assert!((s.eval(*ti) - yi).abs() <= 1e-10);
            }
        }

        #[test]
        fn first_derivative_continuous((t, y) in knot_set()) {
            let s = ChannelSpline::natural(t.clone(), y);
            for &k in &t[1..t.len() - 1] {
                prop_assert!((s.derivative(k) - s.left_derivative(k)).abs() <= 1e-8);
            }
        }

        #[test]
        fn matches_dense_oracle((t, y) in knot_set(), frac in 0.0f64..1.0) {
            let s = ChannelSpline::natural(t.clone(), y.clone());
            let x = t[0] + frac * (t[t.len() - 1] - t[0]);
            prop_assert!((s.eval(x) - dense_oracle(&t, &y, x)).abs() <= 1e-9);
        }

        #[test]
        fn affine_time_rescale_invariant((t, y) in knot_set(), scale in 0.1f64..10.0, shift in -3.0f64..3.0, frac in 0.0f64..1.0) {
            let s = ChannelSpline::natural(t.clone(), y.clone());
            let mapped: Vec<f64> = t.iter().map(|v| scale * v + shift).collect();
            let r = ChannelSpline::natural(mapped, y);
            let x = t[0] + frac * (t[t.len() - 1] - t[0]);
            prop_assert!((s.eval(x) - r.eval(scale * x + shift)).abs() <= 1e-9);
        }

        #[test]
        fn increment_is_difference((t, y) in knot_set(), a in 0.0f64..1.0, b in 0.0f64..1.0) {
            let span = t[t.len() - 1];
            let (s0, s1) = if a <= b { (a * span, b * span) } else { (b * span, a * span) };
            let p = ControlPath::from_channels(vec![ChannelSpline::natural(t, y)]);
            let inc = p.increment(s0, s1).unwrap();
            prop_assert_eq!(inc[0], p.eval(s1).unwrap()[0] - p.eval(s0).unwrap()[0]);
        }
    }
}
