//! Paired method comparison: one-sided Wilcoxon signed-rank test, Holm
//! step-down adjustment and win/tie/loss counts.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StatsError {
    #[error("Wilcoxon test needs at least {min} nonzero differences, got {got}")]
    TooFewDifferences { got: usize, min: usize },
    #[error("p-value {0} outside [0, 1]")]
    InvalidP(f64),
    #[error("empty input")]
    Empty,
    #[error("cells differ between methods: missing from A {missing_a:?}, missing from B {missing_b:?}")]
    Misaligned {
        missing_a: Vec<String>,
        missing_b: Vec<String>,
    },
    #[error("non-finite difference")]
    NonFinite,
}

pub type Result<T> = std::result::Result<T, StatsError>;

pub const MIN_PAIRS: usize = 5;
pub const EXACT_MAX: usize = 12;
pub const ALPHA: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Wilcoxon {
    /// `P(W+ ≥ observed)` under the null; alternative "A > B".
    pub p: f64,
    /// Sum of ranks of positive differences.
    pub w_plus: f64,
    /// Nonzero differences used.
    pub n: usize,
    pub exact: bool,
    /// Every difference was zero; `p` is set to 1.
    pub all_zero: bool,
}

/// Average ranks (1-based) of `values`, ties sharing the mean rank.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

fn normal_upper_tail(z: f64) -> f64 {
    0.5 * erfc(z / std::f64::consts::SQRT_2)
}

/// One-sided signed-rank test of `differences = a - b` for "A > B".
///
/// Zero differences are dropped. With at most 12 remaining pairs the exact
/// null distribution (all sign patterns over the tied ranks) is used;
/// otherwise a normal approximation with tie-corrected variance.
pub fn wilcoxon_one_sided(differences: &[f64]) -> Result<Wilcoxon> {
    if differences.iter().any(|d| !d.is_finite()) {
        return Err(StatsError::NonFinite);
    }
    let nonzero: Vec<f64> = differences.iter().copied().filter(|&d| d != 0.0).collect();
    let n = nonzero.len();
    if n == 0 && !differences.is_empty() {
        return Ok(Wilcoxon {
            p: 1.0,
            w_plus: 0.0,
            n: 0,
            exact: true,
            all_zero: true,
        });
    }
    if n < MIN_PAIRS {
        return Err(StatsError::TooFewDifferences { got: n, min: MIN_PAIRS });
    }
    let mags: Vec<f64> = nonzero.iter().map(|d| d.abs()).collect();
    let ranks = average_ranks(&mags);
    let w_plus: f64 = ranks.iter().zip(&nonzero).filter(|(_, &d)| d > 0.0).map(|(r, _)| r).sum();

    if n <= EXACT_MAX {
        // Doubled ranks are integers; count sign patterns by subset sums.
        let doubled: Vec<usize> = ranks.iter().map(|r| (2.0 * r).round() as usize).collect();
        let total: usize = doubled.iter().sum();
        let mut counts = vec![0u64; total + 1];
        counts[0] = 1;
        for &r in &doubled {
            for s in (r..=total).rev() {
                counts[s] += counts[s - r];
            }
        }
        let observed = (2.0 * w_plus).round() as usize;
        let tail: u64 = counts[observed..].iter().sum();
        return Ok(Wilcoxon {
            p: tail as f64 / (1u64 << n) as f64,
            w_plus,
            n,
            exact: true,
            all_zero: false,
        });
    }

    let nf = n as f64;
    let mean = nf * (nf + 1.0) / 4.0;
    let mut tie_term = 0.0;
    let mut sorted = mags.clone();
    sorted.sort_by(f64::total_cmp);
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i;
        while j + 1 < sorted.len() && sorted[j + 1] == sorted[i] {
            j += 1;
        }
        let t = (j - i + 1) as f64;
        tie_term += t * t * t - t;
        i = j + 1;
    }
    let var = nf * (nf + 1.0) * (2.0 * nf + 1.0) / 24.0 - tie_term / 48.0;
    let p = if var > 0.0 { normal_upper_tail((w_plus - mean) / var.sqrt()) } else { 0.5 };
    Ok(Wilcoxon {
        p,
        w_plus,
        n,
        exact: false,
        all_zero: false,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Holm {
    pub adjusted: Vec<f64>,
    pub reject: Vec<bool>,
}

/// Holm step-down adjustment, returned in input order.
pub fn holm_bonferroni(p_values: &[f64]) -> Result<Holm> {
    if p_values.is_empty() {
        return Err(StatsError::Empty);
    }
    if let Some(&bad) = p_values.iter().find(|p| !(0.0..=1.0).contains(*p)) {
        return Err(StatsError::InvalidP(bad));
    }
    let m = p_values.len();
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| p_values[a].total_cmp(&p_values[b]).then(a.cmp(&b)));
    let mut adjusted = vec![0.0; m];
    let mut running = 0.0f64;
    for (i, &k) in order.iter().enumerate() {
        running = running.max(((m - i) as f64 * p_values[k]).min(1.0));
        adjusted[k] = running;
    }
    let reject = adjusted.iter().map(|&p| p < ALPHA).collect();
    Ok(Holm { adjusted, reject })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct WinTieLoss {
    pub wins: usize,
    pub ties: usize,
    pub losses: usize,
}

fn milli(x: f64) -> i64 {
    (x * 1000.0).round() as i64
}

/// Compare per-cell mean scores rounded to three decimals.
pub fn win_tie_loss(a: &BTreeMap<String, f64>, b: &BTreeMap<String, f64>) -> Result<WinTieLoss> {
    check_aligned(a, b)?;
    let mut out = WinTieLoss::default();
    for (cell, &x) in a {
        match milli(x).cmp(&milli(b[cell])) {
            std::cmp::Ordering::Greater => out.wins += 1,
            std::cmp::Ordering::Equal => out.ties += 1,
            std::cmp::Ordering::Less => out.losses += 1,
        }
    }
    Ok(out)
}

pub fn check_aligned(a: &BTreeMap<String, f64>, b: &BTreeMap<String, f64>) -> Result<()> {
    let missing_a: Vec<String> = b.keys().filter(|k| !a.contains_key(*k)).cloned().collect();
    let missing_b: Vec<String> = a.keys().filter(|k| !b.contains_key(*k)).cloned().collect();
    if !missing_a.is_empty() || !missing_b.is_empty() {
        return Err(StatsError::Misaligned { missing_a, missing_b });
    }
    if a.is_empty() {
        return Err(StatsError::Empty);
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairedComparison {
    pub method_a: String,
    pub method_b: String,
    pub cells: usize,
    pub wtl: WinTieLoss,
    /// `None` when there are too few nonzero differences to test.
    pub p_raw: Option<f64>,
    pub p_adjusted: Option<f64>,
    pub significant: bool,
    pub all_zero: bool,
}

/// W/T/L and one-sided Wilcoxon for each pair, Holm-adjusted jointly over
/// the pairs that could be tested.
pub fn compare_pairs(pairs: &[(String, String, BTreeMap<String, f64>, BTreeMap<String, f64>)]) -> Result<Vec<PairedComparison>> {
    let mut out = Vec::with_capacity(pairs.len());
    for (na, nb, a, b) in pairs {
        let wtl = win_tie_loss(a, b)?;
        let diffs: Vec<f64> = a.iter().map(|(k, x)| x - b[k]).collect();
        let (p_raw, all_zero) = match wilcoxon_one_sided(&diffs) {
            Ok(w) => (Some(w.p), w.all_zero),
            Err(StatsError::TooFewDifferences { .. }) => (None, false),
            Err(e) => return Err(e),
        };
        out.push(PairedComparison {
            method_a: na.clone(),
            method_b: nb.clone(),
            cells: a.len(),
            wtl,
            p_raw,
            p_adjusted: None,
            significant: false,
            all_zero,
        });
    }
    let tested: Vec<usize> = (0..out.len()).filter(|&i| out[i].p_raw.is_some()).collect();
    if !tested.is_empty() {
        let ps: Vec<f64> = tested.iter().map(|&i| out[i].p_raw.unwrap()).collect();
        let holm = holm_bonferroni(&ps)?;
        for (j, &i) in tested.iter().enumerate() {
            out[i].p_adjusted = Some(holm.adjusted[j]);
            out[i].significant = holm.reject[j];
        }
    }
    Ok(out)
}
