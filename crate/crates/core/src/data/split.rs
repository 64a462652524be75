//! Stratified train/validation/test partitioning.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{DataError, Dataset, Result};
use crate::rng;

const STREAM_TAG: u64 = 0x5350_4C54; // "SPLT"

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train: f64,
    pub val: f64,
    pub test: f64,
    pub seed: u64,
    pub stratified: bool,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            train: 0.70,
            val: 0.15,
            test: 0.15,
            seed: 0,
            stratified: true,
        }
    }
}

impl SplitSpec {
    pub fn with_seed(seed: u64) -> Self {
        Self { seed, ..Self::default() }
    }

    fn validate(&self) -> Result<()> {
        let f = [self.train, self.val, self.test];
        if f.iter().any(|x| !x.is_finite() || *x < 0.0) || (f.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(DataError::BadFractions(f));
        }
        Ok(())
    }
}

/// Sorted sample indices of each part.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Class-by-part counts whose row sums are the class sizes, whose column
/// sums are `sizes`, and whose every entry is within one of the proportional
/// share `n_c * size_j / N`. Floors first, then the leftover units go one per
/// cell, rows with the most leftovers first, each to the parts with the most
/// unmet demand (ties: larger fractional share, then lower part index).
fn allocate(counts: &[usize], sizes: [usize; 3]) -> Vec<[usize; 3]> {
    let n: usize = counts.iter().sum();
    let share = |c: usize, j: usize| (counts[c] * sizes[j]) as f64 / n as f64;
    let mut table: Vec<[usize; 3]> = (0..counts.len())
        .map(|c| std::array::from_fn(|j| share(c, j).floor() as usize))
        .collect();
    let mut col_left: [usize; 3] = std::array::from_fn(|j| sizes[j] - table.iter().map(|r| r[j]).sum::<usize>());
    let row_left: Vec<usize> = (0..counts.len()).map(|c| counts[c] - table[c].iter().sum::<usize>()).collect();
    let mut rows: Vec<usize> = (0..counts.len()).collect();
    rows.sort_by(|&a, &b| row_left[b].cmp(&row_left[a]).then(a.cmp(&b)));
    for c in rows {
        let mut cols = [0usize, 1, 2];
        cols.sort_by(|&a, &b| {
            col_left[b]
                .cmp(&col_left[a])
                .then(share(c, b).fract().total_cmp(&share(c, a).fract()))
                .then(a.cmp(&b))
        });
        for &j in cols.iter().take(row_left[c]) {
            table[c][j] += 1;
            col_left[j] = col_left[j].saturating_sub(1);
        }
    }
    table
}

pub fn split(dataset: &Dataset, spec: &SplitSpec) -> Result<Split> {
    spec.validate()?;
    let n = dataset.len();
    if n < 10 {
        return Err(DataError::TooFewSamples(n));
    }
    let groups: Vec<Vec<usize>> = if spec.stratified {
        let mut g = vec![Vec::new(); dataset.classes];
        for (i, s) in dataset.samples.iter().enumerate() {
            g[s.label() - 1].push(i);
        }
        if let Some(c) = g.iter().position(|v| v.len() < 3) {
            return Err(DataError::ClassTooSmall {
                class: c + 1,
                count: g[c].len(),
            });
        }
        g
    } else {
        vec![(0..n).collect()]
    };

    let counts: Vec<usize> = groups.iter().map(Vec::len).collect();
    let n_val = (spec.val * n as f64).round() as usize;
    let n_test = ((spec.test * n as f64).round() as usize).min(n - n_val);
    let table = allocate(&counts, [n - n_val - n_test, n_val, n_test]);

    let mut out = Split {
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
    };
    for (c, group) in groups.into_iter().enumerate() {
        let mut idx = group;
        idx.shuffle(&mut rng::stream(&[spec.seed, STREAM_TAG, c as u64]));
        let (v, rest) = idx.split_at(table[c][1]);
        let (t, tr) = rest.split_at(table[c][2]);
        out.val.extend_from_slice(v);
        out.test.extend_from_slice(t);
        out.train.extend_from_slice(tr);
    }
    out.train.sort_unstable();
    out.val.sort_unstable();
    out.test.sort_unstable();
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::TimeSeriesSample;
    use proptest::prelude::*;

    fn labelled(labels: &[usize], classes: usize) -> Dataset {
        let samples = labels
            .iter()
            .map(|&l| TimeSeriesSample::fully_observed(vec![0.0, 1.0], vec![0.0, 1.0], 1, l).unwrap())
            .collect();
        Dataset::new("toy", samples, classes, "test").unwrap()
    }

    #[test]
    fn balanced_hundred_is_70_15_15() {
        let labels: Vec<usize> = (0..100).map(|i| 1 + i % 2).collect();
        let s = split(&labelled(&labels, 2), &SplitSpec::default()).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (70, 15, 15));
    }

    #[test]
    fn gunpoint_sized_split() {
        let labels: Vec<usize> = (0..200).map(|i| 1 + i % 2).collect();
        let s = split(&labelled(&labels, 2), &SplitSpec::default()).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (140, 30, 30));
    }

    #[test]
    fn preconditions() {
        let small: Vec<usize> = (0..9).map(|i| 1 + i % 2).collect();
        assert!(matches!(split(&labelled(&small, 2), &SplitSpec::default()), Err(DataError::TooFewSamples(9))));
        let mut rare = vec![1; 12];
        rare.extend([2, 2]);
        assert!(matches!(
            split(&labelled(&rare, 2), &SplitSpec::default()),
            Err(DataError::ClassTooSmall { class: 2, count: 2 })
        ));
        let bad = SplitSpec {
            train: 0.5,
            ..SplitSpec::default()
        };
        assert!(matches!(split(&labelled(&rare, 2), &bad), Err(DataError::BadFractions(_))));
    }

    proptest! {
        #[test]
        fn partition_and_stratification(counts in prop::collection::vec(3usize..40, 1..8), seed: u64) {
            let labels: Vec<usize> = counts.iter().enumerate().flat_map(|(c, &k)| std::iter::repeat_n(c + 1, k)).collect();
            prop_assume!(labels.len() >= 10);
            let ds = labelled(&labels, counts.len());
            let spec = SplitSpec::with_seed(seed);
            let s = split(&ds, &spec).unwrap();
            prop_assert_eq!(&s, &split(&ds, &spec).unwrap());

            let mut all: Vec<usize> = s.train.iter().chain(&s.val).chain(&s.test).copied().collect();
            all.sort_unstable();
            prop_assert_eq!(all, (0..labels.len()).collect::<Vec<_>>());

            let n = labels.len() as f64;
            prop_assert_eq!(s.val.len(), (0.15 * n).round() as usize);
            prop_assert_eq!(s.test.len(), (0.15 * n).round() as usize);
            for (part, frac) in [(&s.train, spec.train), (&s.val, spec.val), (&s.test, spec.test)] {
                for (c, &k) in counts.iter().enumerate() {
                    let got = part.iter().filter(|&&i| labels[i] == c + 1).count() as f64;
                    let want = k as f64 / n * part.len() as f64;
                    prop_assert!((got - want).abs() <= 1.0 + 1e-9, "class {} got {} want {} (frac {})", c + 1, got, want, frac);
                }
            }
            for c in 1..=counts.len() {
                prop_assert!(s.train.iter().any(|&i| labels[i] == c));
            }
        }
    }
}
