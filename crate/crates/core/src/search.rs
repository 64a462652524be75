//! Random hyperparameter search: log-uniform learning rate, grid draws for
//! depth, width and batch size.

use rand::seq::IndexedRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::rng;

const SEARCH_TAG: u64 = 0x5345_4152; // "SEAR"

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchSpace {
    pub lr_min: f64,
    pub lr_max: f64,
    pub n_l: Vec<usize>,
    pub n_h: Vec<usize>,
    pub batch_size: Vec<usize>,
}

impl Default for SearchSpace {
    fn default() -> Self {
        Self {
            lr_min: 1e-4,
            lr_max: 1e-1,
            n_l: vec![1, 2, 3, 4],
            n_h: vec![16, 32, 64, 128],
            batch_size: vec![16, 32, 64, 128],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub lr: f64,
    pub n_l: usize,
    pub n_h: usize,
    pub batch_size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trial {
    pub candidate: Candidate,
    /// `None` when training failed.
    pub val_loss: Option<f64>,
}

impl SearchSpace {
    /// `budget` independent draws from the stream for `seed`.
    pub fn sample(&self, budget: usize, seed: u64) -> Vec<Candidate> {
        let mut r = rng::stream(&[seed, SEARCH_TAG]);
        let (lo, hi) = (self.lr_min.log10(), self.lr_max.log10());
        (0..budget)
            .map(|_| {
                let lr = 10f64.powf(r.random_range(lo..=hi)).clamp(self.lr_min, self.lr_max);
                Candidate {
                    lr,
                    n_l: *self.n_l.choose(&mut r).expect("empty n_l grid"),
                    n_h: *self.n_h.choose(&mut r).expect("empty n_h grid"),
                    batch_size: *self.batch_size.choose(&mut r).expect("empty batch grid"),
                }
            })
            .collect()
    }
}

/// Evaluate `budget` sampled candidates and return the one with the lowest
/// validation loss (ties: lowest lr), plus every trial in draw order.
/// Failed trials never win unless all fail, in which case the first
/// candidate is returned.
pub fn search_hyperparameters<E>(
    space: &SearchSpace,
    budget: usize,
    seed: u64,
    mut evaluate: impl FnMut(&Candidate) -> Result<f64, E>,
) -> (Candidate, Vec<Trial>) {
    let candidates = space.sample(budget.max(1), seed);
    let trials: Vec<Trial> = candidates
        .iter()
        .map(|c| Trial {
            candidate: *c,
            val_loss: evaluate(c).ok().filter(|l| l.is_finite()),
        })
        .collect();
    let best = trials
        .iter()
        .filter_map(|t| t.val_loss.map(|l| (l, t.candidate)))
        .min_by(|a, b| a.0.total_cmp(&b.0).then(a.1.lr.total_cmp(&b.1.lr)))
        .map_or(candidates[0], |(_, c)| c);
    (best, trials)
}
