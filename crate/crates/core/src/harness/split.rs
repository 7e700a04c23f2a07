use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::seed;

/// Repeated stratified train/test splitting.
#[derive(Clone, Debug, PartialEq)]
pub struct SplitSpec {
    /// Fraction of each class used for training, in (0, 1).
    pub ratio: f64,
    pub repeats: usize,
    pub base_seed: u64,
}

impl SplitSpec {
    pub fn new(ratio: f64, base_seed: u64) -> Self {
        SplitSpec {
            ratio,
            repeats: 10,
            base_seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.ratio > 0.0 && self.ratio < 1.0) {
            return Err(Error::Config(format!("training ratio must lie in (0, 1), got {}", self.ratio)));
        }
        if self.repeats == 0 {
            return Err(Error::Config("repeats must be at least 1".into()));
        }
        Ok(())
    }

    /// Training samples drawn from a class of `n`.
    pub fn train_count(&self, n: usize) -> usize {
        (self.ratio * n as f64).round() as usize
    }
}

/// Sorted (train, test) sample indices for one repeat. Each class contributes
/// exactly `round(ratio * class size)` training samples.
pub fn split(labels: &[usize], spec: &SplitSpec, repeat: usize) -> Result<(Vec<usize>, Vec<usize>)> {
    spec.validate()?;
    let classes = labels.iter().max().map_or(0, |&m| m + 1);
    let mut by_class = vec![Vec::new(); classes];
    for (i, &l) in labels.iter().enumerate() {
        by_class[l].push(i);
    }
    let mut rng = seed::rng(seed::derive(spec.base_seed, repeat as u64));
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (k, mut ids) in by_class.into_iter().enumerate() {
        if ids.is_empty() {
            continue;
        }
        let n_train = spec.train_count(ids.len());
        if n_train == 0 {
            return Err(Error::Config(format!(
                "ratio {} leaves class {k} ({} samples) without training samples",
                spec.ratio,
                ids.len()
            )));
        }
        ids.shuffle(&mut rng);
        train.extend_from_slice(&ids[..n_train]);
        test.extend_from_slice(&ids[n_train..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok((train, test))
}
