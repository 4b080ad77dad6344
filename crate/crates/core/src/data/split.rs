//! Seeded hold-out and stratified k-fold splits. Both shuffle first.

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::rng::rng_from_seed;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Holdout {
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
}

fn shuffled(n: usize, seed: u64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng_from_seed(seed));
    idx
}

/// Shuffles `0..n` and puts the first `round(train_ratio * n)` in train.
pub fn holdout_split(n: usize, train_ratio: f64, seed: u64) -> Result<Holdout> {
    if !(0.0..=1.0).contains(&train_ratio) {
        return Err(Error::Argument(format!("train ratio {train_ratio} not in [0, 1]")));
    }
    let idx = shuffled(n, seed);
    let cut = (train_ratio * n as f64).round() as usize;
    Ok(Holdout {
        train: idx[..cut].to_vec(),
        validation: idx[cut..].to_vec(),
    })
}

/// Assigns every index to one of `k` folds so that each class is spread as
/// evenly as possible. Returns the members of each fold, sorted.
///
/// Within each class (visited in label order) the shuffled members are dealt
/// round-robin, starting where the previous class stopped so fold sizes stay
/// balanced too.
pub fn stratified_kfold(labels: &[usize], k: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if k < 2 {
        return Err(Error::Argument(format!("k-fold needs k >= 2, got {k}")));
    }
    let classes = labels.iter().copied().max().map_or(0, |m| m + 1);
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); classes];
    for i in shuffled(labels.len(), seed) {
        members[labels[i]].push(i);
    }
    for (c, m) in members.iter().enumerate() {
        if !m.is_empty() && m.len() < k {
            return Err(Error::Stratification(format!(
                "class {c} has {} members, fewer than {k} folds",
                m.len()
            )));
        }
    }
    let mut folds = vec![Vec::new(); k];
    let mut offset = 0;
    for m in &members {
        for (j, &i) in m.iter().enumerate() {
            folds[(offset + j) % k].push(i);
        }
        offset = (offset + m.len()) % k;
    }
    folds.iter_mut().for_each(|f| f.sort_unstable());
    Ok(folds)
}

/// Train/validation index pairs, one per fold.
pub fn fold_pairs(folds: &[Vec<usize>]) -> Vec<Holdout> {
    (0..folds.len())
        .map(|f| Holdout {
            train: folds
                .iter()
                .enumerate()
                .filter(|&(g, _)| g != f)
                .flat_map(|(_, v)| v.iter().copied())
                .collect(),
            validation: folds[f].clone(),
        })
        .collect()
}
