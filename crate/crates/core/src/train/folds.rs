use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fold {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

/// Shuffles `0..n` with `seed` and cuts it into `k` test blocks whose sizes
/// differ by at most one; each fold trains on the other blocks.
pub fn kfold_split(n: usize, k: usize, seed: u64) -> Result<Vec<Fold>> {
    if k < 2 {
        return Err(Error::Invalid(format!("k-fold needs k >= 2, got {k}")));
    }
    if n < k {
        return Err(Error::Invalid(format!("cannot split {n} samples into {k} folds")));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let (base, extra) = (n / k, n % k);
    let mut blocks = Vec::with_capacity(k);
    let mut start = 0;
    for f in 0..k {
        let len = base + usize::from(f < extra);
        blocks.push(idx[start..start + len].to_vec());
        start += len;
    }
    Ok((0..k)
        .map(|f| Fold {
            test: blocks[f].clone(),
            train: blocks
                .iter()
                .enumerate()
                .filter(|&(g, _)| g != f)
                .flat_map(|(_, b)| b.iter().copied())
                .collect(),
        })
        .collect())
}

/// SHA-256 over every fold's train and test indices.
pub fn split_hash(folds: &[Fold]) -> String {
    let mut h = Sha256::new();
    for f in folds {
        h.update((f.train.len() as u64).to_le_bytes());
        f.train.iter().for_each(|&i| h.update((i as u64).to_le_bytes()));
        h.update((f.test.len() as u64).to_le_bytes());
        f.test.iter().for_each(|&i| h.update((i as u64).to_le_bytes()));
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// Moves the last `fraction` of a shuffled training list into a validation list (at least one sample).
pub fn hold_out(train: &[usize], fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx = train.to_vec();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_val = ((idx.len() as f64 * fraction).round() as usize).clamp(1, idx.len().saturating_sub(1).max(1));
    let val = idx.split_off(idx.len() - n_val);
    (idx, val)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;

    #[test]
    fn ten_into_five() {
        let folds = kfold_split(10, 5, 3).unwrap();
        assert_eq!(folds.len(), 5);
        let mut all = BTreeSet::new();
        for f in &folds {
            assert_eq!(f.test.len(), 2);
            assert_eq!(f.train.len(), 8);
            for &i in &f.test {
                assert!(all.insert(i), "test sets overlap at {i}");
                assert!(!f.train.contains(&i));
            }
        }
        assert_eq!(all, (0..10).collect());
    }

    #[test]
    fn uneven_sizes_differ_by_one() {
        let folds = kfold_split(11, 3, 0).unwrap();
        let sizes: Vec<_> = folds.iter().map(|f| f.test.len()).collect();
        assert_eq!(sizes.iter().sum::<usize>(), 11);
        assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
    }

    #[test]
    fn deterministic_and_seed_sensitive() {
        let a = kfold_split(20, 4, 1).unwrap();
        assert_eq!(a, kfold_split(20, 4, 1).unwrap());
        assert_eq!(split_hash(&a), split_hash(&kfold_split(20, 4, 1).unwrap()));
        assert_ne!(split_hash(&a), split_hash(&kfold_split(20, 4, 2).unwrap()));
    }

    #[test]
    fn too_few_samples() {
        assert!(kfold_split(3, 5, 0).is_err());
        assert!(kfold_split(3, 1, 0).is_err());
    }

    #[test]
    fn hold_out_partitions_training_set() {
        let train: Vec<usize> = (100..120).collect();
        let (t, v) = hold_out(&train, 0.2, 7);
        assert_eq!((t.len(), v.len()), (16, 4));
        let mut all: Vec<_> = t.iter().chain(&v).copied().collect();
        all.sort();
        assert_eq!(all, train);
    }
}
