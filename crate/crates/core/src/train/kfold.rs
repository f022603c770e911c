use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::rng_for;

const KFOLD_STREAM: u64 = 0xF01D;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub fold: usize,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

fn check(n: usize, k: usize) -> Result<()> {
    if k < 2 || n < k {
        return Err(Error::config(format!(
            "cannot split {n} samples into {k} folds (need 2 ≤ k ≤ n)"
        )));
    }
    Ok(())
}

fn plans(
    n: usize,
    k: usize,
    assignment: impl Fn(usize) -> usize,
    order: &[usize],
) -> Vec<FoldPlan> {
    let mut tests = vec![Vec::new(); k];
    for (pos, &idx) in order.iter().enumerate() {
        tests[assignment(pos)].push(idx);
    }
    tests
        .into_iter()
        .enumerate()
        .map(|(fold, mut test)| {
            test.sort_unstable();
            let held: BTreeSet<usize> = test.iter().copied().collect();
            let train = (0..n).filter(|i| !held.contains(i)).collect();
            FoldPlan { fold, train, test }
        })
        .collect()
}

/// Seeded shuffle, then `k` contiguous chunks whose sizes differ by at most
/// one (the first `n mod k` chunks take the extra sample).
pub fn kfold_split(n: usize, k: usize, seed: u64) -> Result<Vec<FoldPlan>> {
    check(n, k)?;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng_for(&[seed, KFOLD_STREAM]));
    let (base, extra) = (n / k, n % k);
    let boundary = extra * (base + 1);
    let assign = move |pos: usize| {
        if pos < boundary {
            pos / (base + 1)
        } else {
            extra + (pos - boundary) / base
        }
    };
    Ok(plans(n, k, assign, &order))
}

/// Like [`kfold_split`] but deals each class round-robin so every fold keeps
/// the class proportions to within one sample.
pub fn stratified_kfold_split(labels: &[usize], k: usize, seed: u64) -> Result<Vec<FoldPlan>> {
    let n = labels.len();
    check(n, k)?;
    let mut rng = rng_for(&[seed, KFOLD_STREAM, 1]);
    let classes = labels.iter().copied().max().map_or(0, |m| m + 1);
    let mut order = Vec::with_capacity(n);
    for c in 0..classes {
        let mut members: Vec<usize> = (0..n).filter(|&i| labels[i] == c).collect();
        members.shuffle(&mut rng);
        order.extend(members);
    }
    Ok(plans(n, k, move |pos| pos % k, &order))
}

/// Checks that test sets partition `0..n` and each train set is the
/// complement of its test set.
pub fn audit_folds(plans: &[FoldPlan], n: usize) -> Result<()> {
    let mut seen = vec![false; n];
    for p in plans {
        let test: BTreeSet<usize> = p.test.iter().copied().collect();
        if p.train.iter().any(|i| test.contains(i)) {
            return Err(Error::data(format!(
                "fold {} trains on a test sample",
                p.fold
            )));
        }
        if p.train.len() + p.test.len() != n {
            return Err(Error::data(format!(
                "fold {} does not cover all samples",
                p.fold
            )));
        }
        for &i in &p.test {
            if i >= n || seen[i] {
                return Err(Error::data(format!(
                    "sample {i} tested twice or out of range"
                )));
            }
            seen[i] = true;
        }
    }
    if let Some(i) = seen.iter().position(|s| !s) {
        return Err(Error::data(format!("sample {i} never tested")));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn hundred_into_ten() {
        let f = kfold_split(100, 10, 0).unwrap();
        assert!(f.iter().all(|p| p.test.len() == 10 && p.train.len() == 90));
        audit_folds(&f, 100).unwrap();
    }

    #[test]
    fn same_seed_same_split() {
        assert_eq!(
            kfold_split(37, 5, 9).unwrap(),
            kfold_split(37, 5, 9).unwrap()
        );
        assert_ne!(
            kfold_split(37, 5, 9).unwrap(),
            kfold_split(37, 5, 10).unwrap()
        );
    }

    #[test]
    fn rejects_too_many_folds() {
        assert!(kfold_split(3, 4, 0).is_err());
        assert!(kfold_split(3, 1, 0).is_err());
    }

    #[test]
    fn stratified_keeps_proportions() {
        let labels: Vec<usize> = (0..30).map(|i| usize::from(i % 3 == 0)).collect();
        let f = stratified_kfold_split(&labels, 5, 2).unwrap();
        audit_folds(&f, 30).unwrap();
        for p in &f {
            let pos = p.test.iter().filter(|&&i| labels[i] == 1).count();
            assert_eq!(pos, 2);
        }
    }

    #[test]
    fn audit_catches_overlap() {
        let mut f = kfold_split(10, 2, 0).unwrap();
        let leaked = f[0].test[0];
        f[0].train.push(leaked);
        assert!(audit_folds(&f, 10).is_err());
    }

    proptest! {
        #[test]
        fn folds_partition(n in 2usize..200, k in 2usize..12, seed: u64) {
            prop_assume!(k <= n);
            let f = kfold_split(n, k, seed).unwrap();
            prop_assert!(audit_folds(&f, n).is_ok());
            let sizes: Vec<usize> = f.iter().map(|p| p.test.len()).collect();
            let (lo, hi) = (sizes.iter().min().unwrap(), sizes.iter().max().unwrap());
            prop_assert!(hi - lo <= 1);
        }

        #[test]
        fn stratified_partitions(labels in prop::collection::vec(0usize..3, 4..80), k in 2usize..5, seed: u64) {
            let f = stratified_kfold_split(&labels, k, seed).unwrap();
            prop_assert!(audit_folds(&f, labels.len()).is_ok());
        }
    }
}
