use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Rng;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldSpec {
    pub k: usize,
    pub assignment: BTreeMap<u32, usize>,
}

/// Greedy largest-first partition of subjects into `k` folds balanced by
/// sample count. Subjects with equal counts are ordered by a seeded
/// shuffle; ties between folds go to the lowest index.
pub fn subject_folds(subjects: &[u32], k: usize, seed: u64) -> Result<FoldSpec> {
    let mut counts: BTreeMap<u32, usize> = BTreeMap::new();
    for &s in subjects {
        *counts.entry(s).or_default() += 1;
    }
    if k == 0 || counts.len() < k {
        return Err(Error::Data(format!("need at least {k} subjects for {k} folds, found {}", counts.len())));
    }
    let mut order: Vec<(u32, usize)> = counts.into_iter().collect();
    Rng::new(seed).shuffle(&mut order);
    order.sort_by(|a, b| b.1.cmp(&a.1));
    let mut sizes = vec![0usize; k];
    let mut assignment = BTreeMap::new();
    for (subject, count) in order {
        let fold = (0..k).min_by_key(|&f| (sizes[f], f)).expect("k >= 1");
        sizes[fold] += count;
        assignment.insert(subject, fold);
    }
    Ok(FoldSpec { k, assignment })
}

impl FoldSpec {
    pub fn fold_of(&self, subject: u32) -> Option<usize> {
        self.assignment.get(&subject).copied()
    }

    /// Row indices outside and inside fold `test`.
    pub fn split(&self, subjects: &[u32], test: usize) -> (Vec<usize>, Vec<usize>) {
        let (mut train, mut held) = (Vec::new(), Vec::new());
        for (i, &s) in subjects.iter().enumerate() {
            if self.fold_of(s) == Some(test) {
                held.push(i);
            } else {
                train.push(i);
            }
        }
        (train, held)
    }

    pub fn fold_sizes(&self, subjects: &[u32]) -> Vec<usize> {
        let mut sizes = vec![0; self.k];
        for &s in subjects {
            if let Some(f) = self.fold_of(s) {
                sizes[f] += 1;
            }
        }
        sizes
    }
}
