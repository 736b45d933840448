//! Patient-wise, KL-stratified cross-validation folds.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;

use crate::imaging::AnnotationRecord;
use crate::rng;
use crate::{Error, Result};

/// Fold index per record, in record order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FoldSplit {
    pub k: usize,
    pub assignment: Vec<usize>,
}

impl FoldSplit {
    /// Record indices `(train, validation)` for `fold`.
    pub fn partition(&self, fold: usize) -> (Vec<usize>, Vec<usize>) {
        (0..self.assignment.len()).partition(|&i| self.assignment[i] != fold)
    }
}

/// Groups records by patient and deals patients into `k` folds.
///
/// Patients are stratified by the highest KL grade among their knees. Within
/// each grade the patients are shuffled and dealt round-robin, continuing the
/// fold counter from one grade to the next so fold sizes stay balanced.
pub fn make_cv_splits(records: &[AnnotationRecord], k: usize, seed: u64) -> Result<FoldSplit> {
    if k < 2 {
        return Err(Error::Config(format!(
            "cross-validation needs k >= 2, got {k}"
        )));
    }
    let mut patients: BTreeMap<&str, u8> = BTreeMap::new();
    for r in records {
        let kl = patients.entry(r.patient_id.as_str()).or_insert(r.kl);
        *kl = (*kl).max(r.kl);
    }
    if patients.len() < k {
        return Err(Error::Config(format!(
            "{} patients cannot fill {k} folds",
            patients.len()
        )));
    }
    let mut by_grade: BTreeMap<u8, Vec<&str>> = BTreeMap::new();
    for (&p, &kl) in &patients {
        by_grade.entry(kl).or_default().push(p);
    }
    let mut fold_of: BTreeMap<&str, usize> = BTreeMap::new();
    let mut next = 0usize;
    for (grade, mut group) in by_grade {
        let mut r = rng::stream(seed, &[rng::tag::SPLIT, grade as u64]);
        group.shuffle(&mut r);
        for p in group {
            fold_of.insert(p, next % k);
            next += 1;
        }
    }
    Ok(FoldSplit {
        k,
        assignment: records
            .iter()
            .map(|r| fold_of[r.patient_id.as_str()])
            .collect(),
    })
}
