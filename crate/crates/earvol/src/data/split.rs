//! Patient-level dataset splitting.
//!
//! Every training harness splits by patient, never by slice, so that no
//! subject contributes data to both sides of any fold. Splits are seeded and
//! deterministic.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeSet;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SplitError {
    #[error("need at least {needed} patients, got {got}")]
    InsufficientPatients { needed: usize, got: usize },
    #[error("patient partition violated: {0}")]
    BadPartition(String),
}

/// Partition patients into `k` folds (sizes differ by at most one).
///
/// Input order and duplicates are irrelevant: ids are deduplicated and sorted
/// before the seeded shuffle, so the same cohort always yields the same folds.
pub fn patient_folds(
    patients: &[String],
    k: usize,
    seed: u64,
) -> Result<Vec<Vec<String>>, SplitError> {
    assert!(k >= 1, "fold count must be >= 1");
    let mut ids: Vec<String> = patients
        .iter()
        .collect::<BTreeSet<_>>()
        .into_iter()
        .cloned()
        .collect();
    if ids.len() < k {
        return Err(SplitError::InsufficientPatients {
            needed: k,
            got: ids.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ids.shuffle(&mut rng);
    let mut folds: Vec<Vec<String>> = vec![Vec::new(); k];
    for (i, id) in ids.into_iter().enumerate() {
        folds[i % k].push(id);
    }
    for fold in &mut folds {
        fold.sort();
    }
    Ok(folds)
}

/// Seeded holdout split: `test_frac` of the patients (at least one when the
/// cohort is non-trivial) go to the test side.
pub fn holdout_split(
    patients: &[String],
    test_frac: f64,
    seed: u64,
) -> Result<(Vec<String>, Vec<String>), SplitError> {
    assert!((0.0..1.0).contains(&test_frac));
    let mut ids: Vec<String> = patients
        .iter()
        .collect::<BTreeSet<_>>()
        .into_iter()
        .cloned()
        .collect();
    if ids.len() < 2 {
        return Err(SplitError::InsufficientPatients {
            needed: 2,
            got: ids.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ids.shuffle(&mut rng);
    let n_test = ((ids.len() as f64 * test_frac).round() as usize)
        .clamp(1, ids.len() - 1);
    let test: Vec<String> = ids[..n_test].to_vec();
    let train: Vec<String> = ids[n_test..].to_vec();
    let (mut train, mut test) = (train, test);
    train.sort();
    test.sort();
    Ok((train, test))
}

/// Verify that `folds` form a disjoint cover of `patients`. Used as the
/// leakage audit by every training harness.
pub fn assert_patient_partition(
    patients: &[String],
    folds: &[Vec<String>],
) -> Result<(), SplitError> {
    let all: BTreeSet<&String> = patients.iter().collect();
    let mut seen: BTreeSet<&String> = BTreeSet::new();
    for fold in folds {
        for id in fold {
            if !seen.insert(id) {
                return Err(SplitError::BadPartition(format!(
                    "patient {id} appears in more than one fold"
                )));
            }
            if !all.contains(id) {
                return Err(SplitError::BadPartition(format!(
                    "patient {id} not in the cohort"
                )));
            }
        }
    }
    if seen.len() != all.len() {
        return Err(SplitError::BadPartition(format!(
            "folds cover {} of {} patients",
            seen.len(),
            all.len()
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cohort(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("P{i:03}")).collect()
    }

    #[test]
    fn folds_partition_the_cohort() {
        let patients = cohort(13);
        let folds = patient_folds(&patients, 5, 7).unwrap();
        assert_eq!(folds.len(), 5);
        assert_patient_partition(&patients, &folds).unwrap();
        let sizes: Vec<usize> = folds.iter().map(|f| f.len()).collect();
        assert!(sizes.iter().all(|&s| s == 2 || s == 3));
    }

    #[test]
    fn folds_are_seed_deterministic_and_order_independent() {
        let patients = cohort(11);
        let mut scrambled = patients.clone();
        scrambled.reverse();
        let a = patient_folds(&patients, 5, 42).unwrap();
        let b = patient_folds(&scrambled, 5, 42).unwrap();
        assert_eq!(a, b);
        let c = patient_folds(&patients, 5, 43).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn too_few_patients_is_an_error() {
        let patients = cohort(3);
        match patient_folds(&patients, 5, 0) {
            Err(SplitError::InsufficientPatients { needed: 5, got: 3 }) => {}
            other => panic!("expected InsufficientPatients, got {other:?}"),
        }
    }

    #[test]
    fn holdout_respects_fraction_and_disjointness() {
        let patients = cohort(25);
        let (train, test) = holdout_split(&patients, 0.2, 9).unwrap();
        assert_eq!(test.len(), 5);
        assert_eq!(train.len(), 20);
        assert_patient_partition(&patients, &[train, test]).unwrap();
    }

    #[test]
    fn partition_audit_catches_leakage() {
        let patients = cohort(4);
        let leaky = vec![
            vec!["P000".to_string(), "P001".to_string()],
            vec!["P001".to_string(), "P002".to_string(), "P003".to_string()],
        ];
        assert!(assert_patient_partition(&patients, &leaky).is_err());
    }
}
