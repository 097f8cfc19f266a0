mod support;

use std::collections::BTreeMap;

use proptest::prelude::*;
use support::*;
use urocnn::dataset::{generate_synthetic, split_folds, Composition, FoldMode, SyntheticOptions};

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn label_folds_partition_and_stratify(seed in any::<u64>(), k in 1usize..=5) {
        let manifest = random_manifest(seed, 8);
        prop_assume!(manifest.len() >= k);
        let split = split_folds(&manifest, k, FoldMode::ByLabel, seed).unwrap();
        prop_assert_eq!(check_label_split(&manifest, &split), Ok(()));
    }

    #[test]
    fn patient_folds_never_split_a_patient(seed in any::<u64>(), k in 1usize..=4) {
        let manifest = random_manifest(seed, 9);
        let patients: std::collections::BTreeSet<_> = manifest.samples().iter().map(|s| &s.patient_id).collect();
        prop_assume!(patients.len() >= k);
        let split = split_folds(&manifest, k, FoldMode::ByPatientThenLabel, seed).unwrap();
        let tests: Vec<Vec<usize>> = (0..k).map(|i| split.test_indices(i)).collect();
        prop_assert!(is_partition(&tests, manifest.len()));
        let mut home: BTreeMap<&str, usize> = BTreeMap::new();
        for (i, s) in manifest.samples().iter().enumerate() {
            let fold = *home.entry(&s.patient_id).or_insert(split.assignment[i]);
            prop_assert_eq!(fold, split.assignment[i]);
        }
    }
}

#[test]
fn six_synthetic_patients_stay_whole() {
    let options = SyntheticOptions {
        patients: 6,
        ..SyntheticOptions::default()
    };
    let manifest = generate_synthetic(&Composition::uniform(6), 8, 4, &options).unwrap();
    let split = split_folds(&manifest, 3, FoldMode::ByPatientThenLabel, 4).unwrap();
    let samples = manifest.samples();
    for i in 0..samples.len() {
        for j in 0..samples.len() {
            if samples[i].patient_id == samples[j].patient_id && samples[i].procedure == samples[j].procedure {
                assert_eq!(
                    split.assignment[i], split.assignment[j],
                    "{} / {}",
                    samples[i].id, samples[j].id
                );
            }
        }
    }
}

#[test]
fn same_seed_same_split() {
    let manifest = random_manifest(17, 5);
    let a = split_folds(&manifest, 3, FoldMode::ByLabel, 99).unwrap();
    let b = split_folds(&manifest, 3, FoldMode::ByLabel, 99).unwrap();
    assert_eq!(a, b);
}
