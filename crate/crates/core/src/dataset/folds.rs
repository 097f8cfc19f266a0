use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{DatasetError, DatasetManifest, Label};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FoldMode {
    /// Frame-level split stratified by label.
    #[default]
    ByLabel,
    /// Whole patients go to one fold; folds are balanced by label counts.
    ByPatientThenLabel,
}

/// Fold index per manifest position.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldSplit {
    pub k: usize,
    pub mode: FoldMode,
    pub assignment: Vec<usize>,
}

impl FoldSplit {
    /// Manifest positions held out in fold `i`.
    pub fn test_indices(&self, i: usize) -> Vec<usize> {
        (0..self.assignment.len())
            .filter(|&j| self.assignment[j] == i)
            .collect()
    }

    /// Manifest positions of every other fold. Empty when `k == 1`.
    pub fn train_indices(&self, i: usize) -> Vec<usize> {
        (0..self.assignment.len())
            .filter(|&j| self.assignment[j] != i)
            .collect()
    }
}

pub fn split_folds(manifest: &DatasetManifest, k: usize, mode: FoldMode, seed: u64) -> Result<FoldSplit, DatasetError> {
    let n = manifest.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let assignment = match mode {
        FoldMode::ByLabel => {
            if k == 0 || k > n {
                return Err(DatasetError::TooManyFolds {
                    k,
                    available: n,
                    unit: "samples",
                });
            }
            let mut assignment = vec![0; n];
            // Deal each class round-robin; the dealer position carries over
            // between classes so fold sizes differ by at most one.
            let mut dealer = 0;
            for label in Label::ALL {
                let mut members: Vec<usize> = (0..n).filter(|&i| manifest.samples()[i].label == *label).collect();
                members.shuffle(&mut rng);
                for i in members {
                    assignment[i] = dealer % k;
                    dealer += 1;
                }
            }
            assignment
        }
        FoldMode::ByPatientThenLabel => {
            let mut patients: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
            for (i, s) in manifest.samples().iter().enumerate() {
                patients.entry(s.patient_id.as_str()).or_default().push(i);
            }
            if k == 0 || k > patients.len() {
                return Err(DatasetError::TooManyFolds {
                    k,
                    available: patients.len(),
                    unit: "patients",
                });
            }
            let mut groups: Vec<Vec<usize>> = patients.into_values().collect();
            groups.shuffle(&mut rng);
            groups.sort_by_key(|g| std::cmp::Reverse(g.len()));
            let mut per_fold = vec![[0usize; 2]; k];
            let mut assignment = vec![0; n];
            for g in groups {
                let mut counts = [0usize; 2];
                for &i in &g {
                    counts[manifest.samples()[i].label.index()] += 1;
                }
                // Greedy: smallest resulting per-class load, then smallest fold.
                let best = (0..k)
                    .min_by_key(|&f| {
                        let load = (0..2).map(|c| per_fold[f][c] + counts[c]).max().unwrap_or(0);
                        (load, per_fold[f][0] + per_fold[f][1], f)
                    })
                    .expect("k > 0");
                per_fold[best][0] += counts[0];
                per_fold[best][1] += counts[1];
                for i in g {
                    assignment[i] = best;
                }
            }
            assignment
        }
    };
    Ok(FoldSplit { k, mode, assignment })
}
