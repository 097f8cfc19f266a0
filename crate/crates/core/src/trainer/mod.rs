//! Two-step transfer learning: warm phase, frozen fine-tune phase, and the
//! three training scenarios under k-fold cross-validation.

mod bundle;
mod scenario;
mod step;

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::arch::{ArchError, ProvenanceTag};
use crate::dataset::{DatasetError, FoldMode, Procedure};
use crate::metrics::MetricsError;
use crate::nn::NnError;

pub use bundle::{Cell, ExperimentBundle, BUNDLE_FILE, BUNDLE_FORMAT, CHECKPOINT_DIR};
pub use scenario::{
    run_matrix, run_matrix_from, run_scenario, DomainFolds, EvalRecord, Experiment, Observer, RunContext, RunRecord,
};
pub use step::{run_step, PhaseEnd, StepObserver, StepOutcome};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("training set has a single class ({0} samples, all {1})")]
    SingleClass(usize, &'static str),
    #[error("training set is empty")]
    EmptyTrainingSet,
    #[error("model expects {expected:?} inputs, data is {found:?}")]
    SpecMismatch {
        expected: (usize, usize),
        found: (usize, usize),
    },
    #[error("no {0} samples in the manifest")]
    MissingDomain(Domain),
    #[error(transparent)]
    Arch(#[from] ArchError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: bad bundle: {detail}")]
    Bundle { path: PathBuf, detail: String },
}

/// Training/evaluation domain: one procedure or both pooled.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Cys,
    Urs,
    Combined,
}

impl Domain {
    pub const ALL: [Domain; 3] = [Domain::Cys, Domain::Urs, Domain::Combined];

    pub fn as_str(self) -> &'static str {
        match self {
            Domain::Cys => "cys",
            Domain::Urs => "urs",
            Domain::Combined => "combined",
        }
    }

    pub fn procedures(self) -> &'static [Procedure] {
        match self {
            Domain::Cys => &[Procedure::Cys],
            Domain::Urs => &[Procedure::Urs],
            Domain::Combined => &[Procedure::Cys, Procedure::Urs],
        }
    }

    /// Lineage tag for weights trained on this domain.
    pub fn tag(self) -> ProvenanceTag {
        match self {
            Domain::Cys => ProvenanceTag::Cystoscopy,
            Domain::Urs => ProvenanceTag::Ureteroscopy,
            Domain::Combined => ProvenanceTag::Combined,
        }
    }
}

impl fmt::Display for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Domain {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        Domain::ALL
            .into_iter()
            .find(|d| d.as_str().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| format!("unknown domain {s:?} (expected cys, urs or combined)"))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum Scenario {
    /// Cystoscopy, then ureteroscopy.
    One,
    /// Ureteroscopy, then cystoscopy.
    Two,
    /// Both procedures in a single step.
    Three,
}

/// One training step of a scenario.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StepPlan {
    pub train: Domain,
    pub eval: Vec<Domain>,
}

impl Scenario {
    pub const ALL: [Scenario; 3] = [Scenario::One, Scenario::Two, Scenario::Three];

    pub fn id(self) -> u8 {
        match self {
            Scenario::One => 1,
            Scenario::Two => 2,
            Scenario::Three => 3,
        }
    }

    pub fn steps(self) -> Vec<StepPlan> {
        let both = vec![Domain::Cys, Domain::Urs];
        match self {
            Scenario::One => vec![
                StepPlan {
                    train: Domain::Cys,
                    eval: both.clone(),
                },
                StepPlan {
                    train: Domain::Urs,
                    eval: both,
                },
            ],
            Scenario::Two => vec![
                StepPlan {
                    train: Domain::Urs,
                    eval: both.clone(),
                },
                StepPlan {
                    train: Domain::Cys,
                    eval: both,
                },
            ],
            Scenario::Three => vec![StepPlan {
                train: Domain::Combined,
                eval: vec![Domain::Cys, Domain::Urs, Domain::Combined],
            }],
        }
    }
}

impl TryFrom<u8> for Scenario {
    type Error = String;

    fn try_from(v: u8) -> Result<Self, String> {
        match v {
            1 => Ok(Scenario::One),
            2 => Ok(Scenario::Two),
            3 => Ok(Scenario::Three),
            _ => Err(format!("scenario must be 1, 2 or 3, got {v}")),
        }
    }
}

impl From<Scenario> for u8 {
    fn from(s: Scenario) -> u8 {
        s.id()
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.id())
    }
}

impl FromStr for Scenario {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        s.trim().parse::<u8>().map_err(|e| e.to_string())?.try_into()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub warm_epochs: usize,
    pub warm_lr: f64,
    pub finetune_epochs: usize,
    pub finetune_lr: f64,
    /// Parameterized layers left trainable in the fine-tune phase.
    pub last_k: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub folds: usize,
    pub fold_mode: FoldMode,
    /// Independent runs executed concurrently.
    pub jobs: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            warm_epochs: 5,
            warm_lr: 1e-4,
            finetune_epochs: 30,
            finetune_lr: 1e-3,
            last_k: 4,
            batch_size: 16,
            seed: 0,
            folds: 3,
            fold_mode: FoldMode::ByLabel,
            jobs: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        for (name, lr) in [("warm_lr", self.warm_lr), ("finetune_lr", self.finetune_lr)] {
            if !(lr.is_finite() && lr > 0.0) {
                return bad(&format!("{name} must be positive, got {lr}"));
            }
        }
        if self.last_k < 3 {
            return bad("last_k must be at least 3 so the whole head stays trainable");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if self.folds == 0 {
            return bad("folds must be positive");
        }
        if self.jobs == 0 {
            return bad("jobs must be positive");
        }
        Ok(())
    }
}

/// SplitMix64 finalizer; derives independent stream seeds.
pub(crate) fn mix_seed(parts: &[u64]) -> u64 {
    let mut z = 0x243F_6A88_85A3_08D3u64;
    for &p in parts {
        z ^= p;
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^= z >> 31;
    }
    z
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scenario_step_plans() {
        let s1 = Scenario::One.steps();
        assert_eq!((s1[0].train, s1[1].train), (Domain::Cys, Domain::Urs));
        let s2 = Scenario::Two.steps();
        assert_eq!((s2[0].train, s2[1].train), (Domain::Urs, Domain::Cys));
        let s3 = Scenario::Three.steps();
        assert_eq!(s3.len(), 1);
        assert_eq!(s3[0].eval, [Domain::Cys, Domain::Urs, Domain::Combined]);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        for c in [
            TrainConfig {
                warm_lr: 0.0,
                ..Default::default()
            },
            TrainConfig {
                finetune_lr: f64::NAN,
                ..Default::default()
            },
            TrainConfig {
                last_k: 2,
                ..Default::default()
            },
            TrainConfig {
                batch_size: 0,
                ..Default::default()
            },
        ] {
            assert!(c.validate().is_err());
        }
        let zero_epochs = TrainConfig {
            warm_epochs: 0,
            finetune_epochs: 0,
            ..Default::default()
        };
        assert!(zero_epochs.validate().is_ok());
    }

    #[test]
    fn scenario_serde_is_numeric() {
        assert_eq!(serde_json::to_string(&Scenario::Two).unwrap(), "2");
        assert_eq!(serde_json::from_str::<Scenario>("3").unwrap(), Scenario::Three);
        assert!(serde_json::from_str::<Scenario>("4").is_err());
    }
}
