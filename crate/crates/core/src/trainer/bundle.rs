//! On-disk experiment bundle:
//!
//! ```text
//! <dir>/bundle.json                              plan, config and run records
//! <dir>/checkpoints/<arch>_start.ckpt            shared start model
//! <dir>/checkpoints/<arch>_s<n>_fold<f>_step<s>.ckpt
//! ```

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::scenario::{Experiment, RunRecord};
use super::{Scenario, TrainConfig, TrainError};
use crate::arch::{Backbone, NetworkSpec};

pub const BUNDLE_FILE: &str = "bundle.json";
pub const CHECKPOINT_DIR: &str = "checkpoints";
pub const BUNDLE_FORMAT: u32 = 1;

pub(crate) fn start_checkpoint_name(arch: Backbone) -> String {
    format!("{arch}_start.ckpt")
}

pub(crate) fn checkpoint_name(arch: Backbone, scenario: Scenario, fold: usize, step: usize) -> String {
    format!("{arch}_s{scenario}_fold{fold}_step{step}.ckpt")
}

/// Planned cells plus the records of every finished run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentBundle {
    pub format: u32,
    pub config: TrainConfig,
    pub specs: Vec<NetworkSpec>,
    pub scenarios: Vec<Scenario>,
    pub dataset_hash: String,
    pub dataset_size: usize,
    pub runs: Vec<RunRecord>,
}

/// One expected `(arch, scenario, fold, step)` record.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub struct Cell {
    pub arch: Backbone,
    pub scenario: Scenario,
    pub fold: usize,
    pub step: usize,
}

impl std::fmt::Display for Cell {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{}/s{}/fold{}/step{}",
            self.arch, self.scenario, self.fold, self.step
        )
    }
}

impl ExperimentBundle {
    pub(crate) fn plan(exp: &Experiment<'_>, specs: &[NetworkSpec], scenarios: &[Scenario]) -> Self {
        Self {
            format: BUNDLE_FORMAT,
            config: exp.config.clone(),
            specs: specs.to_vec(),
            scenarios: scenarios.to_vec(),
            dataset_hash: exp.set.manifest().content_hash(),
            dataset_size: exp.set.len(),
            runs: Vec::new(),
        }
    }

    pub fn read(dir: &Path) -> Result<Self, TrainError> {
        let path = dir.join(BUNDLE_FILE);
        let text = std::fs::read_to_string(&path).map_err(|source| TrainError::Io {
            path: path.clone(),
            source,
        })?;
        let bundle: Self = serde_json::from_str(&text).map_err(|e| TrainError::Bundle {
            path: path.clone(),
            detail: e.to_string(),
        })?;
        if bundle.format != BUNDLE_FORMAT {
            return Err(TrainError::Bundle {
                path,
                detail: format!("format {} (expected {BUNDLE_FORMAT})", bundle.format),
            });
        }
        Ok(bundle)
    }

    pub fn write(&self, dir: &Path) -> Result<(), TrainError> {
        let path = dir.join(BUNDLE_FILE);
        let mut text = serde_json::to_string_pretty(self).expect("bundle serializes");
        text.push('\n');
        std::fs::write(&path, text).map_err(|source| TrainError::Io { path, source })
    }

    /// Every record the plan calls for, in canonical order.
    pub fn expected_cells(&self) -> Vec<Cell> {
        let mut out = Vec::new();
        for spec in &self.specs {
            for &scenario in &self.scenarios {
                for fold in 0..self.config.folds {
                    for step in 1..=scenario.steps().len() {
                        out.push(Cell {
                            arch: spec.backbone,
                            scenario,
                            fold,
                            step,
                        });
                    }
                }
            }
        }
        out
    }

    pub fn missing_cells(&self) -> Vec<Cell> {
        let have: BTreeSet<Cell> = self
            .runs
            .iter()
            .map(|r| Cell {
                arch: r.arch,
                scenario: r.scenario,
                fold: r.fold,
                step: r.step,
            })
            .collect();
        self.expected_cells()
            .into_iter()
            .filter(|c| !have.contains(c))
            .collect()
    }

    pub fn run(&self, cell: Cell) -> Option<&RunRecord> {
        self.runs
            .iter()
            .find(|r| r.arch == cell.arch && r.scenario == cell.scenario && r.fold == cell.fold && r.step == cell.step)
    }
}
