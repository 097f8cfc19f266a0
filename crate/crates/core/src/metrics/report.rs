//! Report directory written from an experiment bundle:
//!
//! - `report.csv`: `arch,scenario,step,train_domain,eval_domain,fold,auc`, one
//!   row per fold plus `mean` (average of fold AUCs) and `pooled` (AUC of all
//!   fold predictions together)
//! - `summary.csv`: mean and pooled AUC per cell with reference AUC values
//! - `cross_domain.csv`: step-1 train-domain × eval-domain matrix
//! - `step_delta.csv`: step-1 → step-2 change for two-step scenarios
//! - `roc_<panel>.svg` / `roc_<panel>.csv`: same-domain ROC curves per
//!   architecture for the `cys`, `urs` and `combined` panels
//! - `status.txt`: `complete` with the run count, or `no runs`

use std::fmt::Write;
use std::path::{Path, PathBuf};

use super::svg::roc_svg;
use super::{roc_curve, MetricsError, RocCurve, ScoredSample};
use crate::arch::Backbone;
use crate::trainer::{Domain, ExperimentBundle, RunRecord, Scenario};

/// Reference AUC for one report cell. Two values separated by `|` when the
/// source quotes the figure inconsistently.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ReferenceAuc {
    pub arch: Backbone,
    pub scenario: u8,
    pub step: usize,
    pub eval: Domain,
    pub value: &'static str,
}

const fn reference(arch: Backbone, scenario: u8, step: usize, eval: Domain, value: &'static str) -> ReferenceAuc {
    ReferenceAuc {
        arch,
        scenario,
        step,
        eval,
        value,
    }
}

pub const REFERENCE_AUCS: [ReferenceAuc; 9] = [
    reference(Backbone::Vgg16, 1, 1, Domain::Cys, "0.846"),
    reference(Backbone::Resnet50, 2, 1, Domain::Urs, "0.987"),
    reference(Backbone::Resnet50, 3, 1, Domain::Combined, "0.938|0.940"),
    reference(Backbone::InceptionV3, 1, 1, Domain::Urs, "0.895"),
    reference(Backbone::InceptionV3, 2, 1, Domain::Cys, "0.783"),
    reference(Backbone::Vgg16, 2, 1, Domain::Cys, "0.691"),
    reference(Backbone::Vgg16, 2, 2, Domain::Cys, "0.834"),
    reference(Backbone::Resnet50, 1, 1, Domain::Urs, "0.897"),
    reference(Backbone::Resnet50, 1, 2, Domain::Urs, "0.979"),
];

pub fn reference_auc(arch: Backbone, scenario: Scenario, step: usize, eval: Domain) -> Option<&'static str> {
    REFERENCE_AUCS
        .iter()
        .find(|r| r.arch == arch && r.scenario == scenario.id() && r.step == step && r.eval == eval)
        .map(|r| r.value)
}

/// Aggregated AUCs of one (arch, scenario, step, eval domain) cell.
#[derive(Clone, Debug, PartialEq)]
pub struct CellSummary {
    pub arch: Backbone,
    pub scenario: Scenario,
    pub step: usize,
    pub train_domain: Domain,
    pub eval_domain: Domain,
    /// Indexed by fold.
    pub fold_aucs: Vec<f64>,
    pub mean_auc: f64,
    pub pooled: RocCurve,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReportSummary {
    pub cells: Vec<CellSummary>,
    pub files: Vec<PathBuf>,
}

impl ReportSummary {
    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    pub fn cell(&self, arch: Backbone, scenario: Scenario, step: usize, eval: Domain) -> Option<&CellSummary> {
        self.cells
            .iter()
            .find(|c| c.arch == arch && c.scenario == scenario && c.step == step && c.eval_domain == eval)
    }
}

/// Aggregates `bundle` per cell without writing anything.
pub fn summarize(bundle: &ExperimentBundle) -> Result<Vec<CellSummary>, MetricsError> {
    let missing = bundle.missing_cells();
    if !missing.is_empty() {
        return Err(MetricsError::IncompleteBundle(
            missing.iter().map(ToString::to_string).collect(),
        ));
    }
    let mut cells = Vec::new();
    for spec in &bundle.specs {
        for &scenario in &bundle.scenarios {
            for (s, plan) in scenario.steps().into_iter().enumerate() {
                let step = s + 1;
                let runs: Vec<&RunRecord> = (0..bundle.config.folds)
                    .map(|fold| {
                        bundle
                            .runs
                            .iter()
                            .find(|r| {
                                r.arch == spec.backbone && r.scenario == scenario && r.fold == fold && r.step == step
                            })
                            .expect("bundle is complete")
                    })
                    .collect();
                for eval in plan.eval {
                    let mut fold_aucs = Vec::with_capacity(runs.len());
                    let mut pooled: Vec<ScoredSample> = Vec::new();
                    for r in &runs {
                        let e = r.eval(eval).ok_or_else(|| {
                            MetricsError::IncompleteBundle(vec![format!(
                                "{}/s{}/fold{}/step{}/{eval}",
                                r.arch, r.scenario, r.fold, r.step
                            )])
                        })?;
                        fold_aucs.push(e.auc);
                        pooled.extend(e.scores.iter().cloned());
                    }
                    let mean_auc = fold_aucs.iter().sum::<f64>() / fold_aucs.len() as f64;
                    cells.push(CellSummary {
                        arch: spec.backbone,
                        scenario,
                        step,
                        train_domain: plan.train,
                        eval_domain: eval,
                        fold_aucs,
                        mean_auc,
                        pooled: roc_curve(&pooled)?,
                    });
                }
            }
        }
    }
    Ok(cells)
}

/// Writes the report files for `bundle` into `out_dir`.
pub fn report(bundle: &ExperimentBundle, out_dir: &Path) -> Result<ReportSummary, MetricsError> {
    let cells = summarize(bundle)?;
    std::fs::create_dir_all(out_dir).map_err(|source| MetricsError::Io {
        path: out_dir.to_path_buf(),
        source,
    })?;
    let mut files = Vec::new();
    let mut put = |name: &str, text: String| -> Result<(), MetricsError> {
        let path = out_dir.join(name);
        std::fs::write(&path, text).map_err(|source| MetricsError::Io {
            path: path.clone(),
            source,
        })?;
        files.push(path);
        Ok(())
    };

    let mut csv = String::from("arch,scenario,step,train_domain,eval_domain,fold,auc\n");
    for c in &cells {
        let key = format!(
            "{},{},{},{},{}",
            c.arch, c.scenario, c.step, c.train_domain, c.eval_domain
        );
        for (f, auc) in c.fold_aucs.iter().enumerate() {
            let _ = writeln!(csv, "{key},{f},{auc:.6}");
        }
        let _ = writeln!(csv, "{key},mean,{:.6}", c.mean_auc);
        let _ = writeln!(csv, "{key},pooled,{:.6}", c.pooled.auc);
    }
    put("report.csv", csv)?;

    let mut summary = String::from("arch,scenario,step,train_domain,eval_domain,mean_auc,pooled_auc,reference_auc\n");
    for c in &cells {
        let _ = writeln!(
            summary,
            "{},{},{},{},{},{:.6},{:.6},{}",
            c.arch,
            c.scenario,
            c.step,
            c.train_domain,
            c.eval_domain,
            c.mean_auc,
            c.pooled.auc,
            reference_auc(c.arch, c.scenario, c.step, c.eval_domain).unwrap_or("")
        );
    }
    put("summary.csv", summary)?;

    let mut cross = String::from("arch,scenario,train_domain,eval_domain,same_domain,pooled_auc,mean_auc\n");
    for c in cells.iter().filter(|c| c.step == 1) {
        let same = c.train_domain == c.eval_domain;
        let _ = writeln!(
            cross,
            "{},{},{},{},{same},{:.6},{:.6}",
            c.arch, c.scenario, c.train_domain, c.eval_domain, c.pooled.auc, c.mean_auc
        );
    }
    put("cross_domain.csv", cross)?;

    let mut delta = String::from("arch,scenario,eval_domain,step1_auc,step2_auc,delta\n");
    for c2 in cells.iter().filter(|c| c.step == 2) {
        if let Some(c1) = cells
            .iter()
            .find(|c| c.step == 1 && c.arch == c2.arch && c.scenario == c2.scenario && c.eval_domain == c2.eval_domain)
        {
            let _ = writeln!(
                delta,
                "{},{},{},{:.6},{:.6},{:.6}",
                c2.arch,
                c2.scenario,
                c2.eval_domain,
                c1.pooled.auc,
                c2.pooled.auc,
                c2.pooled.auc - c1.pooled.auc
            );
        }
    }
    put("step_delta.csv", delta)?;

    for panel in Domain::ALL {
        let chosen = panel_cells(&cells, panel);
        if chosen.is_empty() {
            continue;
        }
        let mut points = String::from("arch,scenario,step,curve,threshold,fpr,tpr\n");
        for c in &chosen {
            let mut curves = vec![("pooled".to_string(), c.pooled.clone())];
            for (fold, samples) in fold_scores(bundle, c) {
                curves.push((format!("fold{fold}"), roc_curve(&samples)?));
            }
            for (name, roc) in &curves {
                for p in &roc.points {
                    let _ = writeln!(
                        points,
                        "{},{},{},{name},{},{:.6},{:.6}",
                        c.arch, c.scenario, c.step, p.threshold, p.fpr, p.tpr
                    );
                }
            }
        }
        put(&format!("roc_{panel}.csv"), points)?;
        let labelled: Vec<(String, &RocCurve)> = chosen.iter().map(|c| (c.arch.to_string(), &c.pooled)).collect();
        let title = format!("{} test data, same-domain training", panel.as_str().to_uppercase());
        put(&format!("roc_{panel}.svg"), roc_svg(&title, &labelled))?;
    }

    let status = if cells.is_empty() {
        "no runs\n".to_string()
    } else {
        format!("complete: {} runs\n", bundle.runs.len())
    };
    put("status.txt", status)?;
    Ok(ReportSummary { cells, files })
}

/// For each architecture, the first step-1 cell trained and tested on
/// `panel`; the combined panel comes from single-step training.
fn panel_cells(cells: &[CellSummary], panel: Domain) -> Vec<&CellSummary> {
    let mut out: Vec<&CellSummary> = Vec::new();
    for c in cells {
        if c.step == 1 && c.train_domain == panel && c.eval_domain == panel && !out.iter().any(|o| o.arch == c.arch) {
            out.push(c);
        }
    }
    out
}

fn fold_scores(bundle: &ExperimentBundle, cell: &CellSummary) -> Vec<(usize, Vec<ScoredSample>)> {
    let mut runs: Vec<&RunRecord> = bundle
        .runs
        .iter()
        .filter(|r| r.arch == cell.arch && r.scenario == cell.scenario && r.step == cell.step)
        .collect();
    runs.sort_by_key(|r| r.fold);
    runs.iter()
        .filter_map(|r| r.eval(cell.eval_domain).map(|e| (r.fold, e.scores.clone())))
        .collect()
}
