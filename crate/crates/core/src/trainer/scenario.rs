use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::bundle::{checkpoint_name, start_checkpoint_name, ExperimentBundle, CHECKPOINT_DIR};
use super::step::{run_step, PhaseEnd, StepOutcome};
use super::{mix_seed, Domain, Scenario, TrainConfig, TrainError};
use crate::arch::{Backbone, Model, NetworkSpec, ProvenanceEntry};
use crate::dataset::{split_folds, LoadedSet, Procedure};
use crate::metrics::{evaluate, roc_curve, ScoredSample};
use crate::nn::Network;

/// Identifies the run an observer callback belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct RunContext {
    pub arch: Backbone,
    pub scenario: Scenario,
    pub fold: usize,
    /// 1-based.
    pub step: usize,
    pub domain: Domain,
}

/// Shared phase-end hook; must tolerate calls from several threads.
pub type Observer<'a> = dyn Fn(&RunContext, PhaseEnd, &Network<f32>) + Sync + 'a;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub domain: Domain,
    pub auc: f64,
    pub scores: Vec<ScoredSample>,
}

/// One (architecture, scenario, fold, step) training run and its evaluations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub arch: Backbone,
    pub scenario: Scenario,
    pub fold: usize,
    pub step: usize,
    /// Paths relative to the bundle directory.
    pub start_checkpoint: Option<String>,
    pub end_checkpoint: Option<String>,
    pub provenance: Vec<ProvenanceEntry>,
    pub train_ids: Vec<String>,
    #[serde(flatten)]
    pub outcome: StepOutcome,
    pub evals: Vec<EvalRecord>,
}

impl RunRecord {
    pub fn eval(&self, domain: Domain) -> Option<&EvalRecord> {
        self.evals.iter().find(|e| e.domain == domain)
    }
}

/// Per-procedure k-fold splits over one loaded set, as global indices. The
/// combined domain uses the union of the procedure folds with the same index.
#[derive(Clone, Debug, PartialEq)]
pub struct DomainFolds {
    k: usize,
    cys: Option<Vec<Vec<usize>>>,
    urs: Option<Vec<Vec<usize>>>,
}

impl DomainFolds {
    pub fn split(set: &LoadedSet, config: &TrainConfig) -> Result<Self, TrainError> {
        let per = |p: Procedure| -> Result<Option<Vec<Vec<usize>>>, TrainError> {
            let global: Vec<usize> = (0..set.len())
                .filter(|&i| set.manifest().samples()[i].procedure == p)
                .collect();
            if global.is_empty() {
                return Ok(None);
            }
            let sub = set.manifest().subset(&global);
            let split = split_folds(
                &sub,
                config.folds,
                config.fold_mode,
                mix_seed(&[config.seed, 0xF01D, p.index() as u64]),
            )?;
            Ok(Some(
                (0..config.folds)
                    .map(|f| split.test_indices(f).into_iter().map(|i| global[i]).collect())
                    .collect(),
            ))
        };
        Ok(Self {
            k: config.folds,
            cys: per(Procedure::Cys)?,
            urs: per(Procedure::Urs)?,
        })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn has(&self, domain: Domain) -> bool {
        domain.procedures().iter().all(|&p| self.folds(p).is_some())
    }

    fn folds(&self, p: Procedure) -> Option<&Vec<Vec<usize>>> {
        match p {
            Procedure::Cys => self.cys.as_ref(),
            Procedure::Urs => self.urs.as_ref(),
        }
    }

    fn collect(&self, domain: Domain, keep: impl Fn(usize) -> bool) -> Result<Vec<usize>, TrainError> {
        let mut out = Vec::new();
        for &p in domain.procedures() {
            let folds = self.folds(p).ok_or(TrainError::MissingDomain(domain))?;
            for (f, idx) in folds.iter().enumerate() {
                if keep(f) {
                    out.extend_from_slice(idx);
                }
            }
        }
        out.sort_unstable();
        Ok(out)
    }

    /// Held-out samples of `domain` for `fold`.
    pub fn test(&self, domain: Domain, fold: usize) -> Result<Vec<usize>, TrainError> {
        self.collect(domain, |f| f == fold)
    }

    /// Training samples of `domain` for `fold`: every other fold.
    pub fn train(&self, domain: Domain, fold: usize) -> Result<Vec<usize>, TrainError> {
        self.collect(domain, |f| f != fold)
    }
}

/// Inputs shared by every run of an experiment.
pub struct Experiment<'a> {
    pub set: &'a LoadedSet,
    pub folds: DomainFolds,
    pub config: TrainConfig,
    /// Bundle directory; checkpoints go to its `checkpoints/` subdirectory.
    pub out_dir: Option<PathBuf>,
    pub observer: Option<&'a Observer<'a>>,
    /// Called after each finished run, possibly from worker threads.
    pub progress: Option<&'a (dyn Fn(&RunRecord) + Sync)>,
}

impl<'a> Experiment<'a> {
    pub fn new(set: &'a LoadedSet, config: TrainConfig) -> Result<Self, TrainError> {
        config.validate()?;
        Ok(Self {
            set,
            folds: DomainFolds::split(set, &config)?,
            config,
            out_dir: None,
            observer: None,
            progress: None,
        })
    }

    pub fn with_out_dir(mut self, dir: impl Into<PathBuf>) -> Self {
        self.out_dir = Some(dir.into());
        self
    }

    pub fn with_observer(mut self, observer: &'a Observer<'a>) -> Self {
        self.observer = Some(observer);
        self
    }

    pub fn with_progress(mut self, progress: &'a (dyn Fn(&RunRecord) + Sync)) -> Self {
        self.progress = Some(progress);
        self
    }

    /// Randomly initialized start model for `spec`, seeded from the config.
    pub fn start_model(&self, spec: &NetworkSpec) -> Result<Model<f32>, TrainError> {
        let seed = mix_seed(&[self.config.seed, 0x1417, backbone_id(spec.backbone)]);
        Ok(Model::random(spec.clone(), seed)?)
    }

    fn checkpoint_path(&self, name: &str) -> Option<(String, PathBuf)> {
        self.out_dir.as_ref().map(|d| {
            let rel = format!("{CHECKPOINT_DIR}/{name}");
            let abs = d.join(&rel);
            (rel, abs)
        })
    }

    fn write_start(&self, start: &Model<f32>) -> Result<Option<String>, TrainError> {
        match self.checkpoint_path(&start_checkpoint_name(start.spec.backbone)) {
            None => Ok(None),
            Some((rel, abs)) => {
                create_dir(abs.parent().expect("checkpoint has a parent"))?;
                start.write(&abs)?;
                Ok(Some(rel))
            }
        }
    }

    /// Every step of `scenario` for one fold, starting from `start`.
    fn run_fold(
        &self,
        start: &Model<f32>,
        start_path: Option<String>,
        scenario: Scenario,
        fold: usize,
    ) -> Result<Vec<RunRecord>, TrainError> {
        let arch = start.spec.backbone;
        let mut model = start.clone();
        let mut prev = start_path;
        let mut records = Vec::new();
        for (s, plan) in scenario.steps().into_iter().enumerate() {
            let step = s + 1;
            let ctx = RunContext {
                arch,
                scenario,
                fold,
                step,
                domain: plan.train,
            };
            let train = self.folds.train(plan.train, fold)?;
            let seed = mix_seed(&[
                self.config.seed,
                backbone_id(arch),
                scenario.id() as u64,
                fold as u64,
                step as u64,
            ]);
            let mut hook = |phase: PhaseEnd, net: &Network<f32>| {
                if let Some(obs) = self.observer {
                    obs(&ctx, phase, net);
                }
            };
            let outcome = run_step(
                &mut model,
                self.set,
                &train,
                &self.config,
                plan.train,
                seed,
                Some(&mut hook),
            )?;
            let end = match self.checkpoint_path(&checkpoint_name(arch, scenario, fold, step)) {
                None => None,
                Some((rel, abs)) => {
                    model.write(&abs)?;
                    Some(rel)
                }
            };
            let mut evals = Vec::with_capacity(plan.eval.len());
            for domain in plan.eval {
                let test = self.folds.test(domain, fold)?;
                let scores = evaluate(&model.network, self.set, &test, fold, None)?;
                let auc = roc_curve(&scores)?.auc;
                evals.push(EvalRecord { domain, auc, scores });
            }
            let record = RunRecord {
                arch,
                scenario,
                fold,
                step,
                start_checkpoint: prev.take(),
                end_checkpoint: end.clone(),
                provenance: model.provenance().to_vec(),
                train_ids: train
                    .iter()
                    .map(|&i| self.set.manifest().samples()[i].id.clone())
                    .collect(),
                outcome,
                evals,
            };
            if let Some(p) = self.progress {
                p(&record);
            }
            records.push(record);
            prev = end;
        }
        Ok(records)
    }

    fn check_domains(&self, scenario: Scenario) -> Result<(), TrainError> {
        for plan in scenario.steps() {
            for d in std::iter::once(plan.train).chain(plan.eval) {
                if !self.folds.has(d) {
                    return Err(TrainError::MissingDomain(d));
                }
            }
        }
        Ok(())
    }

    /// Runs `(start index, scenario, fold)` cells, `config.jobs` at a time,
    /// returning records in cell order.
    fn execute(
        &self,
        starts: &[(Model<f32>, Option<String>)],
        cells: &[(usize, Scenario, usize)],
    ) -> Result<Vec<RunRecord>, TrainError> {
        let job = |&(a, scenario, fold): &(usize, Scenario, usize)| {
            self.run_fold(&starts[a].0, starts[a].1.clone(), scenario, fold)
        };
        let results: Vec<Result<Vec<RunRecord>, TrainError>> = if self.config.jobs <= 1 {
            cells.iter().map(job).collect()
        } else {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(self.config.jobs)
                .build()
                .map_err(|e| TrainError::Config(format!("thread pool: {e}")))?;
            pool.install(|| cells.par_iter().map(job).collect())
        };
        let mut out = Vec::new();
        for r in results {
            out.extend(r?);
        }
        Ok(out)
    }
}

fn backbone_id(b: Backbone) -> u64 {
    Backbone::ALL.iter().position(|&x| x == b).expect("listed backbone") as u64
}

fn create_dir(dir: &Path) -> Result<(), TrainError> {
    std::fs::create_dir_all(dir).map_err(|source| TrainError::Io {
        path: dir.to_path_buf(),
        source,
    })
}

/// All folds of one scenario from a shared start model. Fold models are
/// independent; a two-step scenario's second step continues from the first.
pub fn run_scenario(
    exp: &Experiment<'_>,
    start: &Model<f32>,
    scenario: Scenario,
) -> Result<Vec<RunRecord>, TrainError> {
    exp.check_domains(scenario)?;
    let path = exp.write_start(start)?;
    let starts = [(start.clone(), path)];
    let cells: Vec<_> = (0..exp.folds.k()).map(|f| (0, scenario, f)).collect();
    exp.execute(&starts, &cells)
}

/// Every (architecture × scenario × fold) run from freshly initialized start
/// models. With an output directory the bundle is written there, first as an
/// empty plan and again when complete.
pub fn run_matrix(
    exp: &Experiment<'_>,
    specs: &[NetworkSpec],
    scenarios: &[Scenario],
) -> Result<ExperimentBundle, TrainError> {
    let starts = specs
        .iter()
        .map(|s| exp.start_model(s))
        .collect::<Result<Vec<_>, _>>()?;
    run_matrix_from(exp, &starts, scenarios)
}

/// [`run_matrix`] with caller-supplied start models, one per architecture.
pub fn run_matrix_from(
    exp: &Experiment<'_>,
    starts: &[Model<f32>],
    scenarios: &[Scenario],
) -> Result<ExperimentBundle, TrainError> {
    for &s in scenarios {
        exp.check_domains(s)?;
    }
    let specs: Vec<NetworkSpec> = starts.iter().map(|m| m.spec.clone()).collect();
    let mut bundle = ExperimentBundle::plan(exp, &specs, scenarios);
    if let Some(dir) = &exp.out_dir {
        create_dir(dir)?;
        bundle.write(dir)?;
    }
    let mut with_paths = Vec::with_capacity(starts.len());
    for m in starts {
        let path = exp.write_start(m)?;
        with_paths.push((m.clone(), path));
    }
    let cells: Vec<_> = (0..starts.len())
        .flat_map(|a| {
            scenarios
                .iter()
                .flat_map(move |&s| (0..exp.folds.k()).map(move |f| (a, s, f)))
        })
        .collect();
    bundle.runs = exp.execute(&with_paths, &cells)?;
    if let Some(dir) = &exp.out_dir {
        bundle.write(dir)?;
    }
    Ok(bundle)
}

#[cfg(test)]
mod tests {
    use std::collections::HashSet;

    use super::*;
    use crate::dataset::{generate_synthetic, Composition, SyntheticOptions};

    fn set(per_cell: usize) -> LoadedSet {
        let m = generate_synthetic(&Composition::uniform(per_cell), 32, 2, &SyntheticOptions::default()).unwrap();
        LoadedSet::load(m, (32, 32)).unwrap()
    }

    #[test]
    fn folds_partition_each_domain() {
        let s = set(6);
        let folds = DomainFolds::split(&s, &TrainConfig::default()).unwrap();
        for d in Domain::ALL {
            let mut seen = HashSet::new();
            for f in 0..3 {
                let test = folds.test(d, f).unwrap();
                let train = folds.train(d, f).unwrap();
                assert!(test.iter().all(|i| !train.contains(i)));
                assert_eq!(test.len() + train.len(), if d == Domain::Combined { 48 } else { 24 });
                seen.extend(test);
            }
            assert_eq!(seen.len(), if d == Domain::Combined { 48 } else { 24 });
        }
    }

    #[test]
    fn missing_domain_is_reported() {
        let s = set(3);
        let cys: Vec<usize> = (0..s.len())
            .filter(|&i| s.manifest().samples()[i].procedure == Procedure::Cys)
            .collect();
        let only = LoadedSet::load(s.manifest().subset(&cys), (32, 32)).unwrap();
        let exp = Experiment::new(&only, TrainConfig::default()).unwrap();
        let start = exp
            .start_model(&NetworkSpec::desk(Backbone::Vgg16).with_resolution(32, 32))
            .unwrap();
        assert!(matches!(
            run_scenario(&exp, &start, Scenario::One),
            Err(TrainError::MissingDomain(Domain::Urs))
        ));
    }
}
