use std::collections::HashSet;

use urocnn::arch::{Backbone, NetworkSpec, ProvenanceTag};
use urocnn::dataset::{generate_synthetic, Composition, LoadedSet, SyntheticOptions};
use urocnn::metrics::summarize;
use urocnn::trainer::{run_matrix, run_scenario, run_step, Domain, Experiment, RunRecord, Scenario, TrainConfig};

fn set(per_cell: usize, seed: u64) -> LoadedSet {
    let m = generate_synthetic(&Composition::uniform(per_cell), 32, seed, &SyntheticOptions::default()).unwrap();
    LoadedSet::load(m, (32, 32)).unwrap()
}

fn spec(backbone: Backbone) -> NetworkSpec {
    NetworkSpec::new(backbone).with_resolution(32, 32).with_scale(0.125)
}

fn quick() -> TrainConfig {
    TrainConfig {
        warm_epochs: 1,
        finetune_epochs: 1,
        batch_size: 8,
        seed: 11,
        ..Default::default()
    }
}

#[test]
fn training_lowers_the_loss_on_separable_data() {
    let data = set(6, 3);
    let config = TrainConfig {
        warm_epochs: 3,
        finetune_epochs: 4,
        batch_size: 8,
        ..Default::default()
    };
    let exp = Experiment::new(&data, config.clone()).unwrap();
    let mut model = exp.start_model(&spec(Backbone::Resnet50)).unwrap();
    let train = exp.folds.train(Domain::Combined, 0).unwrap();
    let out = run_step(&mut model, &data, &train, &config, Domain::Combined, 1, None).unwrap();
    assert!(
        out.final_loss < out.initial_loss,
        "{} -> {}",
        out.initial_loss,
        out.final_loss
    );
    assert_eq!(out.warm_losses.len(), 3);
    assert_eq!(out.finetune_losses.len(), 4);
}

fn two_step_records(data: &LoadedSet, scenario: Scenario) -> Vec<RunRecord> {
    let exp = Experiment::new(data, quick()).unwrap();
    let start = exp.start_model(&spec(Backbone::Vgg16)).unwrap();
    run_scenario(&exp, &start, scenario).unwrap()
}

#[test]
fn two_step_bookkeeping() {
    let data = set(4, 5);
    let records = two_step_records(&data, Scenario::Two);
    assert_eq!(records.len(), 6);
    let ids: Vec<&str> = data.manifest().samples().iter().map(|s| s.id.as_str()).collect();
    for r in &records {
        let train: HashSet<&str> = r.train_ids.iter().map(String::as_str).collect();
        assert!(train.iter().all(|id| ids.contains(id)));
        for e in &r.evals {
            assert!(
                e.scores.iter().all(|s| !train.contains(s.id.as_str())),
                "{} fold {}",
                e.domain,
                r.fold
            );
        }
        let expected = if r.step == 1 {
            vec![ProvenanceTag::Random, ProvenanceTag::Ureteroscopy]
        } else {
            vec![
                ProvenanceTag::Random,
                ProvenanceTag::Ureteroscopy,
                ProvenanceTag::Cystoscopy,
            ]
        };
        assert_eq!(r.provenance.iter().map(|p| p.tag).collect::<Vec<_>>(), expected);
        if r.step == 1 {
            assert!(r.provenance.iter().all(|p| p.tag != ProvenanceTag::Cystoscopy));
        }
    }
    for fold in 0..3 {
        let step = |s| records.iter().find(|r| r.fold == fold && r.step == s).unwrap();
        assert_eq!(step(2).outcome.start_digest, step(1).outcome.end_digest);
    }
}

#[test]
fn same_seed_replays_the_same_loss_traces() {
    let data = set(3, 8);
    let traces = |records: Vec<RunRecord>| {
        records
            .into_iter()
            .map(|r| (r.outcome.warm_losses, r.outcome.finetune_losses, r.outcome.end_digest))
            .collect::<Vec<_>>()
    };
    let a = traces(two_step_records(&data, Scenario::One));
    let b = traces(two_step_records(&data, Scenario::One));
    assert_eq!(a, b);
}

#[test]
fn fold_means_match_an_independent_recount() {
    let data = set(3, 9);
    let exp = Experiment::new(&data, quick()).unwrap();
    let bundle = run_matrix(&exp, &[spec(Backbone::InceptionV3)], &[Scenario::Three]).unwrap();
    assert_eq!(bundle.runs.len(), 3);
    let cells = summarize(&bundle).unwrap();
    assert_eq!(cells.len(), 3);
    for cell in &cells {
        let aucs: Vec<f64> = bundle
            .runs
            .iter()
            .map(|r| r.eval(cell.eval_domain).unwrap().auc)
            .collect();
        assert_eq!(cell.fold_aucs, aucs);
        let mean = aucs.iter().sum::<f64>() / aucs.len() as f64;
        assert!((cell.mean_auc - mean).abs() < 1e-12);
    }
}
