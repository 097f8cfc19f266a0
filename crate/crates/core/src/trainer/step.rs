use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{mix_seed, Domain, TrainConfig, TrainError};
use crate::arch::{Model, ProvenanceEntry};
use crate::dataset::{Label, LoadedSet};
use crate::nn::{apply_freeze, AdamConfig, AdamState, Network};
use crate::tensor::{Tape, Tensor};

const LOSS_BATCH: usize = 32;
const LOG_CLAMP: f64 = 1e-12;

/// Phase boundary reported to a [`StepObserver`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PhaseEnd {
    /// All layers trained at the warm rate.
    Warm,
    /// Only the last `k` parameterized layers trained.
    Finetune,
}

/// Called with the network state at the end of each phase.
pub type StepObserver<'a> = &'a mut dyn FnMut(PhaseEnd, &Network<f32>);

/// Bookkeeping from one [`run_step`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepOutcome {
    pub train_domain: Domain,
    pub train_size: usize,
    pub train_hash: String,
    pub start_digest: String,
    pub end_digest: String,
    /// Mean minibatch loss per epoch.
    pub warm_losses: Vec<f64>,
    pub finetune_losses: Vec<f64>,
    /// Inference-mode loss over the training samples before and after.
    pub initial_loss: f64,
    pub final_loss: f64,
    pub frozen_layers: Vec<String>,
    /// Frozen layers whose state changed during the fine-tune phase.
    pub freeze_violations: Vec<String>,
}

/// Trains `model` on `train` samples of `set`: a warm phase with every layer
/// trainable, then a fine-tune phase with all but the last `k` parameterized
/// layers frozen. Each phase starts from a fresh optimizer. On success the
/// model's lineage gains one entry for `domain`.
pub fn run_step(
    model: &mut Model<f32>,
    set: &LoadedSet,
    train: &[usize],
    config: &TrainConfig,
    domain: Domain,
    seed: u64,
    mut observer: Option<StepObserver<'_>>,
) -> Result<StepOutcome, TrainError> {
    config.validate()?;
    if train.is_empty() {
        return Err(TrainError::EmptyTrainingSet);
    }
    let lesions = train.iter().filter(|&&i| set.label(i) == Label::Lesion).count();
    if lesions == 0 || lesions == train.len() {
        let only = if lesions == 0 { Label::NoLesion } else { Label::Lesion };
        return Err(TrainError::SingleClass(train.len(), only.as_str()));
    }
    if set.resolution() != model.spec.input_resolution {
        return Err(TrainError::SpecMismatch {
            expected: model.spec.input_resolution,
            found: set.resolution(),
        });
    }

    let train_hash = set.manifest().subset(train).content_hash();
    let start_digest = model.state_digest();
    let initial_loss = dataset_loss(&model.network, set, train)?;
    let net = &mut model.network;

    net.unfreeze_all();
    let warm_losses = run_phase(
        net,
        set,
        train,
        config,
        config.warm_epochs,
        config.warm_lr,
        mix_seed(&[seed, 1]),
    )?;
    if let Some(obs) = observer.as_mut() {
        obs(PhaseEnd::Warm, net);
    }

    let mask = apply_freeze(net, config.last_k)?;
    net.bind_freeze_mask(&mask)?;
    let frozen_layers: Vec<String> = mask.frozen_layers().map(str::to_string).collect();
    let snapshot: Vec<_> = frozen_layers
        .iter()
        .map(|n| net.layer(n).expect("mask names network layers").named_state())
        .collect();
    let finetune_result = run_phase(
        net,
        set,
        train,
        config,
        config.finetune_epochs,
        config.finetune_lr,
        mix_seed(&[seed, 2]),
    );
    if finetune_result.is_ok() {
        if let Some(obs) = observer.as_mut() {
            obs(PhaseEnd::Finetune, net);
        }
    }
    net.unfreeze_all();
    let finetune_losses = finetune_result?;

    let freeze_violations = frozen_layers
        .iter()
        .zip(&snapshot)
        .filter(|(name, before)| !state_eq(before, &net.layer(name).expect("layer").named_state()))
        .map(|(name, _)| name.clone())
        .collect();

    let final_loss = dataset_loss(&model.network, set, train)?;
    model.push_provenance(ProvenanceEntry::new(domain.tag()).with_dataset_hash(train_hash.clone()));
    Ok(StepOutcome {
        train_domain: domain,
        train_size: train.len(),
        train_hash,
        start_digest,
        end_digest: model.state_digest(),
        warm_losses,
        finetune_losses,
        initial_loss,
        final_loss,
        frozen_layers,
        freeze_violations,
    })
}

fn run_phase(
    net: &mut Network<f32>,
    set: &LoadedSet,
    train: &[usize],
    config: &TrainConfig,
    epochs: usize,
    lr: f64,
    seed: u64,
) -> Result<Vec<f64>, TrainError> {
    let mut adam = AdamState::new(AdamConfig::with_lr(lr));
    let mut tape = Tape::new();
    let mut order = train.to_vec();
    let mut losses = Vec::with_capacity(epochs);
    for epoch in 0..epochs {
        order.copy_from_slice(train);
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix_seed(&[seed, epoch as u64])));
        let (mut total, mut batches) = (0.0, 0usize);
        for chunk in order.chunks(config.batch_size) {
            tape.reset();
            let x = tape.leaf(set.batch(chunk, None), false);
            let fwd = net.forward_train(&mut tape, x)?;
            let labels: Tensor<f32> = set.labels(chunk);
            let loss = tape
                .cross_entropy(fwd.output(), &labels)
                .map_err(crate::nn::NnError::from)?;
            total += tape.value(loss).data()[0] as f64;
            batches += 1;
            tape.backward(loss).map_err(crate::nn::NnError::from)?;
            let grads = net.take_grads(&mut tape, &fwd);
            net.adam_step(&mut adam, &grads)?;
        }
        losses.push(total / batches as f64);
    }
    Ok(losses)
}

/// Mean cross-entropy of `indices` in inference mode.
pub(crate) fn dataset_loss(net: &Network<f32>, set: &LoadedSet, indices: &[usize]) -> Result<f64, TrainError> {
    let mut total = 0.0;
    for chunk in indices.chunks(LOSS_BATCH) {
        let probs = net.predict(set.batch(chunk, None))?;
        for (row, &i) in chunk.iter().enumerate() {
            let p = probs.data()[row * 2 + set.label(i).class_index()] as f64;
            total -= p.max(LOG_CLAMP).ln();
        }
    }
    Ok(total / indices.len() as f64)
}

fn state_eq(a: &[(String, Tensor<f32>)], b: &[(String, Tensor<f32>)]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.0 == y.0 && x.1.bitwise_eq(&y.1))
}
