//! Shared helpers for the integration and acceptance targets.
#![allow(dead_code)]

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use urocnn::dataset::{DatasetManifest, FoldSplit, Image, ImageSource, Label, Modality, Procedure, Sample};
use urocnn::tensor::{
    finite_difference_check, BatchNormConfig, BatchNormMode, GradCheckReport, RunningStats, Tape, Tensor, TensorError,
    Var,
};

pub const FD_EPS: f64 = 1e-5;
pub const FD_TOL: f64 = 1e-4;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn uniform(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::random_uniform(shape, -1.0, 1.0, rng)
}

/// Random values whose pairwise gaps are at least 0.01, so a finite
/// difference step never changes which element of a window is largest.
fn separated(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let mut ranks: Vec<usize> = (0..n).collect();
    ranks.shuffle(rng);
    let data = ranks
        .iter()
        .map(|&r| r as f64 * 0.02 - n as f64 * 0.01 + rng.random::<f64>() * 0.005)
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Σ w ⊙ x with fixed random weights: a scalar whose gradient reaches every
/// output element with a different coefficient.
fn project(tape: &mut Tape<f64>, out: Var, weights: &Tensor<f64>) -> Result<Var, TensorError> {
    let w = tape.leaf(weights.clone(), false);
    let prod = tape.mul(out, w)?;
    tape.sum(prod)
}

fn probe_weights(tape_shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    uniform(tape_shape, rng)
}

fn one_hot(n: usize, g: usize, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let mut data = vec![0.0; n * g];
    for row in 0..n {
        data[row * g + rng.random_range(0..g)] = 1.0;
    }
    Tensor::new(vec![n, g], data).unwrap()
}

pub fn conv2d_case(seed: u64) -> GradCheckReport {
    let mut r = rng(seed);
    let stride = r.random_range(1..=2);
    let padding = r.random_range(0..=1);
    let x = uniform(&[2, 3, 8, 8], &mut r);
    let k = uniform(&[4, 3, 3, 3], &mut r);
    let b = uniform(&[4], &mut r);
    let side = (8 + 2 * padding - 3) / stride + 1;
    let w = probe_weights(&[2, 4, side, side], &mut r);
    finite_difference_check(
        |t, v| {
            let y = t.conv2d(v[0], v[1], Some(v[2]), stride, padding)?;
            project(t, y, &w)
        },
        &[x, k, b],
        FD_EPS,
        FD_TOL,
    )
    .unwrap()
}

pub fn dense_case(seed: u64) -> GradCheckReport {
    let mut r = rng(seed);
    let (n, f, g) = (r.random_range(1..=4), r.random_range(2..=7), r.random_range(1..=5));
    let x = uniform(&[n, f], &mut r);
    let wt = uniform(&[f, g], &mut r);
    let b = uniform(&[g], &mut r);
    let w = probe_weights(&[n, g], &mut r);
    finite_difference_check(
        |t, v| {
            let y = t.dense(v[0], v[1], Some(v[2]))?;
            project(t, y, &w)
        },
        &[x, wt, b],
        FD_EPS,
        FD_TOL,
    )
    .unwrap()
}

/// Batch norm in both modes: batch statistics (train) and fixed running
/// statistics (eval).
pub fn batch_norm_case(seed: u64) -> GradCheckReport {
    let mut r = rng(seed);
    let mode = if seed.is_multiple_of(2) {
        BatchNormMode::Train
    } else {
        BatchNormMode::Eval
    };
    let c = r.random_range(1..=3);
    let shape = if r.random_bool(0.5) {
        vec![3, c, 4, 4]
    } else {
        vec![5, c]
    };
    let x = uniform(&shape, &mut r);
    let gamma = Tensor::random_uniform(&[c], 0.5, 1.5, &mut r);
    let beta = uniform(&[c], &mut r);
    let stats = RunningStats {
        mean: (0..c).map(|_| r.random_range(-0.5..0.5)).collect(),
        var: (0..c).map(|_| r.random_range(0.5..2.0)).collect(),
    };
    let w = probe_weights(&shape, &mut r);
    finite_difference_check(
        |t, v| {
            let (y, _) = t.batch_norm(v[0], v[1], v[2], &stats, mode, BatchNormConfig::default())?;
            project(t, y, &w)
        },
        &[x, gamma, beta],
        FD_EPS,
        FD_TOL,
    )
    .unwrap()
}

/// conv → relu → flatten → dense → softmax → cross-entropy, checked with
/// respect to the input and every parameter.
pub fn cross_entropy_case(seed: u64) -> GradCheckReport {
    let mut r = rng(seed);
    let n = 3;
    let x = uniform(&[n, 2, 5, 5], &mut r);
    let k = uniform(&[3, 2, 3, 3], &mut r).map(|v| v * 0.5);
    let kb = uniform(&[3], &mut r);
    let wt = uniform(&[27, 2], &mut r).map(|v| v * 0.3);
    let b = uniform(&[2], &mut r);
    let labels = one_hot(n, 2, &mut r);
    finite_difference_check(
        |t, v| {
            let y = t.conv2d(v[0], v[1], Some(v[2]), 1, 0)?;
            let y = t.relu(y)?;
            let y = t.flatten(y)?;
            let y = t.dense(y, v[3], Some(v[4]))?;
            let p = t.softmax(y)?;
            t.cross_entropy(p, &labels)
        },
        &[x, k, kb, wt, b],
        FD_EPS,
        FD_TOL,
    )
    .unwrap()
}

pub fn max_pool_case(seed: u64) -> GradCheckReport {
    let mut r = rng(seed);
    let x = separated(&[2, 2, 6, 6], &mut r);
    let w = probe_weights(&[2, 2, 3, 3], &mut r);
    finite_difference_check(
        |t, v| {
            let y = t.max_pool2d(v[0], 2, 2, 0)?;
            project(t, y, &w)
        },
        &[x],
        FD_EPS,
        FD_TOL,
    )
    .unwrap()
}

pub fn avg_pool_case(seed: u64) -> GradCheckReport {
    let mut r = rng(seed);
    let x = uniform(&[2, 2, 5, 5], &mut r);
    let w = probe_weights(&[2, 2, 5, 5], &mut r);
    let wg = probe_weights(&[2, 2], &mut r);
    finite_difference_check(
        |t, v| {
            let a = t.avg_pool2d(v[0], 3, 1, 1)?;
            let a = project(t, a, &w)?;
            let g = t.global_avg_pool(v[0])?;
            let g = project(t, g, &wg)?;
            t.add(a, g)
        },
        &[x],
        FD_EPS,
        FD_TOL,
    )
    .unwrap()
}

/// True when the index sets are disjoint and together cover `0..n`.
pub fn is_partition(folds: &[Vec<usize>], n: usize) -> bool {
    let mut all: Vec<usize> = folds.iter().flatten().copied().collect();
    all.sort_unstable();
    all == (0..n).collect::<Vec<_>>()
}

/// P(s⁺ > s⁻) + ½ P(s⁺ = s⁻) by enumerating every positive/negative pair.
pub fn pairwise_auc(scored: &[(f64, bool)]) -> f64 {
    let pos: Vec<f64> = scored.iter().filter(|s| s.1).map(|s| s.0).collect();
    let neg: Vec<f64> = scored.iter().filter(|s| !s.1).map(|s| s.0).collect();
    let mut wins = 0.0;
    for &p in &pos {
        for &q in &neg {
            if p > q {
                wins += 1.0;
            } else if p == q {
                wins += 0.5;
            }
        }
    }
    wins / (pos.len() * neg.len()) as f64
}

/// Manifest with random class sizes, procedures and patients; images are
/// single placeholder pixels.
pub fn random_manifest(seed: u64, patients: usize) -> DatasetManifest {
    let mut r = rng(seed);
    let n = r.random_range(3..=120);
    let lesion_share = r.random_range(0.1..0.9);
    let pixel = std::sync::Arc::new(Image::filled(1, 1, [0.5; 3]));
    let samples = (0..n)
        .map(|i| Sample {
            id: format!("s{i}"),
            image: ImageSource::Memory(pixel.clone()),
            procedure: *Procedure::ALL.choose(&mut r).unwrap(),
            modality: *Modality::ALL.choose(&mut r).unwrap(),
            label: if r.random_bool(lesion_share) {
                Label::Lesion
            } else {
                Label::NoLesion
            },
            patient_id: format!("p{}", r.random_range(0..patients)),
            case_id: format!("c{i}"),
            lesion_box: None,
        })
        .collect();
    DatasetManifest::new(samples)
}

/// Exhaustive check of a by-label split: the test folds partition the
/// manifest, each train set is its complement, and every fold holds each
/// class within one sample of `class_total / k`.
pub fn check_label_split(manifest: &DatasetManifest, split: &FoldSplit) -> Result<(), String> {
    let n = manifest.len();
    let tests: Vec<Vec<usize>> = (0..split.k).map(|i| split.test_indices(i)).collect();
    if !is_partition(&tests, n) {
        return Err("test folds do not partition the manifest".into());
    }
    for (i, test) in tests.iter().enumerate() {
        let train = split.train_indices(i);
        if !is_partition(&[train.clone(), test.clone()], n) {
            return Err(format!("fold {i}: train is not the complement of test"));
        }
        for label in Label::ALL {
            let total = manifest.samples().iter().filter(|s| s.label == *label).count();
            let here = test.iter().filter(|&&j| manifest.samples()[j].label == *label).count();
            let target = total as f64 / split.k as f64;
            if (here as f64 - target).abs() > 1.0 {
                return Err(format!("fold {i}: {here} {label} samples, target {target:.2}"));
            }
        }
    }
    Ok(())
}
