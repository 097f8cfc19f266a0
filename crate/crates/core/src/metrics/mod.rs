//! Confusion counts, ROC curves, AUC and experiment reports.

mod report;
mod svg;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{ChannelNorm, DatasetError, DatasetManifest, Label, LoadedSet, Procedure};
use crate::nn::{Network, NnError};

pub use report::{reference_auc, report, summarize, CellSummary, ReferenceAuc, ReportSummary, REFERENCE_AUCS};
pub use svg::roc_svg;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("ROC undefined: need both classes, got {positives} lesion and {negatives} no-lesion samples")]
    SingleClass { positives: usize, negatives: usize },
    #[error("no samples to score")]
    Empty,
    #[error("sample {id}: score {score} is not a probability")]
    InvalidScore { id: String, score: f64 },
    #[error("network must output 2 classes, has output shape {0:?}")]
    OutputWidth(Vec<usize>),
    #[error(transparent)]
    Network(#[from] NnError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error("{path}: {source}")]
    Io {
        path: std::path::PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("bundle incomplete; missing cells: {}", .0.join(", "))]
    IncompleteBundle(Vec<String>),
}

/// Lesion-class probability for one evaluated sample.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredSample {
    pub id: String,
    pub score: f64,
    pub label: Label,
    pub procedure: Procedure,
    pub fold: usize,
}

impl ScoredSample {
    pub fn is_positive(&self) -> bool {
        self.label == Label::Lesion
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
}

impl Confusion {
    pub fn tpr(&self) -> f64 {
        self.tp as f64 / (self.tp + self.fn_).max(1) as f64
    }

    pub fn fpr(&self) -> f64 {
        self.fp as f64 / (self.fp + self.tn).max(1) as f64
    }
}

/// Tally with "predicted lesion" iff `score >= t`.
pub fn confusion_at_threshold(samples: &[ScoredSample], t: f64) -> Confusion {
    let mut c = Confusion::default();
    for s in samples {
        match (s.score >= t, s.is_positive()) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, false) => c.tn += 1,
            (false, true) => c.fn_ += 1,
        }
    }
    c
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    /// Scores at or above this value are called positive; `+inf` for the
    /// origin sentinel.
    pub threshold: f64,
    pub fpr: f64,
    pub tpr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RocCurve {
    pub points: Vec<RocPoint>,
    pub auc: f64,
    pub positives: usize,
    pub negatives: usize,
}

/// ROC over the distinct scores, from `(0,0)` to `(1,1)`. The trapezoid
/// rule gives tied positive/negative pairs half credit.
pub fn roc_curve(samples: &[ScoredSample]) -> Result<RocCurve, MetricsError> {
    for s in samples {
        if !(0.0..=1.0).contains(&s.score) {
            return Err(MetricsError::InvalidScore {
                id: s.id.clone(),
                score: s.score,
            });
        }
    }
    let scored: Vec<(f64, bool)> = samples.iter().map(|s| (s.score, s.is_positive())).collect();
    roc_from_scores(&scored)
}

/// Same as [`roc_curve`] for bare `(score, is_positive)` pairs.
pub fn roc_from_scores(scored: &[(f64, bool)]) -> Result<RocCurve, MetricsError> {
    if scored.is_empty() {
        return Err(MetricsError::Empty);
    }
    let positives = scored.iter().filter(|s| s.1).count();
    let negatives = scored.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(MetricsError::SingleClass { positives, negatives });
    }
    if let Some(bad) = scored.iter().find(|s| s.0.is_nan()) {
        return Err(MetricsError::InvalidScore {
            id: String::new(),
            score: bad.0,
        });
    }
    let mut order: Vec<usize> = (0..scored.len()).collect();
    order.sort_by(|&a, &b| scored[b].0.total_cmp(&scored[a].0));
    let (p, n) = (positives as f64, negatives as f64);
    let mut points = vec![RocPoint {
        threshold: f64::INFINITY,
        fpr: 0.0,
        tpr: 0.0,
    }];
    let (mut tp, mut fp) = (0u64, 0u64);
    // Twice the area in units of one positive×negative pair.
    let mut doubled_area: u128 = 0;
    let mut i = 0;
    while i < order.len() {
        let t = scored[order[i]].0;
        let (tp0, fp0) = (tp, fp);
        while i < order.len() && scored[order[i]].0 == t {
            if scored[order[i]].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        doubled_area += (fp - fp0) as u128 * (tp + tp0) as u128;
        points.push(RocPoint {
            threshold: t,
            fpr: fp as f64 / n,
            tpr: tp as f64 / p,
        });
    }
    let auc = doubled_area as f64 / (2.0 * p * n);
    Ok(RocCurve {
        points,
        auc,
        positives,
        negatives,
    })
}

const EVAL_BATCH: usize = 32;

/// Scores `indices` of `set` in inference mode. The score is the softmax
/// probability of the lesion class.
pub fn evaluate(
    network: &Network<f32>,
    set: &LoadedSet,
    indices: &[usize],
    fold: usize,
    norm: Option<&ChannelNorm>,
) -> Result<Vec<ScoredSample>, MetricsError> {
    if network.output_shape() != [2] {
        return Err(MetricsError::OutputWidth(network.output_shape().to_vec()));
    }
    let mut out = Vec::with_capacity(indices.len());
    for chunk in indices.chunks(EVAL_BATCH) {
        let probs = network.predict(set.batch(chunk, norm))?;
        for (row, &i) in chunk.iter().enumerate() {
            let s = &set.manifest().samples()[i];
            out.push(ScoredSample {
                id: s.id.clone(),
                score: probs.data()[row * 2 + Label::Lesion.class_index()] as f64,
                label: s.label,
                procedure: s.procedure,
                fold,
            });
        }
    }
    Ok(out)
}

/// Loads every image of `manifest` at the network's input size and scores it.
pub fn evaluate_manifest(
    network: &Network<f32>,
    manifest: &DatasetManifest,
    norm: Option<&ChannelNorm>,
) -> Result<Vec<ScoredSample>, MetricsError> {
    let shape = network.input_shape();
    let set = LoadedSet::load(manifest.clone(), (shape[1], shape[2]))?;
    let all: Vec<usize> = (0..set.len()).collect();
    evaluate(network, &set, &all, 0, norm)
}
