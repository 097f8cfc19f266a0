//! Backbone builders, the classification head and model checkpoints.

mod checkpoint;
mod head;
mod inception;
mod resnet;
mod spec;
mod vgg;

use std::path::PathBuf;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::nn::{Network, NnError};
use crate::tensor::{DType, Element};

pub use checkpoint::{
    load_checkpoint, load_checkpoint_for, save_checkpoint, Model, ProvenanceEntry, ProvenanceTag, CHECKPOINT_MAGIC,
    CHECKPOINT_VERSION,
};
pub use head::attach_head;
pub use inception::{
    audit_inception_blocks, build_inception_v3, BranchAudit, InceptionBlockAudit, INCEPTION_MIN_RESOLUTION,
};
pub use resnet::{audit_residual_blocks, build_resnet50, stage_block_counts, ResidualBlockAudit, RESNET50_STAGES};
pub use spec::{Backbone, InceptionVariant, NetworkSpec, HEAD_SIZES, MIN_SCALED_CHANNELS};
pub use vgg::{build_vgg16, VGG16_BLOCKS};

#[derive(Debug, Error)]
pub enum ArchError {
    #[error("width scale {0} outside (0, 1]")]
    InvalidScale(f64),
    #[error("{backbone} cannot take a {}x{} input: {reason}", resolution.0, resolution.1)]
    Resolution {
        backbone: Backbone,
        resolution: (usize, usize),
        reason: String,
    },
    #[error("classification head needs flat features, got {0:?}")]
    NonFlatFeatures(Vec<usize>),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{0}: not a checkpoint file")]
    NotACheckpoint(PathBuf),
    #[error("{0}: checkpoint has no provenance")]
    Untagged(PathBuf),
    #[error("{path}: checkpoint format version {found}, expected {expected}")]
    VersionMismatch { path: PathBuf, found: u32, expected: u32 },
    #[error("{path}: checkpoint is for {found}, expected {expected}")]
    SpecMismatch {
        path: PathBuf,
        expected: String,
        found: String,
    },
    #[error("{path}: checkpoint truncated ({detail})")]
    Truncated { path: PathBuf, detail: String },
    #[error("{path}: checkpoint corrupt ({detail})")]
    Corrupt { path: PathBuf, detail: String },
    #[error("{path}: checkpoint stores {found:?} values, expected {expected:?}")]
    DTypeMismatch {
        path: PathBuf,
        found: DType,
        expected: DType,
    },
}

/// Builds the backbone and head described by `spec`, He-uniform initialized
/// from `seed`.
pub fn build_network<E: Element>(spec: &NetworkSpec, seed: u64) -> Result<Network<E>, ArchError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    match spec.backbone {
        Backbone::Vgg16 => build_vgg16(spec, &mut rng),
        Backbone::InceptionV3 => build_inception_v3(spec, &mut rng),
        Backbone::Resnet50 => build_resnet50(spec, &mut rng),
    }
}
