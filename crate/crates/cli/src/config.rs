use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use urocnn::arch::{Backbone, InceptionVariant, NetworkSpec};
use urocnn::dataset::{Composition, FoldMode};
use urocnn::trainer::{Scenario, TrainConfig};

/// Environment variable that relocates relative output directories.
pub const OUTPUT_ROOT_ENV: &str = "UROCNN_OUTPUT_ROOT";
/// Name of the resolved configuration echoed into every output directory.
pub const ECHO_FILE: &str = "urocnn.toml";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CompositionKind {
    /// `per_cell` images in every procedure × modality × label cell.
    #[default]
    Uniform,
    /// The reference clinical class counts divided by `table_divisor`.
    TableOne,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    /// Dataset directory holding `manifest.csv`; `generate` writes here.
    pub dir: PathBuf,
    pub composition: CompositionKind,
    pub per_cell: usize,
    pub table_divisor: usize,
    /// Side length of generated images.
    pub resolution: usize,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("data"),
            composition: CompositionKind::Uniform,
            per_cell: 20,
            table_divisor: 10,
            resolution: 64,
        }
    }
}

impl DataSection {
    pub fn composition(&self) -> Composition {
        match self.composition {
            CompositionKind::Uniform => Composition::uniform(self.per_cell),
            CompositionKind::TableOne => Composition::table_one().scaled_down(self.table_divisor.max(1)),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub archs: Vec<Backbone>,
    pub width_scale: f64,
    /// Square network input side.
    pub resolution: usize,
    pub inception_variant: InceptionVariant,
    /// Optional start checkpoint used instead of random initialization.
    pub init: Option<PathBuf>,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            archs: Backbone::ALL.to_vec(),
            width_scale: 0.25,
            resolution: 64,
            inception_variant: InceptionVariant::Classic,
            init: None,
        }
    }
}

impl ModelSection {
    pub fn spec(&self, arch: Backbone) -> NetworkSpec {
        NetworkSpec {
            inception_variant: self.inception_variant,
            ..NetworkSpec::new(arch)
                .with_resolution(self.resolution, self.resolution)
                .with_scale(self.width_scale)
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub scenarios: Vec<Scenario>,
    pub warm_epochs: usize,
    pub warm_lr: f64,
    pub finetune_epochs: usize,
    pub finetune_lr: f64,
    pub last_k: usize,
    pub batch_size: usize,
    pub folds: usize,
    pub fold_mode: FoldMode,
    pub jobs: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            scenarios: Scenario::ALL.to_vec(),
            warm_epochs: t.warm_epochs,
            warm_lr: t.warm_lr,
            finetune_epochs: t.finetune_epochs,
            finetune_lr: t.finetune_lr,
            last_k: t.last_k,
            batch_size: t.batch_size,
            folds: t.folds,
            fold_mode: t.fold_mode,
            jobs: t.jobs,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GradcamSection {
    /// Target layer; empty selects the last convolutional activation.
    pub layer: Option<String>,
    pub class_index: usize,
    pub opacity: f64,
}

impl Default for GradcamSection {
    fn default() -> Self {
        Self {
            layer: None,
            class_index: 1,
            opacity: 0.5,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    /// Where `train` writes the bundle and other commands their results.
    pub output_dir: Option<PathBuf>,
    pub data: DataSection,
    pub model: ModelSection,
    pub train: TrainSection,
    pub gradcam: GradcamSection,
}

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Read {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: line {line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("{0}")]
    Invalid(String),
}

impl RunConfig {
    pub fn parse(text: &str, path: &Path) -> Result<Self, ConfigError> {
        toml::from_str(text).map_err(|e| {
            let line = e
                .span()
                .map_or(0, |s| text[..s.start.min(text.len())].matches('\n').count() + 1);
            ConfigError::Parse {
                path: path.to_path_buf(),
                line,
                message: e.message().to_string(),
            }
        })
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        Self::parse(&text, path)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            warm_epochs: t.warm_epochs,
            warm_lr: t.warm_lr,
            finetune_epochs: t.finetune_epochs,
            finetune_lr: t.finetune_lr,
            last_k: t.last_k,
            batch_size: t.batch_size,
            seed: self.seed,
            folds: t.folds,
            fold_mode: t.fold_mode,
            jobs: t.jobs,
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.train_config()
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if self.model.archs.is_empty() {
            return Err(ConfigError::Invalid("model.archs is empty".into()));
        }
        if self.train.scenarios.is_empty() {
            return Err(ConfigError::Invalid("train.scenarios is empty".into()));
        }
        if !(self.model.width_scale.is_finite() && self.model.width_scale > 0.0) {
            return Err(ConfigError::Invalid(format!(
                "model.width_scale must be positive, got {}",
                self.model.width_scale
            )));
        }
        if !(0.0..=1.0).contains(&self.gradcam.opacity) {
            return Err(ConfigError::Invalid(format!(
                "gradcam.opacity must be in [0, 1], got {}",
                self.gradcam.opacity
            )));
        }
        if self.data.resolution == 0 || self.model.resolution == 0 {
            return Err(ConfigError::Invalid("resolutions must be positive".into()));
        }
        Ok(())
    }
}

/// Relative paths are placed under `$UROCNN_OUTPUT_ROOT` when it is set.
pub fn output_path(path: &Path) -> PathBuf {
    match std::env::var_os(OUTPUT_ROOT_ENV) {
        Some(root) if path.is_relative() && !root.is_empty() => PathBuf::from(root).join(path),
        _ => path.to_path_buf(),
    }
}
