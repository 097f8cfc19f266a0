use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::ArchError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Backbone {
    Vgg16,
    InceptionV3,
    Resnet50,
}

impl Backbone {
    pub const ALL: [Backbone; 3] = [Backbone::Vgg16, Backbone::InceptionV3, Backbone::Resnet50];

    pub fn as_str(self) -> &'static str {
        match self {
            Backbone::Vgg16 => "vgg16",
            Backbone::InceptionV3 => "inception_v3",
            Backbone::Resnet50 => "resnet50",
        }
    }
}

impl fmt::Display for Backbone {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Backbone {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "vgg16" | "vgg" | "vgg_16" => Ok(Backbone::Vgg16),
            "inception_v3" | "inception" | "inceptionv3" => Ok(Backbone::InceptionV3),
            "resnet50" | "resnet" | "resnet_50" => Ok(Backbone::Resnet50),
            other => Err(format!(
                "unknown architecture {other:?} (expected vgg16, inception_v3 or resnet50)"
            )),
        }
    }
}

/// Inception block flavour: `Classic` uses parallel 1×1/3×3/5×5 kernels;
/// `Factorized` replaces each 5×5 with two stacked 3×3 convolutions.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InceptionVariant {
    #[default]
    Classic,
    Factorized,
}

/// Full-size widths of the classification head.
pub const HEAD_SIZES: [usize; 3] = [2048, 1024, 2];

/// Smallest channel count produced by width scaling.
pub const MIN_SCALED_CHANNELS: usize = 8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSpec {
    pub backbone: Backbone,
    /// `(height, width)`; images always have 3 channels.
    pub input_resolution: (usize, usize),
    pub width_scale: f64,
    #[serde(default)]
    pub inception_variant: InceptionVariant,
}

impl NetworkSpec {
    /// Full-size graph at 224×224.
    pub fn new(backbone: Backbone) -> Self {
        Self {
            backbone,
            input_resolution: (224, 224),
            width_scale: 1.0,
            inception_variant: InceptionVariant::default(),
        }
    }

    /// Reduced graph for CPU runs: quarter width at 64×64.
    pub fn desk(backbone: Backbone) -> Self {
        Self {
            input_resolution: (64, 64),
            width_scale: 0.25,
            ..Self::new(backbone)
        }
    }

    pub fn with_resolution(mut self, height: usize, width: usize) -> Self {
        self.input_resolution = (height, width);
        self
    }

    pub fn with_scale(mut self, width_scale: f64) -> Self {
        self.width_scale = width_scale;
        self
    }

    pub fn input_shape(&self) -> [usize; 3] {
        [3, self.input_resolution.0, self.input_resolution.1]
    }

    /// Scaled channel count: `round(c · scale)`, at least [`MIN_SCALED_CHANNELS`].
    pub fn channels(&self, full: usize) -> usize {
        if self.width_scale == 1.0 {
            return full;
        }
        ((full as f64 * self.width_scale).round() as usize).max(MIN_SCALED_CHANNELS)
    }

    /// Head widths; the 2-way output is never scaled.
    pub fn head_sizes(&self) -> [usize; 3] {
        [
            self.channels(HEAD_SIZES[0]),
            self.channels(HEAD_SIZES[1]),
            HEAD_SIZES[2],
        ]
    }

    pub fn validate(&self) -> Result<(), ArchError> {
        if !(self.width_scale > 0.0 && self.width_scale <= 1.0) {
            return Err(ArchError::InvalidScale(self.width_scale));
        }
        let (h, w) = self.input_resolution;
        if h == 0 || w == 0 {
            return Err(ArchError::Resolution {
                backbone: self.backbone,
                resolution: self.input_resolution,
                reason: "zero extent".into(),
            });
        }
        Ok(())
    }

    pub(crate) fn require_divisible(&self, by: usize) -> Result<(), ArchError> {
        let (h, w) = self.input_resolution;
        if h % by != 0 || w % by != 0 {
            return Err(ArchError::Resolution {
                backbone: self.backbone,
                resolution: self.input_resolution,
                reason: format!("height and width must be divisible by {by}"),
            });
        }
        Ok(())
    }
}
