use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{DatasetError, DatasetManifest, Label};
use crate::tensor::{Element, Tensor};

/// Per-channel standardization `(x - mean) / std`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelNorm {
    pub mean: [f32; 3],
    pub std: [f32; 3],
}

/// Manifest images decoded once, resized to the network input and stored
/// channel-first, aligned with the manifest order.
#[derive(Clone, Debug)]
pub struct LoadedSet {
    manifest: DatasetManifest,
    resolution: (usize, usize),
    pixels: Vec<Vec<f32>>,
}

impl LoadedSet {
    /// `resolution` is `(height, width)`.
    pub fn load(manifest: DatasetManifest, resolution: (usize, usize)) -> Result<Self, DatasetError> {
        if resolution.0 == 0 || resolution.1 == 0 {
            return Err(DatasetError::ZeroResolution);
        }
        let pixels = manifest
            .samples()
            .par_iter()
            .map(|s| Ok(s.load_image()?.resized(resolution.1, resolution.0).to_chw()))
            .collect::<Result<Vec<_>, DatasetError>>()?;
        Ok(Self {
            manifest,
            resolution,
            pixels,
        })
    }

    pub fn manifest(&self) -> &DatasetManifest {
        &self.manifest
    }

    pub fn resolution(&self) -> (usize, usize) {
        self.resolution
    }

    pub fn len(&self) -> usize {
        self.pixels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }

    pub fn pixels(&self, index: usize) -> &[f32] {
        &self.pixels[index]
    }

    /// Mean and standard deviation per channel over `indices`.
    pub fn channel_norm(&self, indices: &[usize]) -> ChannelNorm {
        let plane = self.resolution.0 * self.resolution.1;
        let mut sum = [0f64; 3];
        let mut sq = [0f64; 3];
        for &i in indices {
            for c in 0..3 {
                for &v in &self.pixels[i][c * plane..(c + 1) * plane] {
                    sum[c] += v as f64;
                    sq[c] += (v as f64) * (v as f64);
                }
            }
        }
        let n = (indices.len() * plane).max(1) as f64;
        let mean = sum.map(|s| s / n);
        let mut std = [0f32; 3];
        for c in 0..3 {
            std[c] = ((sq[c] / n - mean[c] * mean[c]).max(0.0).sqrt() as f32).max(1e-6);
        }
        ChannelNorm {
            mean: mean.map(|m| m as f32),
            std,
        }
    }

    /// Stacked `[B, 3, H, W]` input batch.
    pub fn batch<E: Element>(&self, indices: &[usize], norm: Option<&ChannelNorm>) -> Tensor<E> {
        let (h, w) = self.resolution;
        let plane = h * w;
        let mut data = Vec::with_capacity(indices.len() * 3 * plane);
        for &i in indices {
            let px = &self.pixels[i];
            match norm {
                None => data.extend(px.iter().map(|&v| E::from_f64(v as f64))),
                Some(n) => {
                    for c in 0..3 {
                        data.extend(
                            px[c * plane..(c + 1) * plane]
                                .iter()
                                .map(|&v| E::from_f64(((v - n.mean[c]) / n.std[c]) as f64)),
                        );
                    }
                }
            }
        }
        Tensor::new(vec![indices.len(), 3, h, w], data).expect("batch shape")
    }

    /// One-hot `[B, 2]` targets; column 1 is the lesion class.
    pub fn labels<E: Element>(&self, indices: &[usize]) -> Tensor<E> {
        let mut data = vec![E::ZERO; indices.len() * 2];
        for (row, &i) in indices.iter().enumerate() {
            data[row * 2 + self.manifest.samples()[i].label.class_index()] = E::ONE;
        }
        Tensor::new(vec![indices.len(), 2], data).expect("label shape")
    }

    pub fn label(&self, index: usize) -> Label {
        self.manifest.samples()[index].label
    }
}
