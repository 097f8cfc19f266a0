//! Gradient-weighted class activation maps and heatmap overlays.

use std::fmt::Write;

use thiserror::Error;

use crate::dataset::{BoundingBox, Image};
use crate::nn::{LayerKind, Network, NnError, Source};
use crate::tensor::{Element, Tape, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum GradCamError {
    #[error("no layer named {0:?}")]
    UnknownLayer(String),
    #[error("layer {name:?} is not convolutional (output shape {shape:?})")]
    NotConvolutional { name: String, shape: Vec<usize> },
    #[error("network has no convolutional layer")]
    NoConvLayer,
    #[error("network does not end in a softmax layer")]
    NoSoftmax,
    #[error("class index {index} out of range for {classes} classes")]
    ClassIndex { index: usize, classes: usize },
    #[error("input shape {got:?} does not match the network input {expected:?}")]
    InputShape { expected: Vec<usize>, got: Vec<usize> },
    #[error("opacity {0} outside [0, 1]")]
    Opacity(f64),
    #[error("upsampled heatmap is {got:?}, image is {expected:?}")]
    ResolutionMismatch {
        expected: (usize, usize),
        got: (usize, usize),
    },
    #[error(transparent)]
    Network(#[from] NnError),
}

impl From<TensorError> for GradCamError {
    fn from(e: TensorError) -> Self {
        GradCamError::Network(e.into())
    }
}

/// Max-normalized class activation grid over a layer's spatial extent.
#[derive(Clone, Debug, PartialEq)]
pub struct Heatmap {
    pub height: usize,
    pub width: usize,
    /// Row-major, values in `[0, 1]`.
    pub values: Vec<f64>,
    pub layer: String,
    pub class_index: usize,
    pub sample: Option<String>,
    /// Set when no spatial position had positive evidence; `values` are all zero.
    pub degenerate: bool,
}

impl Heatmap {
    pub fn at(&self, y: usize, x: usize) -> f64 {
        self.values[y * self.width + x]
    }

    pub fn argmax(&self) -> (usize, usize) {
        let i = (0..self.values.len())
            .max_by(|&a, &b| self.values[a].total_cmp(&self.values[b]).then(b.cmp(&a)))
            .unwrap_or(0);
        (i / self.width, i % self.width)
    }

    pub fn with_sample(mut self, id: impl Into<String>) -> Self {
        self.sample = Some(id.into());
        self
    }

    /// Bilinear resampling to `height × width` (pixel centers aligned, edges
    /// clamped), row-major.
    pub fn upsample(&self, height: usize, width: usize) -> Vec<f64> {
        let sy = self.height as f64 / height as f64;
        let sx = self.width as f64 / width as f64;
        let axis = |o: usize, scale: f64, n: usize| {
            let c = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (n - 1) as f64);
            let i0 = c.floor() as usize;
            (i0, (i0 + 1).min(n - 1), c - i0 as f64)
        };
        let mut out = Vec::with_capacity(height * width);
        for oy in 0..height {
            let (y0, y1, fy) = axis(oy, sy, self.height);
            for ox in 0..width {
                let (x0, x1, fx) = axis(ox, sx, self.width);
                let top = self.at(y0, x0) * (1.0 - fx) + self.at(y0, x1) * fx;
                let bottom = self.at(y1, x0) * (1.0 - fx) + self.at(y1, x1) * fx;
                out.push(top * (1.0 - fy) + bottom * fy);
            }
        }
        out
    }

    /// Grid as comma-separated rows.
    pub fn to_csv(&self) -> String {
        let mut s = String::new();
        for row in self.values.chunks(self.width) {
            let cells: Vec<String> = row.iter().map(|v| format!("{v:.6}")).collect();
            let _ = writeln!(s, "{}", cells.join(","));
        }
        s
    }

    /// Heatmap mass inside and outside `bbox`, after upsampling to the
    /// image size the box refers to.
    pub fn box_mass(&self, bbox: &BoundingBox, image_size: (usize, usize)) -> BoxMass {
        let (h, w) = image_size;
        let up = self.upsample(h, w);
        let (mut inside, mut outside, mut area) = (0.0, 0.0, 0usize);
        for y in 0..h {
            for x in 0..w {
                let v = up[y * w + x];
                if bbox.contains(x, y) {
                    inside += v;
                    area += 1;
                } else {
                    outside += v;
                }
            }
        }
        BoxMass {
            inside,
            outside,
            box_fraction: area as f64 / (h * w) as f64,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BoxMass {
    pub inside: f64,
    pub outside: f64,
    /// Share of the image covered by the box.
    pub box_fraction: f64,
}

impl BoxMass {
    /// Mean heatmap value inside the box over mean value outside.
    pub fn density_ratio(&self) -> f64 {
        let in_mean = self.inside / self.box_fraction.max(f64::MIN_POSITIVE);
        let out_mean = self.outside / (1.0 - self.box_fraction).max(f64::MIN_POSITIVE);
        in_mean / out_mean.max(f64::MIN_POSITIVE)
    }
}

fn is_spatial<E: Element>(network: &Network<E>, index: usize) -> bool {
    network.layers()[index].output_shape().len() == 3
}

/// Default target: the activation fed by the backbone's last convolution,
/// or the convolution itself when nothing rectifies it.
pub fn default_target_layer<E: Element>(network: &Network<E>) -> Option<&str> {
    let layers = network.layers();
    let last_conv = layers
        .iter()
        .rposition(|l| matches!(l.kind(), LayerKind::Conv2d { .. }))?;
    let last_spatial_relu = layers
        .iter()
        .enumerate()
        .rposition(|(i, l)| matches!(l.kind(), LayerKind::Relu) && is_spatial(network, i));
    match last_spatial_relu {
        Some(r) if r > last_conv => Some(layers[r].name()),
        _ => Some(layers[last_conv].name()),
    }
}

/// Grad-CAM of `class_index` for one `[3, H, W]` input. The class score is the
/// softmax input; channel weights are the spatial mean of its gradient with
/// respect to `target` (a layer with `[C, h, w]` output).
pub fn gradcam<E: Element>(
    network: &Network<E>,
    input: &Tensor<E>,
    class_index: usize,
    target: Option<&str>,
) -> Result<Heatmap, GradCamError> {
    if input.shape() != network.input_shape() {
        return Err(GradCamError::InputShape {
            expected: network.input_shape().to_vec(),
            got: input.shape().to_vec(),
        });
    }
    let target = match target {
        Some(t) => t,
        None => default_target_layer(network).ok_or(GradCamError::NoConvLayer)?,
    };
    let ti = network
        .layer_index(target)
        .ok_or_else(|| GradCamError::UnknownLayer(target.to_string()))?;
    if !is_spatial(network, ti) {
        return Err(GradCamError::NotConvolutional {
            name: target.to_string(),
            shape: network.layers()[ti].output_shape().to_vec(),
        });
    }
    let last = network.layers().last().ok_or(GradCamError::NoSoftmax)?;
    let (LayerKind::Softmax, [Source::Layer(logits_at)]) = (last.kind(), last.inputs()) else {
        return Err(GradCamError::NoSoftmax);
    };
    let classes = network.output_shape()[0];
    if class_index >= classes {
        return Err(GradCamError::ClassIndex {
            index: class_index,
            classes,
        });
    }

    let mut shape = vec![1];
    shape.extend_from_slice(input.shape());
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::new(shape, input.data().to_vec())?, false);
    let fwd = network.forward_eval(&mut tape, x, Some(ti))?;
    let captured = fwd.captured.expect("target layer captured");
    let score = tape.column(fwd.outputs[*logits_at], class_index)?;
    let score = tape.sum(score)?;
    tape.backward(score)?;

    let act = tape.value(captured);
    let (c, h, w) = (act.shape()[1], act.shape()[2], act.shape()[3]);
    let plane = h * w;
    let zeros = Tensor::zeros(act.shape());
    let grad = tape.grad(captured).unwrap_or(&zeros);
    let mut map = vec![0.0f64; plane];
    for ch in 0..c {
        let g = &grad.data()[ch * plane..(ch + 1) * plane];
        let weight = g.iter().map(|v| v.to_f64()).sum::<f64>() / plane as f64;
        if weight == 0.0 {
            continue;
        }
        for (m, a) in map.iter_mut().zip(&act.data()[ch * plane..(ch + 1) * plane]) {
            *m += weight * a.to_f64();
        }
    }
    let peak = map.iter().fold(0.0f64, |m, &v| m.max(v));
    let degenerate = !(peak > 0.0 && peak.is_finite());
    let values = if degenerate {
        vec![0.0; plane]
    } else {
        map.iter().map(|&v| v.max(0.0) / peak).collect()
    };
    Ok(Heatmap {
        height: h,
        width: w,
        values,
        layer: target.to_string(),
        class_index,
        sample: None,
        degenerate,
    })
}

/// Cold-to-hot ramp: dark blue at 0 through cyan, yellow, to dark red at 1.
pub fn jet(v: f64) -> [f32; 3] {
    let v = v.clamp(0.0, 1.0);
    let ch = |center: f64| (1.5 - (4.0 * v - center).abs()).clamp(0.0, 1.0) as f32;
    [ch(3.0), ch(2.0), ch(1.0)]
}

/// Blends the upsampled, color-mapped heatmap over `image`.
pub fn overlay(image: &Image, heatmap: &Heatmap, opacity: f64) -> Result<Image, GradCamError> {
    if !(0.0..=1.0).contains(&opacity) {
        return Err(GradCamError::Opacity(opacity));
    }
    let (h, w) = (image.height(), image.width());
    let up = heatmap.upsample(h, w);
    if up.len() != h * w {
        return Err(GradCamError::ResolutionMismatch {
            expected: (h, w),
            got: (up.len() / w.max(1), w),
        });
    }
    let a = opacity as f32;
    let mut data = Vec::with_capacity(h * w * 3);
    for (px, &v) in image.data().chunks_exact(3).zip(&up) {
        let color = jet(v);
        for k in 0..3 {
            data.push((1.0 - a) * px[k] + a * color[k]);
        }
    }
    Ok(Image::new(w, h, data).expect("overlay keeps the image size"))
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::nn::GraphBuilder;

    /// conv → relu (target) → GAP → dense → softmax, with the class-1 logit
    /// wired to the mean of channel 0.
    fn analytic_net(class1_weights: [f64; 2]) -> Network<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut b = GraphBuilder::new(&[3, 6, 5], &mut rng);
        let x = b.conv("conv", b.last(), 2, 3, 1, 1, true).unwrap();
        let x = b.relu("act", x).unwrap();
        let x = b.global_avg_pool("gap", x).unwrap();
        let x = b.dense("fc", x, 2).unwrap();
        b.softmax("out", x).unwrap();
        let mut net = b.finish().unwrap();
        let w = net.layer_mut("fc").unwrap().param_mut("weight").unwrap();
        *w = Tensor::from_f64(&[2, 2], &[0.3, class1_weights[0], -0.7, class1_weights[1]]).unwrap();
        net
    }

    fn input(seed: u64) -> Tensor<f64> {
        Tensor::random_uniform(&[3, 6, 5], -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    #[test]
    fn single_channel_score_reproduces_rectified_activation() {
        let net = analytic_net([1.0, 0.0]);
        for seed in 0..5 {
            let x = input(seed);
            let map = gradcam(&net, &x, 1, Some("act")).unwrap();
            assert_eq!((map.height, map.width), (6, 5));
            let mut tape = Tape::new();
            let xv = tape.leaf(Tensor::new(vec![1, 3, 6, 5], x.data().to_vec()).unwrap(), false);
            let fwd = net.forward_eval(&mut tape, xv, None).unwrap();
            let act = tape.value(fwd.outputs[1]).data()[..30].to_vec();
            let peak = act.iter().cloned().fold(0.0, f64::max);
            if peak == 0.0 {
                assert!(map.degenerate);
                continue;
            }
            for (m, a) in map.values.iter().zip(&act) {
                assert!((m - a / peak).abs() < 1e-6, "{m} vs {}", a / peak);
            }
        }
    }

    #[test]
    fn constant_score_is_degenerate() {
        let net = analytic_net([0.0, 0.0]);
        let map = gradcam(&net, &input(1), 1, None).unwrap();
        assert!(map.degenerate);
        assert!(map.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn target_layer_must_be_spatial() {
        let net = analytic_net([1.0, 0.0]);
        assert_eq!(default_target_layer(&net), Some("act"));
        assert!(matches!(
            gradcam(&net, &input(0), 1, Some("fc")),
            Err(GradCamError::NotConvolutional { .. })
        ));
        assert!(matches!(
            gradcam(&net, &input(0), 1, Some("nope")),
            Err(GradCamError::UnknownLayer(_))
        ));
        assert!(matches!(
            gradcam(&net, &input(0), 2, None),
            Err(GradCamError::ClassIndex { .. })
        ));
    }

    fn grid(h: usize, w: usize, values: Vec<f64>) -> Heatmap {
        Heatmap {
            height: h,
            width: w,
            values,
            layer: "t".into(),
            class_index: 1,
            sample: None,
            degenerate: false,
        }
    }

    #[test]
    fn overlay_extremes() {
        let img = Image::new(4, 3, (0..36).map(|i| i as f32 / 36.0).collect()).unwrap();
        let map = grid(2, 2, vec![0.2, 1.0, 0.0, 0.5]);
        assert_eq!(overlay(&img, &map, 0.0).unwrap(), img);
        let zero = grid(2, 2, vec![0.0; 4]);
        let full = overlay(&img, &zero, 1.0).unwrap();
        assert!(full.data().chunks(3).all(|p| p == jet(0.0)));
        assert!(overlay(&img, &map, 1.5).is_err());
    }

    #[test]
    fn upsampled_argmax_stays_in_its_cell() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..50 {
            let (h, w) = (4, 3);
            // One clear peak; near-ties can legitimately swap cells.
            let mut v = Tensor::<f64>::random_uniform(&[h * w], 0.0, 0.8, &mut rng).into_data();
            let peak = rng.random_range(0..h * w);
            v[peak] = 1.0;
            let map = grid(h, w, v);
            let (gy, gx) = map.argmax();
            let (oh, ow) = (32, 24);
            let up = map.upsample(oh, ow);
            let i = (0..up.len()).max_by(|&a, &b| up[a].total_cmp(&up[b])).unwrap();
            let (uy, ux) = (i / ow, i % ow);
            let cy = (uy as f64 + 0.5) * h as f64 / oh as f64;
            let cx = (ux as f64 + 0.5) * w as f64 / ow as f64;
            assert!((cy - (gy as f64 + 0.5)).abs() <= 1.0 && (cx - (gx as f64 + 0.5)).abs() <= 1.0);
        }
    }

    #[test]
    fn ramp_endpoints() {
        assert_eq!(jet(0.0), [0.0, 0.0, 0.5]);
        assert_eq!(jet(1.0), [0.5, 0.0, 0.0]);
        assert_eq!(jet(0.5), [0.5, 1.0, 0.5]);
    }
}
