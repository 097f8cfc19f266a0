use rand::Rng;

use super::{attach_head, ArchError, NetworkSpec};
use crate::nn::{GraphBuilder, LayerKind, Network, Source};
use crate::tensor::Element;

/// Bottleneck blocks per stage.
pub const RESNET50_STAGES: [usize; 4] = [3, 4, 6, 3];
const STAGE_WIDTHS: [usize; 4] = [64, 128, 256, 512];
const EXPANSION: usize = 4;

fn conv_bn<E: Element, R: Rng + ?Sized>(
    b: &mut GraphBuilder<'_, E, R>,
    prefix: &str,
    src: Source,
    out: usize,
    kernel: usize,
    stride: usize,
) -> Result<Source, ArchError> {
    let x = b.conv(&format!("{prefix}_conv"), src, out, kernel, stride, kernel / 2, false)?;
    Ok(b.batch_norm(&format!("{prefix}_bn"), x)?)
}

/// 1×1 → 3×3 → 1×1 bottleneck with identity or projection shortcut. The
/// stride sits on the 3×3 convolution.
fn bottleneck<E: Element, R: Rng + ?Sized>(
    b: &mut GraphBuilder<'_, E, R>,
    name: &str,
    input: Source,
    width: usize,
    stride: usize,
    project: bool,
) -> Result<Source, ArchError> {
    let out = width * EXPANSION;
    let shortcut = if project {
        conv_bn(b, &format!("{name}_0"), input, out, 1, stride)?
    } else {
        input
    };
    let x = conv_bn(b, &format!("{name}_1"), input, width, 1, 1)?;
    let x = b.relu(&format!("{name}_1_relu"), x)?;
    let x = conv_bn(b, &format!("{name}_2"), x, width, 3, stride)?;
    let x = b.relu(&format!("{name}_2_relu"), x)?;
    let x = conv_bn(b, &format!("{name}_3"), x, out, 1, 1)?;
    let x = b.add(&format!("{name}_add"), x, shortcut)?;
    Ok(b.relu(&format!("{name}_out"), x)?)
}

pub fn build_resnet50<E: Element, R: Rng + ?Sized>(spec: &NetworkSpec, rng: &mut R) -> Result<Network<E>, ArchError> {
    spec.validate()?;
    spec.require_divisible(32)?;
    let mut b = GraphBuilder::new(&spec.input_shape(), rng);
    let x = b.conv("conv1_conv", Source::Input, spec.channels(64), 7, 2, 3, false)?;
    let x = b.batch_norm("conv1_bn", x)?;
    let x = b.relu("conv1_relu", x)?;
    let mut x = b.max_pool("pool1", x, 3, 2, 1)?;
    for (si, (&blocks, &width)) in RESNET50_STAGES.iter().zip(&STAGE_WIDTHS).enumerate() {
        for bi in 0..blocks {
            let name = format!("conv{}_block{}", si + 2, bi + 1);
            let stride = if si > 0 && bi == 0 { 2 } else { 1 };
            x = bottleneck(&mut b, &name, x, spec.channels(width), stride, bi == 0)?;
        }
    }
    let x = b.global_avg_pool("avg_pool", x)?;
    attach_head(&mut b, x, spec)?;
    Ok(b.finish()?)
}

/// Structure of one residual block recovered from the graph.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ResidualBlockAudit {
    pub add_layer: String,
    /// Kernel sizes of the convolutions on the residual branch, input first.
    pub branch_kernels: Vec<usize>,
    pub projection: bool,
}

fn source_index(src: Source) -> Option<usize> {
    match src {
        Source::Layer(i) => Some(i),
        Source::Input => None,
    }
}

/// Walks every `Add` layer back to the block input and records the residual
/// branch convolutions. Works purely from the layer graph.
pub fn audit_residual_blocks<E: Element>(net: &Network<E>) -> Vec<ResidualBlockAudit> {
    let layers = net.layers();
    let mut out = Vec::new();
    for add in layers.iter().filter(|l| matches!(l.kind(), LayerKind::Add)) {
        let (branch, skip) = (add.inputs()[0], add.inputs()[1]);
        // A projection shortcut is conv → bn reading the block input.
        let (block_input, projection) = match source_index(skip).map(|i| &layers[i]) {
            Some(bn) if matches!(bn.kind(), LayerKind::BatchNorm { .. }) => {
                let conv = &layers[source_index(bn.inputs()[0]).expect("bn reads a layer")];
                (conv.inputs()[0], true)
            }
            _ => (skip, false),
        };
        let mut kernels = Vec::new();
        let mut cur = branch;
        while cur != block_input {
            let Some(i) = source_index(cur) else { break };
            let layer = &layers[i];
            if let LayerKind::Conv2d { kernel_size, .. } = layer.kind() {
                kernels.push(*kernel_size);
            }
            cur = layer.inputs()[0];
        }
        kernels.reverse();
        out.push(ResidualBlockAudit {
            add_layer: add.name().to_string(),
            branch_kernels: kernels,
            projection,
        });
    }
    out
}

/// Block count per stage, read from the `conv{stage}_block{n}_add` names.
pub fn stage_block_counts(audits: &[ResidualBlockAudit]) -> Vec<usize> {
    let mut counts: Vec<(String, usize)> = Vec::new();
    for a in audits {
        let stage = a.add_layer.split('_').next().unwrap_or_default().to_string();
        match counts.last_mut() {
            Some((s, n)) if *s == stage => *n += 1,
            _ => counts.push((stage, 1)),
        }
    }
    counts.into_iter().map(|(_, n)| n).collect()
}
