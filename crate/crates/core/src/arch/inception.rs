use std::collections::BTreeSet;

use rand::Rng;

use super::{attach_head, ArchError, InceptionVariant, NetworkSpec};
use crate::nn::{GraphBuilder, LayerKind, Network, Source};
use crate::tensor::Element;

/// Smallest input side accepted by the stem; the last module then still
/// sees a 1×1 map.
pub const INCEPTION_MIN_RESOLUTION: usize = 32;

/// Pool-projection widths of the three 35×35-grid modules.
const MODULE_A_POOL: [usize; 3] = [32, 64, 64];
/// Bottleneck widths of the four 17×17-grid modules.
const MODULE_B_MID: [usize; 4] = [128, 160, 160, 192];

struct Builder<'a, 'r, E, R: Rng + ?Sized> {
    b: &'a mut GraphBuilder<'r, E, R>,
    spec: &'a NetworkSpec,
}

impl<E: Element, R: Rng + ?Sized> Builder<'_, '_, E, R> {
    /// conv (no bias) → batch norm → ReLU, "same" padding.
    fn unit(&mut self, name: &str, src: Source, out: usize, kernel: usize, stride: usize) -> Result<Source, ArchError> {
        let out = self.spec.channels(out);
        let x = self
            .b
            .conv(&format!("{name}_conv"), src, out, kernel, stride, kernel / 2, false)?;
        let x = self.b.batch_norm(&format!("{name}_bn"), x)?;
        Ok(self.b.relu(&format!("{name}_relu"), x)?)
    }

    /// Wide branch: 1×1 reduction then either one k×k convolution or, in the
    /// factorized variant, a stack of 3×3 convolutions with the same reach.
    fn wide(&mut self, name: &str, src: Source, mid: usize, out: usize, kernel: usize) -> Result<Source, ArchError> {
        let mut x = self.unit(&format!("{name}_1"), src, mid, 1, 1)?;
        match self.spec.inception_variant {
            InceptionVariant::Classic => self.unit(&format!("{name}_2"), x, out, kernel, 1),
            InceptionVariant::Factorized => {
                let steps = (kernel - 1) / 2;
                for s in 0..steps {
                    let width = if s + 1 == steps { out } else { mid };
                    x = self.unit(&format!("{name}_{}", s + 2), x, width, 3, 1)?;
                }
                Ok(x)
            }
        }
    }

    fn pool_branch(&mut self, name: &str, src: Source, out: usize) -> Result<Source, ArchError> {
        let x = self.b.avg_pool(&format!("{name}_pool"), src, 3, 1, 1)?;
        self.unit(&format!("{name}_proj"), x, out, 1, 1)
    }

    #[allow(clippy::too_many_arguments)]
    fn module(
        &mut self,
        name: &str,
        src: Source,
        b1: usize,
        b3: (usize, usize),
        b5: (usize, usize),
        pool: usize,
    ) -> Result<Source, ArchError> {
        let x1 = self.unit(&format!("{name}_b1x1"), src, b1, 1, 1)?;
        let x3 = self.wide(&format!("{name}_b3x3"), src, b3.0, b3.1, 3)?;
        let x5 = self.wide(&format!("{name}_b5x5"), src, b5.0, b5.1, 5)?;
        let xp = self.pool_branch(&format!("{name}_bpool"), src, pool)?;
        Ok(self.b.concat(name, &[x1, x3, x5, xp])?)
    }

    fn reduction_a(&mut self, name: &str, src: Source) -> Result<Source, ArchError> {
        let x3 = self.unit(&format!("{name}_b3x3"), src, 384, 3, 2)?;
        let d = self.unit(&format!("{name}_b3x3dbl_1"), src, 64, 1, 1)?;
        let d = self.unit(&format!("{name}_b3x3dbl_2"), d, 96, 3, 1)?;
        let d = self.unit(&format!("{name}_b3x3dbl_3"), d, 96, 3, 2)?;
        let p = self.b.max_pool(&format!("{name}_bpool"), src, 3, 2, 1)?;
        Ok(self.b.concat(name, &[x3, d, p])?)
    }

    fn reduction_b(&mut self, name: &str, src: Source) -> Result<Source, ArchError> {
        let a = self.unit(&format!("{name}_b3x3_1"), src, 192, 1, 1)?;
        let a = self.unit(&format!("{name}_b3x3_2"), a, 320, 3, 2)?;
        let d = self.unit(&format!("{name}_b3x3dbl_1"), src, 192, 1, 1)?;
        let d = self.unit(&format!("{name}_b3x3dbl_2"), d, 192, 3, 1)?;
        let d = self.unit(&format!("{name}_b3x3dbl_3"), d, 192, 3, 2)?;
        let p = self.b.max_pool(&format!("{name}_bpool"), src, 3, 2, 1)?;
        Ok(self.b.concat(name, &[a, d, p])?)
    }
}

/// Inception backbone: convolutional stem, three modules on the finest
/// grid, a grid reduction, four modules, a second reduction, two wide
/// modules (2048 channels at full width), global average pooling and the
/// classification head. Every convolution is "same"-padded so small
/// inputs remain valid.
pub fn build_inception_v3<E: Element, R: Rng + ?Sized>(
    spec: &NetworkSpec,
    rng: &mut R,
) -> Result<Network<E>, ArchError> {
    spec.validate()?;
    let (h, w) = spec.input_resolution;
    if h < INCEPTION_MIN_RESOLUTION || w < INCEPTION_MIN_RESOLUTION {
        return Err(ArchError::Resolution {
            backbone: spec.backbone,
            resolution: spec.input_resolution,
            reason: format!("stem needs at least {INCEPTION_MIN_RESOLUTION}x{INCEPTION_MIN_RESOLUTION}"),
        });
    }
    let mut gb = GraphBuilder::new(&spec.input_shape(), rng);
    let mut b = Builder { b: &mut gb, spec };
    let x = b.unit("stem1", Source::Input, 32, 3, 2)?;
    let x = b.unit("stem2", x, 32, 3, 1)?;
    let x = b.unit("stem3", x, 64, 3, 1)?;
    let x = b.b.max_pool("stem_pool1", x, 3, 2, 1)?;
    let x = b.unit("stem4", x, 80, 1, 1)?;
    let x = b.unit("stem5", x, 192, 3, 1)?;
    let mut x = b.b.max_pool("stem_pool2", x, 3, 2, 1)?;

    let mut idx = 0;
    for pool in MODULE_A_POOL {
        x = b.module(&format!("mixed{idx}"), x, 64, (64, 96), (48, 64), pool)?;
        idx += 1;
    }
    x = b.reduction_a(&format!("mixed{idx}"), x)?;
    idx += 1;
    for mid in MODULE_B_MID {
        x = b.module(&format!("mixed{idx}"), x, 192, (mid, 192), (mid, 192), 192)?;
        idx += 1;
    }
    x = b.reduction_b(&format!("mixed{idx}"), x)?;
    idx += 1;
    for _ in 0..2 {
        x = b.module(&format!("mixed{idx}"), x, 320, (384, 768), (448, 768), 192)?;
        idx += 1;
    }
    let x = gb.global_avg_pool("avg_pool", x)?;
    attach_head(&mut gb, x, spec)?;
    Ok(gb.finish()?)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BranchAudit {
    /// Convolution kernel sizes along the branch, input first.
    pub kernels: Vec<usize>,
    pub pooled: bool,
    pub out_channels: usize,
}

impl BranchAudit {
    /// Spatial reach of the branch's convolutions: `1 + Σ(k - 1)`.
    pub fn receptive_field(&self) -> usize {
        1 + self.kernels.iter().map(|k| k - 1).sum::<usize>()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct InceptionBlockAudit {
    pub concat_layer: String,
    pub branches: Vec<BranchAudit>,
    pub out_channels: usize,
}

impl InceptionBlockAudit {
    /// Largest kernel of each convolution-only branch.
    pub fn conv_kernel_set(&self) -> BTreeSet<usize> {
        self.branches
            .iter()
            .filter(|b| !b.pooled)
            .filter_map(|b| b.kernels.iter().copied().max())
            .collect()
    }

    pub fn has_pool_branch(&self) -> bool {
        self.branches.iter().any(|b| b.pooled)
    }
}

/// Recovers every concatenation block from the graph: each branch is traced
/// back along single-input layers to the source shared by all branches.
pub fn audit_inception_blocks<E: Element>(net: &Network<E>) -> Vec<InceptionBlockAudit> {
    let layers = net.layers();
    let chain = |mut src: Source| {
        let mut out = vec![src];
        while let Source::Layer(i) = src {
            if layers[i].inputs().len() != 1 || matches!(layers[i].kind(), LayerKind::Concat) {
                break;
            }
            src = layers[i].inputs()[0];
            out.push(src);
        }
        out
    };
    let mut audits = Vec::new();
    for concat in layers.iter().filter(|l| matches!(l.kind(), LayerKind::Concat)) {
        let chains: Vec<Vec<Source>> = concat.inputs().iter().map(|&s| chain(s)).collect();
        let Some(root) = chains[0].iter().find(|s| chains.iter().all(|c| c.contains(s))).copied() else {
            continue;
        };
        let branches = chains
            .iter()
            .zip(concat.inputs())
            .map(|(c, &head)| {
                let mut kernels = Vec::new();
                let mut pooled = false;
                for s in c.iter().take_while(|&&s| s != root) {
                    let Source::Layer(i) = *s else { break };
                    match layers[i].kind() {
                        LayerKind::Conv2d { kernel_size, .. } => kernels.push(*kernel_size),
                        LayerKind::MaxPool { .. } | LayerKind::AvgPool { .. } => pooled = true,
                        _ => {}
                    }
                }
                kernels.reverse();
                let out_channels = match head {
                    Source::Layer(i) => layers[i].output_shape()[0],
                    Source::Input => net.input_shape()[0],
                };
                BranchAudit {
                    kernels,
                    pooled,
                    out_channels,
                }
            })
            .collect();
        audits.push(InceptionBlockAudit {
            concat_layer: concat.name().to_string(),
            branches,
            out_channels: concat.output_shape()[0],
        });
    }
    audits
}
