use rand::Rng;

use super::{attach_head, ArchError, NetworkSpec};
use crate::nn::{GraphBuilder, Network};
use crate::tensor::Element;

/// Configuration D: conv widths per block, each block closed by a 2×2 max-pool.
pub const VGG16_BLOCKS: [&[usize]; 5] = [
    &[64, 64],
    &[128, 128],
    &[256, 256, 256],
    &[512, 512, 512],
    &[512, 512, 512],
];

pub fn build_vgg16<E: Element, R: Rng + ?Sized>(spec: &NetworkSpec, rng: &mut R) -> Result<Network<E>, ArchError> {
    spec.validate()?;
    spec.require_divisible(32)?;
    let mut b = GraphBuilder::new(&spec.input_shape(), rng);
    let mut x = b.last();
    for (bi, widths) in VGG16_BLOCKS.iter().enumerate() {
        for (ci, &w) in widths.iter().enumerate() {
            let tag = format!("block{}_conv{}", bi + 1, ci + 1);
            x = b.conv(&tag, x, spec.channels(w), 3, 1, 1, true)?;
            x = b.relu(&format!("block{}_relu{}", bi + 1, ci + 1), x)?;
        }
        x = b.max_pool(&format!("block{}_pool", bi + 1), x, 2, 2, 0)?;
    }
    let x = b.flatten("flatten", x)?;
    attach_head(&mut b, x, spec)?;
    Ok(b.finish()?)
}
