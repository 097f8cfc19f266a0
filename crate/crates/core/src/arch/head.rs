use rand::Rng;

use super::{ArchError, NetworkSpec};
use crate::nn::{GraphBuilder, Source};
use crate::tensor::Element;

/// Appends dense→ReLU, dense→ReLU, dense→softmax with the spec's head widths.
pub fn attach_head<E: Element, R: Rng + ?Sized>(
    b: &mut GraphBuilder<'_, E, R>,
    features: Source,
    spec: &NetworkSpec,
) -> Result<Source, ArchError> {
    if b.shape_of(features).len() != 1 {
        return Err(ArchError::NonFlatFeatures(b.shape_of(features).to_vec()));
    }
    let [w1, w2, out] = spec.head_sizes();
    let x = b.dense("head_fc1", features, w1)?;
    let x = b.relu("head_relu1", x)?;
    let x = b.dense("head_fc2", x, w2)?;
    let x = b.relu("head_relu2", x)?;
    let x = b.dense("head_fc3", x, out)?;
    Ok(b.softmax("head_softmax", x)?)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::arch::Backbone;
    use crate::nn::{apply_freeze, trainable_parameter_count, LayerKind};
    use crate::tensor::Tensor;

    #[test]
    fn head_on_2048_features_has_closed_form_count() {
        let spec = NetworkSpec::new(Backbone::Resnet50);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut b = GraphBuilder::<f32, _>::new(&[2048], &mut rng);
        attach_head(&mut b, Source::Input, &spec).unwrap();
        let net = b.finish().unwrap();
        let widths: Vec<usize> = net
            .layers()
            .iter()
            .filter_map(|l| match l.kind() {
                LayerKind::Dense { out_features, .. } => Some(*out_features),
                _ => None,
            })
            .collect();
        assert_eq!(widths, [2048, 1024, 2]);
        let mask = apply_freeze(&net, 3).unwrap();
        let expected = (2048 * 2048 + 2048) + (2048 * 1024 + 1024) + (1024 * 2 + 2);
        assert_eq!(expected, 6_296_578);
        assert_eq!(trainable_parameter_count(&net, &mask).unwrap(), expected);
    }

    #[test]
    fn head_rows_sum_to_one_and_rejects_maps() {
        let spec = NetworkSpec::new(Backbone::Vgg16).with_scale(0.01);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut b = GraphBuilder::<f64, _>::new(&[5], &mut rng);
        attach_head(&mut b, Source::Input, &spec).unwrap();
        let net = b.finish().unwrap();
        let x = Tensor::random_uniform(&[4, 5], -2.0, 2.0, &mut rng);
        let probs = net.predict(x).unwrap();
        for row in probs.data().chunks(2) {
            assert!((row[0] + row[1] - 1.0).abs() < 1e-12);
        }

        let mut b = GraphBuilder::<f64, _>::new(&[2, 3, 3], &mut rng);
        assert!(matches!(
            attach_head(&mut b, Source::Input, &spec),
            Err(ArchError::NonFlatFeatures(_))
        ));
    }
}
