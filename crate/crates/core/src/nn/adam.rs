use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{Network, NnError, ParamGrads};
use crate::tensor::{Element, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self::with_lr(1e-3)
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug)]
struct Moments<E> {
    first: Vec<E>,
    second: Vec<E>,
}

/// One parameter offered to [`AdamState::update`]. `grad` is `None` when the
/// tape produced no gradient, which is an error for a trainable parameter.
pub struct ParamUpdate<'a, E> {
    pub key: String,
    pub value: &'a mut Tensor<E>,
    pub grad: Option<&'a Tensor<E>>,
}

/// Adam with bias correction. Moment buffers are created lazily per
/// parameter key, so parameters never offered (frozen ones) have no state.
#[derive(Clone, Debug)]
pub struct AdamState<E> {
    config: AdamConfig,
    step: u64,
    moments: BTreeMap<String, Moments<E>>,
}

impl<E: Element> AdamState<E> {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn config(&self) -> &AdamConfig {
        &self.config
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn first_moment(&self, key: &str) -> Option<&[E]> {
        self.moments.get(key).map(|m| m.first.as_slice())
    }

    pub fn second_moment(&self, key: &str) -> Option<&[E]> {
        self.moments.get(key).map(|m| m.second.as_slice())
    }

    /// Applies one Adam step to every offered parameter. Nothing is modified
    /// if any parameter lacks a gradient or has a mismatched one.
    pub fn update<'a>(&mut self, params: impl IntoIterator<Item = ParamUpdate<'a, E>>) -> Result<(), NnError>
    where
        E: 'a,
    {
        let params: Vec<ParamUpdate<'a, E>> = params.into_iter().collect();
        for p in &params {
            match p.grad {
                None => return Err(NnError::MissingGradient(p.key.clone())),
                Some(g) if g.shape() != p.value.shape() => return Err(NnError::GradientShape(p.key.clone())),
                Some(_) => {}
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let c = self.config;
        let bias1 = 1.0 - c.beta1.powi(t);
        let bias2 = 1.0 - c.beta2.powi(t);
        let (b1, b2) = (E::from_f64(c.beta1), E::from_f64(c.beta2));
        let (r1, r2) = (E::from_f64(1.0 - c.beta1), E::from_f64(1.0 - c.beta2));
        let step_size = E::from_f64(c.lr / bias1);
        let inv_bias2 = E::from_f64(1.0 / bias2);
        let eps = E::from_f64(c.eps);
        for p in params {
            let grad = p.grad.expect("checked above").data();
            let n = grad.len();
            let m = self.moments.entry(p.key).or_insert_with(|| Moments {
                first: vec![E::ZERO; n],
                second: vec![E::ZERO; n],
            });
            for (((w, &g), m1), m2) in p
                .value
                .data_mut()
                .iter_mut()
                .zip(grad)
                .zip(m.first.iter_mut())
                .zip(m.second.iter_mut())
            {
                *m1 = b1 * *m1 + r1 * g;
                *m2 = b2 * *m2 + r2 * g * g;
                *w -= step_size * *m1 / ((*m2 * inv_bias2).sqrt() + eps);
            }
        }
        Ok(())
    }
}

impl<E: Element> Network<E> {
    /// One optimizer step over the trainable layers; frozen layers are not
    /// offered to the optimizer at all.
    pub fn adam_step(&mut self, state: &mut AdamState<E>, grads: &ParamGrads<E>) -> Result<(), NnError> {
        let mut updates = Vec::new();
        for (layer, lgrads) in self.layers_mut().iter_mut().zip(grads) {
            if !layer.is_trainable() {
                continue;
            }
            let lname = layer.name().to_string();
            for (p, g) in layer.params_mut().iter_mut().zip(lgrads) {
                updates.push(ParamUpdate {
                    key: format!("{lname}/{}", p.name),
                    value: &mut p.value,
                    grad: g.as_ref(),
                });
            }
        }
        state.update(updates)
    }
}
