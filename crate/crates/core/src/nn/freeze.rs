use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{Network, NnError};
use crate::tensor::Element;

/// Trainable flag per parameterized layer, keyed by layer name.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FreezeMask {
    trainable: BTreeMap<String, bool>,
}

impl FreezeMask {
    pub fn is_trainable(&self, layer: &str) -> Option<bool> {
        self.trainable.get(layer).copied()
    }

    pub fn trainable_layers(&self) -> impl Iterator<Item = &str> {
        self.trainable.iter().filter(|(_, &t)| t).map(|(n, _)| n.as_str())
    }

    pub fn frozen_layers(&self) -> impl Iterator<Item = &str> {
        self.trainable.iter().filter(|(_, &t)| !t).map(|(n, _)| n.as_str())
    }

    pub fn len(&self) -> usize {
        self.trainable.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trainable.is_empty()
    }

    /// Fails unless the mask covers exactly the parameterized layers of `network`.
    pub fn check_bound<E: Element>(&self, network: &Network<E>) -> Result<(), NnError> {
        let params = network.parameterized_layers();
        if params.len() != self.trainable.len() {
            return Err(NnError::MaskMismatch(format!(
                "mask covers {} layers, network has {} parameterized layers",
                self.trainable.len(),
                params.len()
            )));
        }
        for i in params {
            let name = network.layers()[i].name();
            if !self.trainable.contains_key(name) {
                return Err(NnError::MaskMismatch(format!("layer {name} missing from mask")));
            }
        }
        Ok(())
    }
}

/// Mask leaving only the last `k` parameterized layers (topological order)
/// trainable.
pub fn apply_freeze<E: Element>(network: &Network<E>, k: usize) -> Result<FreezeMask, NnError> {
    let params = network.parameterized_layers();
    if k > params.len() {
        return Err(NnError::FreezeOutOfRange {
            k,
            available: params.len(),
        });
    }
    let cutoff = params.len() - k;
    let trainable = params
        .iter()
        .enumerate()
        .map(|(pos, &i)| (network.layers()[i].name().to_string(), pos >= cutoff))
        .collect();
    Ok(FreezeMask { trainable })
}

pub fn trainable_parameter_count<E: Element>(network: &Network<E>, mask: &FreezeMask) -> Result<usize, NnError> {
    mask.check_bound(network)?;
    Ok(network
        .layers()
        .iter()
        .filter(|l| mask.is_trainable(l.name()) == Some(true))
        .map(|l| l.parameter_count())
        .sum())
}

impl<E: Element> Network<E> {
    pub fn bind_freeze_mask(&mut self, mask: &FreezeMask) -> Result<(), NnError> {
        mask.check_bound(self)?;
        for i in self.parameterized_layers() {
            let t = mask.is_trainable(self.layers()[i].name()) == Some(true);
            self.set_trainable(i, t);
        }
        Ok(())
    }

    pub fn freeze_mask(&self) -> FreezeMask {
        let trainable = self
            .parameterized_layers()
            .into_iter()
            .map(|i| (self.layers()[i].name().to_string(), self.layers()[i].is_trainable()))
            .collect();
        FreezeMask { trainable }
    }
}
