use std::path::Path;

use super::SplitNetworkState;
use crate::error::{Error, Result};
use crate::format::{self, NamedTensor};

/// Every parameter and running statistic of a network, by slot name.
#[derive(Clone, Debug, PartialEq)]
pub struct ParameterImage {
    pub tensors: Vec<NamedTensor>,
}

impl ParameterImage {
    pub(super) fn capture(state: &SplitNetworkState) -> Self {
        let tensors = state
            .plan
            .slots
            .iter()
            .map(|slot| {
                let src = if slot.is_stat() {
                    &state.norm_stats
                } else {
                    &state.params
                };
                NamedTensor::new(
                    slot.name.clone(),
                    slot.dims.clone(),
                    src[slot.range()].to_vec(),
                )
            })
            .collect();
        ParameterImage { tensors }
    }

    pub(super) fn apply(&self, state: &mut SplitNetworkState) -> Result<()> {
        let plan = state.plan.clone();
        if self.tensors.len() != plan.slots.len() {
            return Err(Error::format(format!(
                "image holds {} tensors, network expects {}",
                self.tensors.len(),
                plan.slots.len()
            )));
        }
        // validate everything before mutating
        for (slot, t) in plan.slots.iter().zip(&self.tensors) {
            if slot.name != t.name || slot.dims != t.dims || t.values.len() != slot.len() {
                return Err(Error::format(format!(
                    "tensor {} {:?} does not match slot {} {:?}",
                    t.name, t.dims, slot.name, slot.dims
                )));
            }
        }
        for (slot, t) in plan.slots.iter().zip(&self.tensors) {
            let dst = if slot.is_stat() {
                &mut state.norm_stats
            } else {
                &mut state.params
            };
            dst[slot.range()].copy_from_slice(&t.values);
        }
        Ok(())
    }

    /// Number of stored scalars (parameters plus statistics).
    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(|t| t.values.len()).sum()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        format::encode(&self.tensors)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        Ok(ParameterImage {
            tensors: format::decode(bytes)?,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        format::write_file(path, &self.tensors)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Ok(ParameterImage {
            tensors: format::read_file(path)?,
        })
    }
}
