//! Flat parameter storage shared by networks and optimizers.
//!
//! Layers hold [`ParamId`] handles instead of owning their tensors, so a
//! whole network's weights can be flattened, checkpointed, clipped by global
//! norm, or updated by an optimizer without walking the layer tree.

use ndarray::ArrayD;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Handle to one tensor in a [`ParamStore`]. Ids are dense indices assigned
/// in registration order, which makes flattened checkpoints reproducible.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Error)]
pub enum ParamError {
    #[error("flat buffer holds {got} scalars but the selected parameters hold {want}")]
    SizeMismatch { want: usize, got: usize },
}

/// Values and gradients for every registered parameter tensor.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    values: Vec<ArrayD<f32>>,
    grads: Vec<ArrayD<f32>>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a tensor and returns its handle. The gradient starts at zero.
    pub fn add(&mut self, value: ArrayD<f32>) -> ParamId {
        let id = ParamId(self.values.len());
        self.grads.push(ArrayD::zeros(value.raw_dim()));
        self.values.push(value);
        id
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    /// Handles for every parameter registered at or after index `start`
    /// (typically `ps.len()` captured before building a subnetwork).
    pub fn ids_from(&self, start: usize) -> Vec<ParamId> {
        (start..self.values.len()).map(ParamId).collect()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn value(&self, id: ParamId) -> &ArrayD<f32> {
        &self.values[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut ArrayD<f32> {
        &mut self.values[id.0]
    }

    pub fn grad(&self, id: ParamId) -> &ArrayD<f32> {
        &self.grads[id.0]
    }

    pub fn grad_mut(&mut self, id: ParamId) -> &mut ArrayD<f32> {
        &mut self.grads[id.0]
    }

    /// Simultaneous read access to a value and write access to its gradient,
    /// for backward kernels that consume one while accumulating the other.
    pub fn value_and_grad_mut(&mut self, id: ParamId) -> (&ArrayD<f32>, &mut ArrayD<f32>) {
        (&self.values[id.0], &mut self.grads[id.0])
    }

    pub fn zero_grads(&mut self) {
        for g in &mut self.grads {
            g.fill(0.0);
        }
    }

    /// Total scalar count across the given parameters.
    pub fn num_scalars(&self, ids: &[ParamId]) -> usize {
        ids.iter().map(|id| self.values[id.0].len()).sum()
    }

    pub fn values_finite(&self, ids: &[ParamId]) -> bool {
        ids.iter()
            .all(|id| self.values[id.0].iter().all(|v| v.is_finite()))
    }

    pub fn grads_finite(&self, ids: &[ParamId]) -> bool {
        ids.iter()
            .all(|id| self.grads[id.0].iter().all(|v| v.is_finite()))
    }

    /// L2 norm over the gradients of the given parameters, accumulated in f64.
    pub fn grad_global_norm(&self, ids: &[ParamId]) -> f64 {
        ids.iter()
            .map(|id| {
                self.grads[id.0]
                    .iter()
                    .map(|&g| (g as f64) * (g as f64))
                    .sum::<f64>()
            })
            .sum::<f64>()
            .sqrt()
    }

    /// Concatenates the given parameter values in id order.
    pub fn flatten_values(&self, ids: &[ParamId]) -> Vec<f32> {
        let mut out = Vec::with_capacity(self.num_scalars(ids));
        for id in ids {
            out.extend(self.values[id.0].iter().copied());
        }
        out
    }

    /// Concatenates the given parameter gradients in id order.
    pub fn flatten_grads(&self, ids: &[ParamId]) -> Vec<f32> {
        let mut out = Vec::with_capacity(self.num_scalars(ids));
        for id in ids {
            out.extend(self.grads[id.0].iter().copied());
        }
        out
    }

    /// Restores parameter values from a buffer written by
    /// [`flatten_values`](Self::flatten_values) with the same id list.
    pub fn load_values(&mut self, ids: &[ParamId], data: &[f32]) -> Result<(), ParamError> {
        let want = self.num_scalars(ids);
        if data.len() != want {
            return Err(ParamError::SizeMismatch {
                want,
                got: data.len(),
            });
        }
        let mut off = 0;
        for id in ids {
            let v = &mut self.values[id.0];
            let n = v.len();
            for (dst, src) in v.iter_mut().zip(&data[off..off + n]) {
                *dst = *src;
            }
            off += n;
        }
        Ok(())
    }
}
