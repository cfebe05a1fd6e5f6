//! Minimal reverse-mode neural-network substrate.
//!
//! Everything is built for a single CPU core: feature maps use a
//! channel-major `(C, N, H, W)` layout so 1x1 convolutions reduce to one
//! matrix product, layers store exactly the activations their backward pass
//! needs, and gradients accumulate into a shared [`ParamStore`].
//!
//! The autodiff contract is explicit rather than tape-based: call `forward`
//! once, then `backward` once in reverse order with the upstream gradient.
//! `need_param_grads = false` skips weight-gradient work for passes that only
//! need input gradients (architecture steps).

pub(crate) mod kernels;
mod layers;
mod loss;
mod optim;
mod params;

pub use layers::{
    kaiming_normal, uniform_init, AvgPool, BatchNorm, Conv2d, DwConv, FactorizedReduce,
    GlobalAvgPool, Identity, Linear, MaxPool, PwConv, Relu, Sequential, ZeroOp, BN_EPS,
    BN_MOMENTUM,
};
pub use loss::{softmax_cross_entropy, LossOutput};
pub use optim::{clip_global_norm, cosine_lr, Adam, SgdMomentum};
pub use params::{ParamError, ParamId, ParamStore};

/// Feature map in channel-major layout `(channels, batch, height, width)`.
pub type Feat = ndarray::Array4<f32>;

/// Whether batch-statistics layers use batch or running statistics.
/// Networks without tracked running statistics behave identically in both.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// A differentiable feature-map transformation.
pub trait Layer {
    fn forward(&mut self, ps: &mut ParamStore, x: &Feat, mode: Mode) -> Feat;

    /// Propagates `dy` back through the cached forward pass, accumulating
    /// parameter gradients into `ps` unless `need_param_grads` is false.
    /// Must be called exactly once after the matching `forward`.
    fn backward(&mut self, ps: &mut ParamStore, dy: &Feat, need_param_grads: bool) -> Feat;
}
