//! Optimizers and schedules: momentum SGD, Adam, cosine annealing, and
//! global-norm gradient clipping.

use ndarray::ArrayD;

use super::{ParamId, ParamStore};

/// Cosine-annealed learning rate: `0.5 * base * (1 + cos(pi * epoch / total))`.
/// Starts at `base` for epoch 0 and reaches 0 at `epoch == total`.
pub fn cosine_lr(base: f64, epoch: usize, total: usize) -> f64 {
    if total == 0 {
        return base;
    }
    0.5 * base * (1.0 + (std::f64::consts::PI * epoch as f64 / total as f64).cos())
}

/// Scales the gradients of `ids` so their global L2 norm does not exceed
/// `max_norm`; returns the pre-clip norm. Mirrors the usual framework
/// behavior, including the small stabilizer in the denominator.
pub fn clip_global_norm(ps: &mut ParamStore, ids: &[ParamId], max_norm: f64) -> f64 {
    let norm = ps.grad_global_norm(ids);
    let coef = max_norm / (norm + 1e-6);
    if coef < 1.0 {
        let c = coef as f32;
        for &id in ids {
            ps.grad_mut(id).mapv_inplace(|g| g * c);
        }
    }
    norm
}

/// SGD with classical momentum (no dampening, no Nesterov):
/// `b <- momentum * b + (g + wd * w)`, `w <- w - lr * b`.
pub struct SgdMomentum {
    momentum: f32,
    weight_decay: f32,
    buffers: Vec<Option<ArrayD<f32>>>,
}

impl SgdMomentum {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        SgdMomentum {
            momentum: momentum as f32,
            weight_decay: weight_decay as f32,
            buffers: Vec::new(),
        }
    }

    /// Momentum buffer for `id`, if a step has touched it.
    pub fn buffer(&self, id: ParamId) -> Option<&ArrayD<f32>> {
        self.buffers.get(id.index()).and_then(|b| b.as_ref())
    }

    pub fn momentum(&self) -> f64 {
        self.momentum as f64
    }

    pub fn weight_decay(&self) -> f64 {
        self.weight_decay as f64
    }

    pub fn step(&mut self, ps: &mut ParamStore, ids: &[ParamId], lr: f64) {
        let lr = lr as f32;
        let (mu, wd) = (self.momentum, self.weight_decay);
        for &id in ids {
            if self.buffers.len() <= id.index() {
                self.buffers.resize(id.index() + 1, None);
            }
            let (value, grad) = ps.value_and_grad_mut(id);
            let buf = self.buffers[id.index()]
                .get_or_insert_with(|| ArrayD::zeros(grad.raw_dim()));
            ndarray::azip!((b in buf.view_mut(), &g in &*grad, &w in value) {
                *b = mu * *b + g + wd * w;
            });
            let buf = self.buffers[id.index()].as_ref().unwrap();
            let value = ps.value_mut(id);
            value.scaled_add(-lr, buf);
        }
    }
}

/// Adam with bias correction and L2 regularization folded into the gradient.
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
    t: i32,
    m: Vec<Option<ArrayD<f32>>>,
    v: Vec<Option<ArrayD<f32>>>,
}

impl Adam {
    pub fn new(lr: f64, betas: (f64, f64), weight_decay: f64) -> Self {
        Adam {
            lr,
            beta1: betas.0,
            beta2: betas.1,
            eps: 1e-8,
            weight_decay,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn step(&mut self, ps: &mut ParamStore, ids: &[ParamId]) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        let (b1, b2) = (self.beta1 as f32, self.beta2 as f32);
        let wd = self.weight_decay as f32;
        for &id in ids {
            let need = id.index() + 1;
            if self.m.len() < need {
                self.m.resize(need, None);
                self.v.resize(need, None);
            }
            let (value, grad) = ps.value_and_grad_mut(id);
            let m = self.m[id.index()].get_or_insert_with(|| ArrayD::zeros(grad.raw_dim()));
            let v = self.v[id.index()].get_or_insert_with(|| ArrayD::zeros(grad.raw_dim()));
            ndarray::azip!((m in m.view_mut(), v in v.view_mut(), &g in &*grad, &w in value) {
                let g = g + wd * w;
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
            });
            let m = self.m[id.index()].as_ref().unwrap();
            let v = self.v[id.index()].as_ref().unwrap();
            let value = ps.value_mut(id);
            let (lr, eps) = (self.lr, self.eps);
            ndarray::azip!((w in value.view_mut(), &m in m, &v in v) {
                let mhat = m as f64 / bc1;
                let vhat = v as f64 / bc2;
                *w -= (lr * mhat / (vhat.sqrt() + eps)) as f32;
            });
        }
    }
}
