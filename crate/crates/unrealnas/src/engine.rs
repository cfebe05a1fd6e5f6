//! Bi-level differentiable search and the plain fixed-network trainer.
//!
//! The search alternates, per step, one Adam update of the architecture
//! parameters alpha on a validation batch with one momentum-SGD update of
//! the weights W on a training batch, after a warm-up phase that updates W
//! only. The weight learning rate follows a cosine schedule from `w_lr`
//! to zero across the whole run (warm-up included). Any non-finite loss or
//! gradient aborts with the partial trace preserved.

use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datagen::{DatasetView, SplitPair};
use crate::nn::{
    clip_global_norm, cosine_lr, softmax_cross_entropy, Adam, Feat, Mode, ParamId, ParamStore,
    SgdMomentum,
};
use crate::rng;
use crate::searchspace::{
    build_discrete, count_op, derive_genotype, CellGenotype, DiscreteNet, GenotypeMeta, Network,
    OpKind, SearchSpaceError, SuperNet, SuperNetConfig,
};

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("classifier width {net} does not match dataset class count {data}")]
    ClassifierMismatch { net: usize, data: usize },
    #[error("empty dataset view passed to the trainer")]
    EmptyView,
    #[error("search diverged at epoch {epoch}: {reason}")]
    Diverged {
        epoch: usize,
        reason: String,
        /// Records for every epoch completed before the divergence.
        trace: Box<SearchTrace>,
    },
    #[error("training diverged at epoch {epoch}: {reason}")]
    DivergedTraining {
        epoch: usize,
        reason: String,
        /// Metrics for every epoch completed before the divergence.
        report: Box<TrainReport>,
    },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    SearchSpace(#[from] SearchSpaceError),
    #[error("checkpoint/trace io on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// A non-finite loss or gradient inside a single step; the loop decorates it
/// with the epoch and partial artifacts.
#[derive(Debug, Error)]
#[error("{0}")]
pub struct Divergence(pub String);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BilevelOrder {
    FirstOrder,
    SecondOrder,
}

/// Hyperparameters of the bi-level search.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchConfig {
    pub warmup_epochs: usize,
    pub search_epochs: usize,
    pub batch_size: usize,
    /// Initial weight learning rate; cosine-decayed to zero over the run.
    pub w_lr: f64,
    pub w_momentum: f64,
    pub w_weight_decay: f64,
    pub a_lr: f64,
    pub a_betas: (f64, f64),
    pub a_weight_decay: f64,
    /// Global-norm bound applied to the weight gradients.
    pub grad_clip: f64,
    pub order: BilevelOrder,
    pub seed: u64,
}

impl SearchConfig {
    /// Unreal-task defaults: weight decay zeroed on both levels.
    pub fn unreal(seed: u64) -> Self {
        SearchConfig {
            warmup_epochs: 5,
            search_epochs: 50,
            batch_size: 64,
            w_lr: 0.025,
            w_momentum: 0.9,
            w_weight_decay: 0.0,
            a_lr: 3e-4,
            a_betas: (0.5, 0.99),
            a_weight_decay: 0.0,
            grad_clip: 5.0,
            order: BilevelOrder::FirstOrder,
            seed,
        }
    }

    /// Real-task defaults: standard DARTS weight decay on both levels.
    pub fn real(seed: u64) -> Self {
        SearchConfig {
            w_weight_decay: 3e-4,
            a_weight_decay: 1e-3,
            ..SearchConfig::unreal(seed)
        }
    }

    pub fn total_epochs(&self) -> usize {
        self.warmup_epochs + self.search_epochs
    }

    /// Rejects plainly unusable settings. `search_epochs = 0` is allowed:
    /// it degenerates to warm-up-only training and the zero-alpha genotype.
    pub fn validate(&self) -> Result<(), EngineError> {
        if self.batch_size == 0 {
            return Err(EngineError::InvalidConfig("batch_size must be >= 1".into()));
        }
        for (name, v) in [
            ("w_lr", self.w_lr),
            ("w_momentum", self.w_momentum),
            ("w_weight_decay", self.w_weight_decay),
            ("a_lr", self.a_lr),
            ("a_weight_decay", self.a_weight_decay),
            ("grad_clip", self.grad_clip),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(EngineError::InvalidConfig(format!(
                    "{name} must be finite and non-negative, got {v}"
                )));
            }
        }
        let (b1, b2) = self.a_betas;
        if !(0.0..1.0).contains(&b1) || !(0.0..1.0).contains(&b2) {
            return Err(EngineError::InvalidConfig(format!(
                "a_betas must lie in [0,1), got ({b1}, {b2})"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub loss: f64,
    pub acc: f64,
}

/// One completed search epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub train_acc: f64,
    pub val_acc: f64,
    /// `count_op(genotype, skip_connect)` for the genotype snapshot below.
    pub skip_count: usize,
    pub genotype: CellGenotype,
    /// Seconds since the start of the search.
    pub wallclock: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SearchTrace {
    pub records: Vec<EpochRecord>,
}

impl SearchTrace {
    /// One JSON object per epoch, newline-delimited.
    pub fn to_ndjson(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("record serializes"));
            out.push('\n');
        }
        out
    }

    pub fn write_ndjson(&self, path: &Path) -> Result<(), EngineError> {
        std::fs::write(path, self.to_ndjson()).map_err(|source| EngineError::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn read_ndjson(path: &Path) -> Result<Self, EngineError> {
        let text = std::fs::read_to_string(path).map_err(|source| EngineError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let mut records = Vec::new();
        for line in text.lines() {
            if line.trim().is_empty() {
                continue;
            }
            records.push(serde_json::from_str(line)?);
        }
        Ok(SearchTrace { records })
    }
}

#[derive(Debug, Clone)]
pub struct SearchOutput {
    pub genotype: CellGenotype,
    pub trace: SearchTrace,
}

#[derive(Debug, Clone, Copy)]
pub struct StepStats {
    pub loss: f64,
    pub correct: usize,
    pub n: usize,
}

// ---------------------------------------------------------------------------
// Batch plumbing

fn shuffled_order(seed: u64, tag: &str, epoch: usize, n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::stream(seed, tag, epoch as u64));
    order
}

fn batch_ranges(n: usize, batch: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    let mut start = 0;
    while start < n {
        let end = (start + batch).min(n);
        out.push((start, end));
        start = end;
    }
    out
}

/// Forward-only pass over a view in deterministic index order.
pub fn eval_view<N: Network>(
    net: &mut N,
    ps: &mut ParamStore,
    view: &DatasetView,
    batch: usize,
    mode: Mode,
) -> Result<Metrics, Divergence> {
    let n = view.len();
    let mut loss_sum = 0f64;
    let mut correct = 0usize;
    // The deterministic transforms ignore the rng; REAL eval views use
    // Normalize, so this stream is never consumed in practice.
    let mut r = rng::stream(0, "eval_noop", 0);
    for (start, end) in batch_ranges(n, batch) {
        let idxs: Vec<usize> = (start..end).collect();
        let (x, y) = view.gather(&idxs, &mut r);
        let logits = net.forward(ps, &x, mode);
        let out = softmax_cross_entropy(&logits, &y);
        if !out.loss.is_finite() {
            return Err(Divergence(format!("non-finite eval loss {}", out.loss)));
        }
        loss_sum += out.loss * (end - start) as f64;
        correct += out.correct;
    }
    Ok(Metrics {
        loss: loss_sum / n as f64,
        acc: correct as f64 / n as f64,
    })
}

// ---------------------------------------------------------------------------
// Single steps

/// One first-order alpha update: Adam on alpha for one validation batch; W
/// untouched.
pub fn alpha_step(
    ps: &mut ParamStore,
    net: &mut SuperNet,
    adam: &mut Adam,
    alpha_ids: &[ParamId],
    x: &Feat,
    y: &[u32],
) -> Result<StepStats, Divergence> {
    ps.zero_grads();
    let logits = net.forward(ps, x, Mode::Train);
    let out = softmax_cross_entropy(&logits, y);
    if !out.loss.is_finite() {
        return Err(Divergence(format!("non-finite validation loss {}", out.loss)));
    }
    net.backward(ps, &out.dlogits, false);
    if !ps.grads_finite(alpha_ids) {
        return Err(Divergence("non-finite alpha gradient".into()));
    }
    adam.step(ps, alpha_ids);
    Ok(StepStats {
        loss: out.loss,
        correct: out.correct,
        n: y.len(),
    })
}

/// One second-order alpha update with the unrolled-W correction:
/// evaluate the validation gradient at `W' = W − ξ·(momentum buffer + dW)`,
/// then subtract the finite-difference Hessian-vector term.
#[allow(clippy::too_many_arguments)]
pub fn alpha_step_unrolled(
    ps: &mut ParamStore,
    net: &mut SuperNet,
    adam: &mut Adam,
    sgd: &SgdMomentum,
    cfg: &SearchConfig,
    xi: f64,
    val: (&Feat, &[u32]),
    train: (&Feat, &[u32]),
) -> Result<StepStats, Divergence> {
    let alpha_ids: Vec<ParamId> = net.alpha_ids();
    let weight_ids: Vec<ParamId> = net.weight_ids().to_vec();
    let w0 = ps.flatten_values(&weight_ids);

    // dW L_train(W, alpha) at the current point.
    ps.zero_grads();
    let logits = net.forward(ps, train.0, Mode::Train);
    let out = softmax_cross_entropy(&logits, train.1);
    if !out.loss.is_finite() {
        return Err(Divergence(format!("non-finite train loss {}", out.loss)));
    }
    net.backward(ps, &out.dlogits, true);

    // W' = W − ξ (μ·buffer + dW + wd·W), mirroring one virtual SGD step.
    let (mu, wd) = (sgd.momentum() as f32, cfg.w_weight_decay as f32);
    for &id in &weight_ids {
        let buf = sgd.buffer(id).cloned();
        let grad = ps.grad(id).clone();
        let value = ps.value_mut(id);
        match buf {
            Some(b) => ndarray::azip!((w in value, &g in &grad, &m in &b) {
                *w -= xi as f32 * (mu * m + g + wd * *w);
            }),
            None => ndarray::azip!((w in value, &g in &grad) {
                *w -= xi as f32 * (g + wd * *w);
            }),
        }
    }

    // Validation gradient at the unrolled point: g_alpha and v = dW' L_val.
    ps.zero_grads();
    let logits = net.forward(ps, val.0, Mode::Train);
    let vout = softmax_cross_entropy(&logits, val.1);
    if !vout.loss.is_finite() {
        return Err(Divergence(format!("non-finite validation loss {}", vout.loss)));
    }
    net.backward(ps, &vout.dlogits, true);
    let g_alpha = ps.flatten_grads(&alpha_ids);
    let v = ps.flatten_grads(&weight_ids);
    let v_norm = v.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>().sqrt();
    if !v_norm.is_finite() {
        return Err(Divergence("non-finite unrolled weight gradient".into()));
    }

    // Finite-difference Hessian-vector product around the ORIGINAL W.
    let eps = 0.01 / v_norm.max(1e-12);
    let mut w_plus = w0.clone();
    for (w, &vi) in w_plus.iter_mut().zip(&v) {
        *w += eps as f32 * vi;
    }
    let grad_alpha_at = |ps: &mut ParamStore,
                        net: &mut SuperNet,
                        weights: &[f32]|
     -> Result<Vec<f32>, Divergence> {
        ps.load_values(&weight_ids, weights).expect("weight shape");
        ps.zero_grads();
        let logits = net.forward(ps, train.0, Mode::Train);
        let out = softmax_cross_entropy(&logits, train.1);
        if !out.loss.is_finite() {
            return Err(Divergence(format!("non-finite train loss {}", out.loss)));
        }
        net.backward(ps, &out.dlogits, false);
        Ok(ps.flatten_grads(&alpha_ids))
    };
    let gp = grad_alpha_at(ps, net, &w_plus)?;
    let mut w_minus = w0.clone();
    for (w, &vi) in w_minus.iter_mut().zip(&v) {
        *w -= eps as f32 * vi;
    }
    let gm = grad_alpha_at(ps, net, &w_minus)?;

    // Final gradient: g_alpha − ξ/(2ε) (g+ − g−); restore W and take the
    // Adam step on it.
    ps.load_values(&weight_ids, &w0).expect("weight shape");
    ps.zero_grads();
    let scale = (xi / (2.0 * eps)) as f32;
    let mut flat = Vec::with_capacity(g_alpha.len());
    for i in 0..g_alpha.len() {
        flat.push(g_alpha[i] - scale * (gp[i] - gm[i]));
    }
    if flat.iter().any(|v| !v.is_finite()) {
        return Err(Divergence("non-finite second-order alpha gradient".into()));
    }
    let mut cursor = 0;
    for &id in &alpha_ids {
        let g = ps.grad_mut(id);
        let len = g.len();
        g.as_slice_mut()
            .expect("alpha contiguous")
            .copy_from_slice(&flat[cursor..cursor + len]);
        cursor += len;
    }
    adam.step(ps, &alpha_ids);
    Ok(StepStats {
        loss: vout.loss,
        correct: vout.correct,
        n: val.1.len(),
    })
}

/// One momentum-SGD weight update at the given rate, with global-norm
/// gradient clipping.
#[allow(clippy::too_many_arguments)]
pub fn weight_step<N: Network>(
    ps: &mut ParamStore,
    net: &mut N,
    sgd: &mut SgdMomentum,
    x: &Feat,
    y: &[u32],
    lr: f64,
    grad_clip: f64,
) -> Result<StepStats, Divergence> {
    ps.zero_grads();
    let logits = net.forward(ps, x, Mode::Train);
    let out = softmax_cross_entropy(&logits, y);
    if !out.loss.is_finite() {
        return Err(Divergence(format!("non-finite training loss {}", out.loss)));
    }
    net.backward(ps, &out.dlogits, true);
    let ids: Vec<ParamId> = net.weight_ids().to_vec();
    let norm = clip_global_norm(ps, &ids, grad_clip);
    if !norm.is_finite() {
        return Err(Divergence(format!("non-finite weight gradient norm {norm}")));
    }
    sgd.step(ps, &ids, lr);
    Ok(StepStats {
        loss: out.loss,
        correct: out.correct,
        n: y.len(),
    })
}

// ---------------------------------------------------------------------------
// The bi-level search loop

/// Runs warm-up plus alternating bi-level optimization and returns the final
/// genotype with the per-epoch trace.
pub fn search(
    ps: &mut ParamStore,
    net: &mut SuperNet,
    split: &SplitPair,
    cfg: &SearchConfig,
) -> Result<SearchOutput, EngineError> {
    cfg.validate()?;
    let d = split.train.num_classes() as usize;
    if net.config.num_classes != d {
        return Err(EngineError::ClassifierMismatch {
            net: net.config.num_classes,
            data: d,
        });
    }
    if split.train.is_empty() || split.val.is_empty() {
        return Err(EngineError::EmptyView);
    }

    let started = Instant::now();
    let total = cfg.total_epochs();
    let kind = split.train.kind().to_string();
    let alpha_ids = net.alpha_ids();
    let mut sgd = SgdMomentum::new(cfg.w_momentum, cfg.w_weight_decay);
    let mut adam = Adam::new(cfg.a_lr, cfg.a_betas, cfg.a_weight_decay);
    let mut trace = SearchTrace::default();

    for epoch in 0..total {
        let lr = cosine_lr(cfg.w_lr, epoch, total);
        let train_order = shuffled_order(cfg.seed, "search_train_order", epoch, split.train.len());
        let val_order = shuffled_order(cfg.seed, "search_val_order", epoch, split.val.len());
        let train_batches = batch_ranges(train_order.len(), cfg.batch_size);
        let val_batches = batch_ranges(val_order.len(), cfg.batch_size);
        let mut aug_train = rng::stream(cfg.seed, "search_train_augment", epoch as u64);
        let mut aug_val = rng::stream(cfg.seed, "search_val_augment", epoch as u64);

        let mut train_loss = 0f64;
        let mut train_correct = 0usize;
        let diverged = |e: Divergence, trace: &SearchTrace| EngineError::Diverged {
            epoch,
            reason: e.0,
            trace: Box::new(trace.clone()),
        };

        for (s, &(bs, be)) in train_batches.iter().enumerate() {
            if epoch >= cfg.warmup_epochs {
                let (vs, ve) = val_batches[s % val_batches.len()];
                let vidx: Vec<usize> = val_order[vs..ve].to_vec();
                let (vx, vy) = split.val.gather(&vidx, &mut aug_val);
                match cfg.order {
                    BilevelOrder::FirstOrder => {
                        alpha_step(ps, net, &mut adam, &alpha_ids, &vx, &vy)
                            .map_err(|e| diverged(e, &trace))?;
                    }
                    BilevelOrder::SecondOrder => {
                        let tidx: Vec<usize> = train_order[bs..be].to_vec();
                        // The unrolled step consumes its own copy of the
                        // train batch with an independent augmentation draw.
                        let mut aug2 =
                            rng::stream(cfg.seed, "search_unroll_augment", (epoch * 100_000 + s) as u64);
                        let (tx, ty) = split.train.gather(&tidx, &mut aug2);
                        alpha_step_unrolled(
                            ps,
                            net,
                            &mut adam,
                            &sgd,
                            cfg,
                            lr,
                            (&vx, &vy),
                            (&tx, &ty),
                        )
                        .map_err(|e| diverged(e, &trace))?;
                    }
                }
            }
            let tidx: Vec<usize> = train_order[bs..be].to_vec();
            let (tx, ty) = split.train.gather(&tidx, &mut aug_train);
            let stats = weight_step(ps, net, &mut sgd, &tx, &ty, lr, cfg.grad_clip)
                .map_err(|e| diverged(e, &trace))?;
            train_loss += stats.loss * stats.n as f64;
            train_correct += stats.correct;
        }

        let val_metrics = eval_view(net, ps, &split.val, cfg.batch_size, Mode::Train)
            .map_err(|e| diverged(e, &trace))?;
        let genotype = derive_genotype(
            ps,
            &net.arch,
            GenotypeMeta {
                seed: cfg.seed,
                dataset: kind.clone(),
                epoch,
            },
        )?;
        let skip_count = count_op(&genotype, OpKind::SkipConnect);
        trace.records.push(EpochRecord {
            epoch,
            train_loss: train_loss / split.train.len() as f64,
            val_loss: val_metrics.loss,
            train_acc: train_correct as f64 / split.train.len() as f64,
            val_acc: val_metrics.acc,
            skip_count,
            genotype,
            wallclock: started.elapsed().as_secs_f64(),
        });
    }

    let genotype = derive_genotype(
        ps,
        &net.arch,
        GenotypeMeta {
            seed: cfg.seed,
            dataset: kind,
            epoch: total.saturating_sub(1),
        },
    )?;
    Ok(SearchOutput { genotype, trace })
}

// ---------------------------------------------------------------------------
// Fixed-network training (retraining and probe nets)

/// Hyperparameters for training a discrete network from scratch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Initial rate; cosine-decayed to zero over `epochs`.
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub grad_clip: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 100,
            batch_size: 64,
            lr: 0.025,
            momentum: 0.9,
            weight_decay: 3e-4,
            grad_clip: 5.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train: Metrics,
    pub val: Metrics,
}

/// Per-epoch metrics of a fixed-network run. `convergence_epoch` is filled
/// by the analysis module, not the trainer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub initial_train: Metrics,
    pub initial_val: Metrics,
    pub epochs: Vec<EpochMetrics>,
    pub convergence_epoch: Option<usize>,
}

impl TrainReport {
    pub fn train_acc_curve(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.train.acc).collect()
    }

    pub fn final_train(&self) -> Metrics {
        self.epochs.last().map(|e| e.train).unwrap_or(self.initial_train)
    }

    pub fn final_val(&self) -> Metrics {
        self.epochs.last().map(|e| e.val).unwrap_or(self.initial_val)
    }
}

pub struct FixedTrainOutcome {
    pub report: TrainReport,
    pub ps: ParamStore,
    pub net: DiscreteNet,
}

/// Builds the discrete network for `genotype` and trains it with momentum
/// SGD under a cosine schedule, recording per-epoch train/val metrics.
pub fn train_fixed(
    genotype: &CellGenotype,
    split: &SplitPair,
    net_cfg: &SuperNetConfig,
    cfg: &TrainConfig,
) -> Result<FixedTrainOutcome, EngineError> {
    let d = split.train.num_classes() as usize;
    if net_cfg.num_classes != d {
        return Err(EngineError::ClassifierMismatch {
            net: net_cfg.num_classes,
            data: d,
        });
    }
    if split.train.is_empty() || split.val.is_empty() {
        return Err(EngineError::EmptyView);
    }
    if cfg.batch_size == 0 {
        return Err(EngineError::InvalidConfig("batch_size must be >= 1".into()));
    }

    let mut ps = ParamStore::new();
    let mut net = build_discrete(&mut ps, genotype, net_cfg, cfg.seed)?;
    let mut sgd = SgdMomentum::new(cfg.momentum, cfg.weight_decay);

    let initial_train = eval_view(&mut net, &mut ps, &split.train, cfg.batch_size, Mode::Eval)
        .map_err(|e| EngineError::DivergedTraining {
            epoch: 0,
            reason: e.0,
            report: Box::new(TrainReport {
                initial_train: Metrics { loss: f64::NAN, acc: 0.0 },
                initial_val: Metrics { loss: f64::NAN, acc: 0.0 },
                epochs: Vec::new(),
                convergence_epoch: None,
            }),
        })?;
    let initial_val = eval_view(&mut net, &mut ps, &split.val, cfg.batch_size, Mode::Eval)
        .map_err(|e| EngineError::DivergedTraining {
            epoch: 0,
            reason: e.0,
            report: Box::new(TrainReport {
                initial_train,
                initial_val: Metrics { loss: f64::NAN, acc: 0.0 },
                epochs: Vec::new(),
                convergence_epoch: None,
            }),
        })?;
    let mut report = TrainReport {
        initial_train,
        initial_val,
        epochs: Vec::new(),
        convergence_epoch: None,
    };

    for epoch in 0..cfg.epochs {
        let lr = cosine_lr(cfg.lr, epoch, cfg.epochs);
        let order = shuffled_order(cfg.seed, "fixed_train_order", epoch, split.train.len());
        let mut aug = rng::stream(cfg.seed, "fixed_train_augment", epoch as u64);
        let mut loss_sum = 0f64;
        let mut correct = 0usize;
        let diverged = |e: Divergence, report: &TrainReport| EngineError::DivergedTraining {
            epoch,
            reason: e.0,
            report: Box::new(report.clone()),
        };
        for (bs, be) in batch_ranges(order.len(), cfg.batch_size) {
            let idxs: Vec<usize> = order[bs..be].to_vec();
            let (x, y) = split.train.gather(&idxs, &mut aug);
            let stats = weight_step(&mut ps, &mut net, &mut sgd, &x, &y, lr, cfg.grad_clip)
                .map_err(|e| diverged(e, &report))?;
            loss_sum += stats.loss * stats.n as f64;
            correct += stats.correct;
        }
        let val = eval_view(&mut net, &mut ps, &split.val, cfg.batch_size, Mode::Eval)
            .map_err(|e| diverged(e, &report))?;
        report.epochs.push(EpochMetrics {
            epoch,
            train: Metrics {
                loss: loss_sum / split.train.len() as f64,
                acc: correct as f64 / split.train.len() as f64,
            },
            val,
        });
    }

    Ok(FixedTrainOutcome { report, ps, net })
}

// ---------------------------------------------------------------------------
// Checkpoints

/// JSON side of a checkpoint: config echo plus alpha as plain float arrays,
/// readable without the tensor substrate. Weights live in a sibling binary
/// file of little-endian f32, in parameter-id order.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub config: SearchConfig,
    pub alpha_normal: Vec<Vec<f32>>,
    pub alpha_reduce: Vec<Vec<f32>>,
    pub weights_file: String,
    pub num_weight_scalars: usize,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> EngineError + '_ {
    move |source| EngineError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Writes `<stem>.checkpoint.json` and `<stem>.weights.bin`.
pub fn save_checkpoint(
    stem: &Path,
    ps: &ParamStore,
    net: &SuperNet,
    cfg: &SearchConfig,
) -> Result<(), EngineError> {
    let weights_path = stem.with_extension("weights.bin");
    let json_path = stem.with_extension("checkpoint.json");
    let weights = ps.flatten_values(net.weight_ids());
    let ckpt = Checkpoint {
        config: cfg.clone(),
        alpha_normal: net
            .arch
            .alpha_normal
            .iter()
            .map(|&id| ps.value(id).iter().copied().collect())
            .collect(),
        alpha_reduce: net
            .arch
            .alpha_reduce
            .iter()
            .map(|&id| ps.value(id).iter().copied().collect())
            .collect(),
        weights_file: weights_path
            .file_name()
            .expect("weights file name")
            .to_string_lossy()
            .into_owned(),
        num_weight_scalars: weights.len(),
    };
    let mut f = std::fs::File::create(&weights_path).map_err(io_err(&weights_path))?;
    let mut buf = Vec::with_capacity(weights.len() * 4);
    for w in &weights {
        buf.extend_from_slice(&w.to_le_bytes());
    }
    f.write_all(&buf).map_err(io_err(&weights_path))?;
    std::fs::write(&json_path, serde_json::to_string_pretty(&ckpt)?)
        .map_err(io_err(&json_path))?;
    Ok(())
}

/// Restores a checkpoint into a freshly built supernet with the same
/// geometry; returns the config echo.
pub fn load_checkpoint(
    stem: &Path,
    ps: &mut ParamStore,
    net: &SuperNet,
) -> Result<SearchConfig, EngineError> {
    let json_path = stem.with_extension("checkpoint.json");
    let text = std::fs::read_to_string(&json_path).map_err(io_err(&json_path))?;
    let ckpt: Checkpoint = serde_json::from_str(&text)?;
    let weights_path = stem
        .parent()
        .unwrap_or_else(|| Path::new("."))
        .join(&ckpt.weights_file);
    let raw = std::fs::read(&weights_path).map_err(io_err(&weights_path))?;
    let n = raw.len() / 4;
    let mut weights = Vec::with_capacity(n);
    for chunk in raw.chunks_exact(4) {
        weights.push(f32::from_le_bytes(chunk.try_into().expect("4-byte chunk")));
    }
    ps.load_values(net.weight_ids(), &weights)
        .map_err(|e| EngineError::InvalidConfig(format!("weights blob mismatch: {e}")))?;
    for (ids, values) in [
        (&net.arch.alpha_normal, &ckpt.alpha_normal),
        (&net.arch.alpha_reduce, &ckpt.alpha_reduce),
    ] {
        if ids.len() != values.len() {
            return Err(EngineError::InvalidConfig(
                "alpha edge count mismatch in checkpoint".into(),
            ));
        }
        for (&id, v) in ids.iter().zip(values) {
            ps.value_mut(id)
                .as_slice_mut()
                .expect("alpha contiguous")
                .copy_from_slice(v);
        }
    }
    Ok(ckpt.config)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{build_rlrn, make_split};
    use crate::searchspace::build_supernet;

    fn micro_net_cfg(classes: usize) -> SuperNetConfig {
        SuperNetConfig {
            num_nodes: 2,
            channels: 4,
            cells: 2,
            num_classes: classes,
            input_channels: 3,
        }
    }

    fn micro_search_cfg(seed: u64, warmup: usize, search: usize) -> SearchConfig {
        SearchConfig {
            warmup_epochs: warmup,
            search_epochs: search,
            batch_size: 16,
            ..SearchConfig::unreal(seed)
        }
    }

    #[test]
    fn batch_ranges_cover_everything_once() {
        assert_eq!(batch_ranges(10, 4), vec![(0, 4), (4, 8), (8, 10)]);
        assert_eq!(batch_ranges(8, 4), vec![(0, 4), (4, 8)]);
        assert_eq!(batch_ranges(3, 64), vec![(0, 3)]);
    }

    #[test]
    fn zero_search_epochs_returns_tie_break_genotype() {
        let ds = build_rlrn(48, 4, 11).unwrap();
        let split = make_split(&ds);
        let mut ps = ParamStore::new();
        let mut net = build_supernet(&mut ps, &micro_net_cfg(4), 11);
        let cfg = micro_search_cfg(11, 2, 0);
        let out = search(&mut ps, &mut net, &split, &cfg).unwrap();
        assert_eq!(out.trace.records.len(), 2);
        // Warm-up purity: alphas still bit-exactly zero.
        for id in net.alpha_ids() {
            assert!(ps.value(id).iter().all(|&v| v == 0.0));
        }
        // Zero-alpha tie-break genotype: sep_conv_3x3 from sources 0 and 1.
        for j in 0..2 {
            assert_eq!(out.genotype.normal[2 * j], (OpKind::SepConv3x3, 0));
            assert_eq!(out.genotype.normal[2 * j + 1], (OpKind::SepConv3x3, 1));
        }
        assert_eq!(out.genotype.meta.dataset, "RLRN");
    }

    #[test]
    fn micro_search_trace_is_complete_and_reproducible() {
        let ds = build_rlrn(48, 4, 7).unwrap();
        let split = make_split(&ds);
        let run = |seed: u64| {
            let mut ps = ParamStore::new();
            let mut net = build_supernet(&mut ps, &micro_net_cfg(4), seed);
            let cfg = micro_search_cfg(seed, 1, 2);
            search(&mut ps, &mut net, &split, &cfg).unwrap()
        };
        let a = run(3);
        let b = run(3);
        assert_eq!(a.trace.records.len(), 3);
        assert_eq!(a.genotype, b.genotype);
        for (ra, rb) in a.trace.records.iter().zip(&b.trace.records) {
            assert_eq!(ra.train_loss.to_bits(), rb.train_loss.to_bits());
            assert_eq!(ra.val_loss.to_bits(), rb.val_loss.to_bits());
            assert_eq!(ra.genotype, rb.genotype);
            assert_eq!(
                ra.skip_count,
                count_op(&ra.genotype, OpKind::SkipConnect),
                "skip accounting must match the snapshot"
            );
        }
        // A different seed changes at least the losses.
        let c = run(4);
        assert_ne!(
            a.trace.records[0].train_loss.to_bits(),
            c.trace.records[0].train_loss.to_bits()
        );
    }

    #[test]
    fn classifier_mismatch_is_rejected() {
        let ds = build_rlrn(32, 7, 2).unwrap();
        let split = make_split(&ds);
        let mut ps = ParamStore::new();
        let mut net = build_supernet(&mut ps, &micro_net_cfg(4), 2);
        let cfg = micro_search_cfg(2, 1, 0);
        match search(&mut ps, &mut net, &split, &cfg) {
            Err(EngineError::ClassifierMismatch { net: 4, data: 7 }) => {}
            other => panic!("expected classifier mismatch, got {other:?}"),
        }
    }

    #[test]
    fn alpha_step_with_zero_rate_is_identity_and_first_step_opposes_gradient() {
        let ds = build_rlrn(16, 3, 5).unwrap();
        let split = make_split(&ds);
        let mut ps = ParamStore::new();
        let mut net = build_supernet(&mut ps, &micro_net_cfg(3), 5);
        let alpha_ids = net.alpha_ids();
        let idxs: Vec<usize> = (0..16).collect();
        let mut r = rng::stream(5, "test_gather", 0);
        let (x, y) = split.val.gather(&idxs, &mut r);

        // Reference gradient at the zero-alpha point.
        ps.zero_grads();
        let logits = net.forward(&mut ps, &x, Mode::Train);
        let out = softmax_cross_entropy(&logits, &y);
        net.backward(&mut ps, &out.dlogits, false);
        let ref_grads = ps.flatten_grads(&alpha_ids);

        // a_lr = 0: alpha bit-exactly unchanged.
        let mut adam0 = Adam::new(0.0, (0.5, 0.99), 0.0);
        alpha_step(&mut ps, &mut net, &mut adam0, &alpha_ids, &x, &y).unwrap();
        let after0 = ps.flatten_values(&alpha_ids);
        assert!(after0.iter().all(|&v| v == 0.0));

        // First Adam step moves opposite the gradient sign elementwise.
        let mut adam = Adam::new(3e-4, (0.5, 0.99), 0.0);
        alpha_step(&mut ps, &mut net, &mut adam, &alpha_ids, &x, &y).unwrap();
        let after = ps.flatten_values(&alpha_ids);
        let mut moved = 0;
        for (&a, &g) in after.iter().zip(&ref_grads) {
            if g.abs() > 1e-9 {
                assert!(
                    (a as f64) * (g as f64) < 0.0,
                    "alpha moved with the gradient: a={a}, g={g}"
                );
                moved += 1;
            } else {
                assert_eq!(a, 0.0, "zero-gradient entries must stay exactly 0");
            }
        }
        assert!(moved > 0, "expected at least one nonzero alpha gradient");
    }

    #[test]
    fn weight_step_at_zero_lr_keeps_weights() {
        let ds = build_rlrn(16, 3, 6).unwrap();
        let split = make_split(&ds);
        let mut ps = ParamStore::new();
        let mut net = build_supernet(&mut ps, &micro_net_cfg(3), 6);
        let idxs: Vec<usize> = (0..16).collect();
        let mut r = rng::stream(6, "test_gather", 0);
        let (x, y) = split.train.gather(&idxs, &mut r);
        let before = ps.flatten_values(net.weight_ids());
        let mut sgd = SgdMomentum::new(0.9, 0.0);
        weight_step(&mut ps, &mut net, &mut sgd, &x, &y, 0.0, 5.0).unwrap();
        let after = ps.flatten_values(net.weight_ids());
        assert_eq!(before, after);
    }

    #[test]
    fn unrolled_alpha_step_runs_and_differs_from_first_order() {
        let ds = build_rlrn(16, 3, 9).unwrap();
        let split = make_split(&ds);
        let idxs: Vec<usize> = (0..16).collect();
        let mut r = rng::stream(9, "test_gather", 0);
        let (x, y) = split.val.gather(&idxs, &mut r);
        let (tx, ty) = {
            let mut r = rng::stream(9, "test_gather", 1);
            let idxs: Vec<usize> = (0..16).collect();
            split.train.gather(&idxs, &mut r)
        };

        let run = |second: bool| {
            let mut ps = ParamStore::new();
            let mut net = build_supernet(&mut ps, &micro_net_cfg(3), 9);
            let alpha_ids = net.alpha_ids();
            let mut adam = Adam::new(3e-4, (0.5, 0.99), 0.0);
            let cfg = micro_search_cfg(9, 0, 1);
            if second {
                let sgd = SgdMomentum::new(0.9, 0.0);
                alpha_step_unrolled(
                    &mut ps,
                    &mut net,
                    &mut adam,
                    &sgd,
                    &cfg,
                    0.025,
                    (&x, &y),
                    (&tx, &ty),
                )
                .unwrap();
            } else {
                alpha_step(&mut ps, &mut net, &mut adam, &alpha_ids, &x, &y).unwrap();
            }
            (
                ps.flatten_values(&net.alpha_ids()),
                ps.flatten_values(net.weight_ids()),
            )
        };
        let (a1, w1) = run(false);
        let (a2, w2) = run(true);
        assert!(a2.iter().all(|v| v.is_finite()));
        assert_ne!(a1, a2, "second-order correction should alter the update");
        // Both orders leave W untouched by the alpha step itself.
        assert_eq!(w1, w2);
    }

    #[test]
    fn train_fixed_zero_epochs_gives_initial_metrics_only() {
        let ds = build_rlrn(32, 3, 12).unwrap();
        let split = make_split(&ds);
        let genotype = zero_alpha_genotype(2);
        let cfg = TrainConfig {
            epochs: 0,
            batch_size: 16,
            seed: 12,
            ..TrainConfig::default()
        };
        let out = train_fixed(&genotype, &split, &micro_net_cfg(3), &cfg).unwrap();
        assert!(out.report.epochs.is_empty());
        assert!(out.report.initial_train.loss.is_finite());
        assert!(out.report.initial_val.loss.is_finite());
        assert_eq!(out.report.final_train().acc, out.report.initial_train.acc);
    }

    fn zero_alpha_genotype(num_nodes: usize) -> CellGenotype {
        let mut ps = ParamStore::new();
        let arch = crate::searchspace::ArchParams::zero_init(&mut ps, num_nodes);
        derive_genotype(&ps, &arch, GenotypeMeta::default()).unwrap()
    }

    #[test]
    fn train_fixed_is_deterministic_and_learns_a_little() {
        let ds = build_rlrn(48, 3, 13).unwrap();
        let split = make_split(&ds);
        let genotype = zero_alpha_genotype(2);
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 16,
            seed: 13,
            weight_decay: 0.0,
            ..TrainConfig::default()
        };
        let a = train_fixed(&genotype, &split, &micro_net_cfg(3), &cfg).unwrap();
        let b = train_fixed(&genotype, &split, &micro_net_cfg(3), &cfg).unwrap();
        assert_eq!(a.report, b.report);
        assert_eq!(a.report.epochs.len(), 2);
        for e in &a.report.epochs {
            assert!(e.train.loss.is_finite());
            assert!((0.0..=1.0).contains(&e.train.acc));
            assert!((0.0..=1.0).contains(&e.val.acc));
        }
    }

    #[test]
    fn absurd_learning_rate_reports_divergence_with_partial_report() {
        let ds = build_rlrn(32, 3, 14).unwrap();
        let split = make_split(&ds);
        let genotype = zero_alpha_genotype(2);
        // Gradient clipping bounds each update to lr * clip, so the rate has
        // to be large enough that a handful of steps overflows f32 weights.
        let cfg = TrainConfig {
            epochs: 6,
            batch_size: 16,
            lr: 1e38,
            weight_decay: 0.0,
            seed: 14,
            ..TrainConfig::default()
        };
        match train_fixed(&genotype, &split, &micro_net_cfg(3), &cfg) {
            Err(EngineError::DivergedTraining { report, .. }) => {
                assert!(report.epochs.len() < 6);
            }
            other => panic!("expected divergence, got {:?}", other.map(|o| o.report)),
        }
    }

    #[test]
    fn trace_ndjson_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trace.ndjson");
        let genotype = zero_alpha_genotype(2);
        let trace = SearchTrace {
            records: vec![
                EpochRecord {
                    epoch: 0,
                    train_loss: 1.5,
                    val_loss: 1.6,
                    train_acc: 0.25,
                    val_acc: 0.24,
                    skip_count: 0,
                    genotype: genotype.clone(),
                    wallclock: 1.0,
                },
                EpochRecord {
                    epoch: 1,
                    train_loss: 1.4,
                    val_loss: 1.55,
                    train_acc: 0.3,
                    val_acc: 0.28,
                    skip_count: 0,
                    genotype,
                    wallclock: 2.0,
                },
            ],
        };
        trace.write_ndjson(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), 2);
        let back = SearchTrace::read_ndjson(&path).unwrap();
        assert_eq!(back, trace);
    }

    #[test]
    fn checkpoint_round_trips_alpha_and_weights() {
        let dir = tempfile::tempdir().unwrap();
        let stem = dir.path().join("run");
        let cfg_net = micro_net_cfg(3);
        let mut ps = ParamStore::new();
        let net = build_supernet(&mut ps, &cfg_net, 21);
        // Make alpha nontrivial so the round trip is meaningful.
        let ids = net.alpha_ids();
        for (k, &id) in ids.iter().enumerate() {
            ps.value_mut(id).as_slice_mut().unwrap()[k % 8] = 0.25 + k as f32 * 0.01;
        }
        let scfg = micro_search_cfg(21, 1, 1);
        save_checkpoint(&stem, &ps, &net, &scfg).unwrap();

        // The JSON alone exposes alpha as plain arrays.
        let ckpt: Checkpoint = serde_json::from_str(
            &std::fs::read_to_string(stem.with_extension("checkpoint.json")).unwrap(),
        )
        .unwrap();
        assert_eq!(ckpt.alpha_normal.len(), net.arch.alpha_normal.len());
        assert_eq!(ckpt.alpha_normal[0].len(), 8);
        assert_eq!(ckpt.config, scfg);

        let mut ps2 = ParamStore::new();
        let net2 = build_supernet(&mut ps2, &cfg_net, 999); // different init
        let cfg_back = load_checkpoint(&stem, &mut ps2, &net2).unwrap();
        assert_eq!(cfg_back, scfg);
        assert_eq!(
            ps.flatten_values(net.weight_ids()),
            ps2.flatten_values(net2.weight_ids())
        );
        assert_eq!(
            ps.flatten_values(&net.alpha_ids()),
            ps2.flatten_values(&net2.alpha_ids())
        );
        // And the restored net computes the same function.
        let x = ndarray::Array4::from_shape_fn((3, 2, 8, 8), |(c, n, h, w)| {
            ((c + 2 * n + 3 * h + 5 * w) % 7) as f32 * 0.1 - 0.3
        });
        let mut net_a = net;
        let mut net_b = net2;
        let ya = net_a.forward(&mut ps, &x, Mode::Train);
        let yb = net_b.forward(&mut ps2, &x, Mode::Train);
        assert_eq!(ya, yb);
    }

    #[test]
    fn config_validation_rejects_bad_values() {
        let mut cfg = SearchConfig::unreal(0);
        cfg.batch_size = 0;
        assert!(cfg.validate().is_err());
        let mut cfg = SearchConfig::unreal(0);
        cfg.w_lr = f64::NAN;
        assert!(cfg.validate().is_err());
        let mut cfg = SearchConfig::unreal(0);
        cfg.a_betas = (1.5, 0.9);
        assert!(cfg.validate().is_err());
        assert!(SearchConfig::real(3).validate().is_ok());
    }
}
