//! Cell-based DAG search space with softmax-relaxed mixed operations.
//!
//! A cell is a DAG over two input nodes and `N` intermediate nodes; every
//! edge `(i, j)` with `i < j` carries a mixture over eight candidate
//! operations, weighted by the softmax of an architecture vector alpha. All
//! normal cells share one alpha set, all reduction cells another. The cell
//! output concatenates the `N` intermediate nodes channel-wise.
//!
//! Discretization keeps, per node, the two incoming edges whose strongest
//! non-`zero` operation carries the largest softmax weight, selecting that
//! operation on each kept edge. Ties break deterministically: lower
//! operation index, then lower source node index.

use std::fmt;

use ndarray::{concatenate, Array2, ArrayD, Axis, Slice};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nn::{
    BatchNorm, Conv2d, DwConv, FactorizedReduce, Feat, GlobalAvgPool, Identity, Layer, Linear,
    MaxPool, Mode, ParamId, ParamStore, PwConv, Relu, Sequential, ZeroOp, AvgPool,
};
use crate::rng;

#[derive(Debug, Error)]
pub enum SearchSpaceError {
    #[error("alpha vector contains a non-finite entry")]
    NonFiniteAlpha,
    #[error("alpha vector has length {got}, expected {expected}")]
    WrongAlphaLength { expected: usize, got: usize },
    #[error("genotype references node {node} but the cell has {nodes} intermediate nodes")]
    BadGenotypeNode { node: usize, nodes: usize },
}

/// The eight candidate operations, in canonical index order. The order is
/// load-bearing: tie-breaks resolve to the lower index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum OpKind {
    #[serde(rename = "sep_conv_3x3")]
    SepConv3x3,
    #[serde(rename = "sep_conv_5x5")]
    SepConv5x5,
    #[serde(rename = "dil_conv_3x3")]
    DilConv3x3,
    #[serde(rename = "dil_conv_5x5")]
    DilConv5x5,
    #[serde(rename = "max_pool_3x3")]
    MaxPool3x3,
    #[serde(rename = "avg_pool_3x3")]
    AvgPool3x3,
    #[serde(rename = "skip_connect")]
    SkipConnect,
    #[serde(rename = "zero")]
    Zero,
}

impl OpKind {
    pub const ALL: [OpKind; 8] = [
        OpKind::SepConv3x3,
        OpKind::SepConv5x5,
        OpKind::DilConv3x3,
        OpKind::DilConv5x5,
        OpKind::MaxPool3x3,
        OpKind::AvgPool3x3,
        OpKind::SkipConnect,
        OpKind::Zero,
    ];

    pub const COUNT: usize = 8;

    pub fn index(self) -> usize {
        Self::ALL.iter().position(|&o| o == self).unwrap()
    }

    pub fn name(self) -> &'static str {
        match self {
            OpKind::SepConv3x3 => "sep_conv_3x3",
            OpKind::SepConv5x5 => "sep_conv_5x5",
            OpKind::DilConv3x3 => "dil_conv_3x3",
            OpKind::DilConv5x5 => "dil_conv_5x5",
            OpKind::MaxPool3x3 => "max_pool_3x3",
            OpKind::AvgPool3x3 => "avg_pool_3x3",
            OpKind::SkipConnect => "skip_connect",
            OpKind::Zero => "zero",
        }
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Number of DAG edges in a cell with `num_nodes` intermediate nodes:
/// node `j` receives edges from both inputs and every earlier node.
pub fn num_edges(num_nodes: usize) -> usize {
    num_nodes * (num_nodes + 3) / 2
}

/// Softmax over one edge's alpha vector, computed with max-subtraction.
pub fn mixed_op_weights(alpha_edge: &[f32]) -> Result<Vec<f64>, SearchSpaceError> {
    if alpha_edge.len() != OpKind::COUNT {
        return Err(SearchSpaceError::WrongAlphaLength {
            expected: OpKind::COUNT,
            got: alpha_edge.len(),
        });
    }
    if alpha_edge.iter().any(|v| !v.is_finite()) {
        return Err(SearchSpaceError::NonFiniteAlpha);
    }
    let max = alpha_edge.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b as f64));
    let exps: Vec<f64> = alpha_edge.iter().map(|&v| (v as f64 - max).exp()).collect();
    let denom: f64 = exps.iter().sum();
    Ok(exps.iter().map(|e| e / denom).collect())
}

// ---------------------------------------------------------------------------
// Architecture parameters and genotypes

/// Handles to the shared per-edge alpha vectors (length 8 each), one list
/// per cell type, in node-major edge order.
#[derive(Debug, Clone)]
pub struct ArchParams {
    pub num_nodes: usize,
    pub alpha_normal: Vec<ParamId>,
    pub alpha_reduce: Vec<ParamId>,
}

impl ArchParams {
    /// Registers zero-initialized alpha vectors for both cell types.
    pub fn zero_init(ps: &mut ParamStore, num_nodes: usize) -> Self {
        let edges = num_edges(num_nodes);
        let mk = |ps: &mut ParamStore| {
            (0..edges)
                .map(|_| ps.add(ArrayD::zeros(vec![OpKind::COUNT])))
                .collect()
        };
        ArchParams {
            num_nodes,
            alpha_normal: mk(ps),
            alpha_reduce: mk(ps),
        }
    }

    pub fn all_ids(&self) -> Vec<ParamId> {
        self.alpha_normal
            .iter()
            .chain(&self.alpha_reduce)
            .copied()
            .collect()
    }

    /// Snapshots one alpha list as plain vectors.
    pub fn values(ps: &ParamStore, ids: &[ParamId]) -> Vec<Vec<f32>> {
        ids.iter()
            .map(|&id| ps.value(id).iter().copied().collect())
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct GenotypeMeta {
    pub seed: u64,
    pub dataset: String,
    pub epoch: usize,
}

/// A discretized architecture: per cell type, `(op, source)` pairs — two per
/// intermediate node, in node order with ascending source within a node —
/// plus the concat range.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CellGenotype {
    pub normal: Vec<(OpKind, usize)>,
    pub normal_concat: Vec<usize>,
    pub reduce: Vec<(OpKind, usize)>,
    pub reduce_concat: Vec<usize>,
    #[serde(default)]
    pub meta: GenotypeMeta,
}

impl CellGenotype {
    pub fn num_nodes(&self) -> usize {
        self.normal.len() / 2
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("genotype serializes")
    }

    pub fn from_json(s: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(s)
    }

    /// Structural validity: 2 edges per node, no `zero`, distinct in-node
    /// sources, sources within range.
    pub fn validate(&self) -> Result<(), SearchSpaceError> {
        let nodes = self.num_nodes();
        for (list, concat) in [
            (&self.normal, &self.normal_concat),
            (&self.reduce, &self.reduce_concat),
        ] {
            if list.len() != 2 * nodes {
                return Err(SearchSpaceError::BadGenotypeNode {
                    node: list.len(),
                    nodes,
                });
            }
            for j in 0..nodes {
                let (a, b) = (&list[2 * j], &list[2 * j + 1]);
                if a.0 == OpKind::Zero || b.0 == OpKind::Zero || a.1 == b.1 || a.1 >= 2 + j
                    || b.1 >= 2 + j
                {
                    return Err(SearchSpaceError::BadGenotypeNode { node: j, nodes });
                }
            }
            if *concat != (2..2 + nodes).collect::<Vec<_>>() {
                return Err(SearchSpaceError::BadGenotypeNode { node: 0, nodes });
            }
        }
        Ok(())
    }
}

/// Discretizes one cell type's alpha list (node-major edge order).
pub fn derive_cell(
    alpha: &[Vec<f32>],
    num_nodes: usize,
) -> Result<Vec<(OpKind, usize)>, SearchSpaceError> {
    assert_eq!(alpha.len(), num_edges(num_nodes), "edge count mismatch");
    let zero = OpKind::Zero.index();
    let mut out = Vec::with_capacity(2 * num_nodes);
    let mut base = 0;
    for j in 0..num_nodes {
        let inputs = 2 + j;
        // (source, best non-zero softmax weight, best non-zero op).
        let mut scored: Vec<(usize, f64, OpKind)> = Vec::with_capacity(inputs);
        for i in 0..inputs {
            let w = mixed_op_weights(&alpha[base + i])?;
            let mut best = (0usize, f64::NEG_INFINITY);
            for (o, &wo) in w.iter().enumerate() {
                if o != zero && wo > best.1 {
                    best = (o, wo);
                }
            }
            scored.push((i, best.1, OpKind::ALL[best.0]));
        }
        scored.sort_by(|a, b| {
            b.1.partial_cmp(&a.1)
                .expect("finite weights")
                .then(a.0.cmp(&b.0))
        });
        let mut kept = [scored[0], scored[1]];
        kept.sort_by_key(|e| e.0);
        for (src, _, op) in kept {
            out.push((op, src));
        }
        base += inputs;
    }
    Ok(out)
}

/// Discretizes both alpha sets into a full genotype.
pub fn derive_genotype(
    ps: &ParamStore,
    arch: &ArchParams,
    meta: GenotypeMeta,
) -> Result<CellGenotype, SearchSpaceError> {
    let normal = derive_cell(&ArchParams::values(ps, &arch.alpha_normal), arch.num_nodes)?;
    let reduce = derive_cell(&ArchParams::values(ps, &arch.alpha_reduce), arch.num_nodes)?;
    let concat: Vec<usize> = (2..2 + arch.num_nodes).collect();
    Ok(CellGenotype {
        normal,
        normal_concat: concat.clone(),
        reduce,
        reduce_concat: concat,
        meta,
    })
}

/// Occurrences of `op` among the normal cell's selected edges.
pub fn count_op(genotype: &CellGenotype, op: OpKind) -> usize {
    genotype.normal.iter().filter(|(o, _)| *o == op).count()
}

// ---------------------------------------------------------------------------
// Candidate operation construction

/// Builds one candidate op for a mixed edge. `stride` is 2 only for
/// reduction-cell edges fed by the input nodes.
fn build_op(
    kind: OpKind,
    ps: &mut ParamStore,
    rng: &mut rand_chacha::ChaCha8Rng,
    c: usize,
    stride: usize,
    affine: bool,
    track: bool,
) -> Box<dyn Layer> {
    let sep = |ps: &mut ParamStore, rng: &mut rand_chacha::ChaCha8Rng, k: usize, pad: usize| {
        Box::new(Sequential::new(vec![
            Box::new(Relu::new()),
            Box::new(DwConv::new(ps, rng, c, k, stride, pad, 1)),
            Box::new(PwConv::new(ps, rng, c, c, 1, (0, 0))),
            Box::new(BatchNorm::new(ps, c, affine, track)),
            Box::new(Relu::new()),
            Box::new(DwConv::new(ps, rng, c, k, 1, pad, 1)),
            Box::new(PwConv::new(ps, rng, c, c, 1, (0, 0))),
            Box::new(BatchNorm::new(ps, c, affine, track)),
        ])) as Box<dyn Layer>
    };
    let dil = |ps: &mut ParamStore, rng: &mut rand_chacha::ChaCha8Rng, k: usize, pad: usize| {
        Box::new(Sequential::new(vec![
            Box::new(Relu::new()),
            Box::new(DwConv::new(ps, rng, c, k, stride, pad, 2)),
            Box::new(PwConv::new(ps, rng, c, c, 1, (0, 0))),
            Box::new(BatchNorm::new(ps, c, affine, track)),
        ])) as Box<dyn Layer>
    };
    match kind {
        OpKind::SepConv3x3 => sep(ps, rng, 3, 1),
        OpKind::SepConv5x5 => sep(ps, rng, 5, 2),
        OpKind::DilConv3x3 => dil(ps, rng, 3, 2),
        OpKind::DilConv5x5 => dil(ps, rng, 5, 4),
        OpKind::MaxPool3x3 => Box::new(MaxPool::new(3, stride, 1)),
        OpKind::AvgPool3x3 => Box::new(AvgPool::new(3, stride, 1)),
        OpKind::SkipConnect => {
            if stride == 1 {
                Box::new(Identity::new())
            } else {
                Box::new(FactorizedReduce::new(ps, rng, c, c, affine, track))
            }
        }
        OpKind::Zero => Box::new(ZeroOp::new(stride)),
    }
}

/// ReLU + 1x1 conv + batch norm, the standard cell-input preprocessor.
fn relu_conv_bn(
    ps: &mut ParamStore,
    rng: &mut rand_chacha::ChaCha8Rng,
    c_in: usize,
    c_out: usize,
    affine: bool,
    track: bool,
) -> Box<dyn Layer> {
    Box::new(Sequential::new(vec![
        Box::new(Relu::new()),
        Box::new(PwConv::new(ps, rng, c_in, c_out, 1, (0, 0))),
        Box::new(BatchNorm::new(ps, c_out, affine, track)),
    ]))
}

// ---------------------------------------------------------------------------
// Mixed operation

/// One DAG edge: all eight candidate ops plus the shared alpha vector that
/// mixes them.
pub struct MixedOp {
    pub alpha: ParamId,
    ops: Vec<Box<dyn Layer>>,
    cache: Option<MixedCache>,
    scratch: Option<Feat>,
}

struct MixedCache {
    weights: Vec<f32>,
    outputs: Vec<Feat>,
}

impl MixedOp {
    pub fn new(
        ps: &mut ParamStore,
        rng: &mut rand_chacha::ChaCha8Rng,
        alpha: ParamId,
        c: usize,
        stride: usize,
        affine: bool,
        track: bool,
    ) -> Self {
        let ops = OpKind::ALL
            .iter()
            .map(|&k| build_op(k, ps, rng, c, stride, affine, track))
            .collect();
        MixedOp {
            alpha,
            ops,
            cache: None,
            scratch: None,
        }
    }

    pub fn forward(
        &mut self,
        ps: &mut ParamStore,
        x: &Feat,
        mode: Mode,
    ) -> Result<Feat, SearchSpaceError> {
        let alpha: Vec<f32> = ps.value(self.alpha).iter().copied().collect();
        let weights: Vec<f32> = mixed_op_weights(&alpha)?
            .into_iter()
            .map(|v| v as f32)
            .collect();
        let mut outputs = Vec::with_capacity(self.ops.len());
        for op in &mut self.ops {
            outputs.push(op.forward(ps, x, mode));
        }
        // The zero op contributes nothing to the sum, so skip its pass.
        let zero = OpKind::Zero.index();
        let mut y = Feat::zeros(outputs[0].raw_dim());
        {
            let ys = y.as_slice_mut().expect("fresh array is standard layout");
            for (o, out) in outputs.iter().enumerate() {
                if o == zero {
                    continue;
                }
                let os = out.as_slice().expect("activations are standard layout");
                crate::nn::kernels::axpy(ys, weights[o], os);
            }
        }
        self.cache = Some(MixedCache { weights, outputs });
        Ok(y)
    }

    /// Backward through the mixture. Alpha gradients are always accumulated
    /// (they are cheap); weight gradients only when `need_param_grads`.
    pub fn backward(&mut self, ps: &mut ParamStore, dy: &Feat, need_param_grads: bool) -> Feat {
        let MixedCache { weights, outputs } = self.cache.take().expect("backward without forward");
        let dys = dy.as_slice().expect("gradients are standard layout");
        let zero = OpKind::Zero.index();
        // d loss / d mixture-weight_o = <dy, y_o>; exactly zero for the zero op.
        let mut dw = vec![0f64; weights.len()];
        for (o, out) in outputs.iter().enumerate() {
            if o == zero {
                continue;
            }
            let os = out.as_slice().expect("activations are standard layout");
            dw[o] = crate::nn::kernels::dot_f64(dys, os);
        }
        drop(outputs);
        // Softmax Jacobian: d alpha_k = w_k * (dw_k - sum_o w_o dw_o).
        let inner: f64 = weights
            .iter()
            .zip(&dw)
            .map(|(&w, &d)| w as f64 * d)
            .sum();
        {
            let ga = ps.grad_mut(self.alpha);
            let gs = ga.as_slice_mut().expect("alpha contiguous");
            for k in 0..weights.len() {
                gs[k] += (weights[k] as f64 * (dw[k] - inner)) as f32;
            }
        }
        let mut scaled = match self.scratch.take() {
            Some(b) if b.raw_dim() == dy.raw_dim() => b,
            _ => Feat::zeros(dy.raw_dim()),
        };
        let mut dx: Option<Feat> = None;
        for (o, op) in self.ops.iter_mut().enumerate() {
            if o == zero {
                continue; // contributes nothing to dx and has no parameters
            }
            {
                let ss = scaled.as_slice_mut().expect("scratch is standard layout");
                let wv = weights[o];
                for (d, &g) in ss.iter_mut().zip(dys) {
                    *d = g * wv;
                }
            }
            let d = op.backward(ps, &scaled, need_param_grads);
            match &mut dx {
                None => dx = Some(d),
                Some(g) => *g += &d,
            }
        }
        self.scratch = Some(scaled);
        dx.expect("at least one non-zero op")
    }
}

// ---------------------------------------------------------------------------
// Search cell

/// One relaxed cell: preprocessed inputs, a mixed op per DAG edge, output =
/// channel concat of the intermediate nodes.
pub struct Cell {
    pub reduction: bool,
    pre0: Box<dyn Layer>,
    pre1: Box<dyn Layer>,
    edges: Vec<MixedOp>,
    num_nodes: usize,
    c_per_node: usize,
}

impl Cell {
    /// `alpha_ids` must hold one id per edge in node-major order and is
    /// shared across cells of the same type.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        ps: &mut ParamStore,
        rng: &mut rand_chacha::ChaCha8Rng,
        c_prev_prev: usize,
        c_prev: usize,
        c: usize,
        reduction: bool,
        prev_reduction: bool,
        num_nodes: usize,
        alpha_ids: &[ParamId],
        affine: bool,
        track: bool,
    ) -> Self {
        assert_eq!(alpha_ids.len(), num_edges(num_nodes));
        let pre0: Box<dyn Layer> = if prev_reduction {
            Box::new(FactorizedReduce::new(ps, rng, c_prev_prev, c, affine, track))
        } else {
            relu_conv_bn(ps, rng, c_prev_prev, c, affine, track)
        };
        let pre1 = relu_conv_bn(ps, rng, c_prev, c, affine, track);
        let mut edges = Vec::with_capacity(alpha_ids.len());
        let mut e = 0;
        for j in 0..num_nodes {
            for i in 0..2 + j {
                let stride = if reduction && i < 2 { 2 } else { 1 };
                edges.push(MixedOp::new(ps, rng, alpha_ids[e], c, stride, affine, track));
                e += 1;
            }
        }
        Cell {
            reduction,
            pre0,
            pre1,
            edges,
            num_nodes,
            c_per_node: c,
        }
    }

    pub fn forward(
        &mut self,
        ps: &mut ParamStore,
        s0: &Feat,
        s1: &Feat,
        mode: Mode,
    ) -> Result<Feat, SearchSpaceError> {
        Ok(self.forward_with_states(ps, s0, s1, mode)?.0)
    }

    /// Like [`forward`](Self::forward) but also returns every node state
    /// (preprocessed inputs first), which the structural tests inspect.
    pub fn forward_with_states(
        &mut self,
        ps: &mut ParamStore,
        s0: &Feat,
        s1: &Feat,
        mode: Mode,
    ) -> Result<(Feat, Vec<Feat>), SearchSpaceError> {
        let mut states = vec![
            self.pre0.forward(ps, s0, mode),
            self.pre1.forward(ps, s1, mode),
        ];
        let mut e = 0;
        for j in 0..self.num_nodes {
            let mut sum: Option<Feat> = None;
            for i in 0..2 + j {
                let y = self.edges[e].forward(ps, &states[i], mode)?;
                e += 1;
                match &mut sum {
                    None => sum = Some(y),
                    Some(s) => *s += &y,
                }
            }
            states.push(sum.expect("node has edges"));
        }
        let views: Vec<_> = states[2..].iter().map(|s| s.view()).collect();
        let out = concatenate(Axis(0), &views).expect("node shapes agree");
        Ok((out, states))
    }

    /// Returns gradients w.r.t. the two cell inputs.
    pub fn backward(
        &mut self,
        ps: &mut ParamStore,
        dy: &Feat,
        need_param_grads: bool,
    ) -> (Feat, Feat) {
        let c = self.c_per_node;
        let mut dstates: Vec<Option<Feat>> = (0..2 + self.num_nodes).map(|_| None).collect();
        for k in 0..self.num_nodes {
            let chunk = dy
                .slice_axis(Axis(0), Slice::from(k * c..(k + 1) * c))
                .to_owned();
            dstates[2 + k] = Some(chunk);
        }
        let mut e_end = self.edges.len();
        for j in (0..self.num_nodes).rev() {
            let inputs = 2 + j;
            let e_start = e_end - inputs;
            let node_grad = dstates[2 + j].take().expect("node gradient present");
            for i in (0..inputs).rev() {
                let d = self.edges[e_start + i].backward(ps, &node_grad, need_param_grads);
                match &mut dstates[i] {
                    None => dstates[i] = Some(d),
                    Some(g) => *g += &d,
                }
            }
            e_end = e_start;
        }
        let d1 = self
            .pre1
            .backward(ps, dstates[1].as_ref().expect("input 1 gradient"), need_param_grads);
        let d0 = self
            .pre0
            .backward(ps, dstates[0].as_ref().expect("input 0 gradient"), need_param_grads);
        (d0, d1)
    }
}

// ---------------------------------------------------------------------------
// Supernet

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SuperNetConfig {
    /// Intermediate nodes per cell.
    pub num_nodes: usize,
    /// Initial per-node channel count; doubles at each reduction.
    pub channels: usize,
    /// Total stacked cells; reductions sit at floor(cells/3) and
    /// floor(2*cells/3).
    pub cells: usize,
    pub num_classes: usize,
    pub input_channels: usize,
}

impl Default for SuperNetConfig {
    fn default() -> Self {
        SuperNetConfig {
            num_nodes: 4,
            channels: 8,
            cells: 8,
            num_classes: 10,
            input_channels: 3,
        }
    }
}

/// 0-indexed reduction cell positions for a stack of `cells`.
pub fn reduction_positions(cells: usize) -> [usize; 2] {
    [cells / 3, 2 * cells / 3]
}

/// The relaxed search network: stem, stacked cells sharing two alpha sets,
/// global pooling, linear classifier.
pub struct SuperNet {
    pub config: SuperNetConfig,
    pub arch: ArchParams,
    stem: Sequential,
    cells: Vec<Cell>,
    gap: GlobalAvgPool,
    classifier: Linear,
    weight_ids: Vec<ParamId>,
    states: Option<usize>, // cells traversed in the pending forward
}

/// Common face of search and discrete networks, used by the trainer.
pub trait Network {
    fn forward(&mut self, ps: &mut ParamStore, x: &Feat, mode: Mode) -> Array2<f32>;
    fn backward(&mut self, ps: &mut ParamStore, dlogits: &Array2<f32>, need_param_grads: bool);
    fn weight_ids(&self) -> &[ParamId];
}

/// Builds a zero-alpha supernet. Two builds with equal `(cfg, weight_seed)`
/// produce identical parameters and therefore identical forward outputs.
pub fn build_supernet(ps: &mut ParamStore, cfg: &SuperNetConfig, weight_seed: u64) -> SuperNet {
    assert!(cfg.cells >= 2, "need at least two cells");
    assert!(cfg.channels >= 1 && cfg.num_classes >= 1);
    let arch = ArchParams::zero_init(ps, cfg.num_nodes);
    let weights_start = ps.len();
    let mut r = rng::stream(weight_seed, "weight_init", 0);

    let c_stem = 3 * cfg.channels;
    let stem = Sequential::new(vec![
        Box::new(Conv2d::new(ps, &mut r, cfg.input_channels, c_stem, 3, 1)),
        Box::new(BatchNorm::new(ps, c_stem, true, false)),
    ]);

    let reductions = reduction_positions(cfg.cells);
    let (mut c_pp, mut c_p, mut c) = (c_stem, c_stem, cfg.channels);
    let mut prev_reduction = false;
    let mut cells = Vec::with_capacity(cfg.cells);
    for i in 0..cfg.cells {
        let reduction = reductions.contains(&i);
        if reduction {
            c *= 2;
        }
        let alpha_ids = if reduction {
            &arch.alpha_reduce
        } else {
            &arch.alpha_normal
        };
        let cell = Cell::new(
            ps,
            &mut r,
            c_pp,
            c_p,
            c,
            reduction,
            prev_reduction,
            cfg.num_nodes,
            alpha_ids,
            false,
            false,
        );
        cells.push(cell);
        c_pp = c_p;
        c_p = cfg.num_nodes * c;
        prev_reduction = reduction;
    }

    let classifier = Linear::new(ps, &mut r, c_p, cfg.num_classes);
    let weight_ids = ps.ids_from(weights_start);
    SuperNet {
        config: cfg.clone(),
        arch,
        stem,
        cells,
        gap: GlobalAvgPool::new(),
        classifier,
        weight_ids,
        states: None,
    }
}

impl SuperNet {
    pub fn reduction_flags(&self) -> Vec<bool> {
        self.cells.iter().map(|c| c.reduction).collect()
    }

    pub fn alpha_ids(&self) -> Vec<ParamId> {
        self.arch.all_ids()
    }

    pub fn forward_checked(
        &mut self,
        ps: &mut ParamStore,
        x: &Feat,
        mode: Mode,
    ) -> Result<Array2<f32>, SearchSpaceError> {
        let t0 = self.stem.forward(ps, x, mode);
        // h[0] = stem output; h[k] = output of cell k-1.
        let mut h: Vec<Feat> = vec![t0];
        for k in 0..self.cells.len() {
            let (s0, s1) = if k == 0 {
                (&h[0], &h[0])
            } else {
                (&h[k - 1], &h[k])
            };
            // Split borrows: clone the views' sources is avoided by indexing
            // trick below (cells only read the inputs).
            let out = {
                let (s0, s1) = (s0 as *const Feat, s1 as *const Feat);
                // SAFETY: s0/s1 point into `h`, which is not mutated while
                // the cell runs; the cell only reads them.
                let (s0, s1) = unsafe { (&*s0, &*s1) };
                self.cells[k].forward(ps, s0, s1, mode)?
            };
            h.push(out);
        }
        let feat = self.gap.forward(h.last().expect("at least one state"));
        self.states = Some(self.cells.len());
        Ok(self.classifier.forward(ps, &feat))
    }

    pub fn backward_full(
        &mut self,
        ps: &mut ParamStore,
        dlogits: &Array2<f32>,
        need_param_grads: bool,
    ) {
        let n_cells = self.states.take().expect("backward without forward");
        let dfeat = self.classifier.backward(ps, dlogits, need_param_grads);
        let dlast = self.gap.backward(&dfeat);
        // dh[k] mirrors h[k] from the forward pass.
        let mut dh: Vec<Option<Feat>> = (0..n_cells + 1).map(|_| None).collect();
        dh[n_cells] = Some(dlast);
        for k in (0..n_cells).rev() {
            let g = dh[k + 1].take().expect("cell output gradient");
            let (d0, d1) = self.cells[k].backward(ps, &g, need_param_grads);
            if k == 0 {
                let mut sum = d0;
                sum += &d1;
                accum(&mut dh[0], sum);
            } else {
                accum(&mut dh[k - 1], d0);
                accum(&mut dh[k], d1);
            }
        }
        let g0 = dh[0].take().expect("stem gradient");
        self.stem.backward(ps, &g0, need_param_grads);
    }
}

fn accum(slot: &mut Option<Feat>, v: Feat) {
    match slot {
        None => *slot = Some(v),
        Some(g) => *g += &v,
    }
}

impl Network for SuperNet {
    fn forward(&mut self, ps: &mut ParamStore, x: &Feat, mode: Mode) -> Array2<f32> {
        self.forward_checked(ps, x, mode)
            .expect("finite alpha in forward")
    }

    fn backward(&mut self, ps: &mut ParamStore, dlogits: &Array2<f32>, need_param_grads: bool) {
        self.backward_full(ps, dlogits, need_param_grads)
    }

    fn weight_ids(&self) -> &[ParamId] {
        &self.weight_ids
    }
}

// ---------------------------------------------------------------------------
// Discrete network (derived genotype)

struct DiscreteCell {
    pre0: Box<dyn Layer>,
    pre1: Box<dyn Layer>,
    /// Two `(op, source)` incoming edges per node, node-major.
    ops: Vec<(Box<dyn Layer>, usize)>,
    num_nodes: usize,
    c_per_node: usize,
}

impl DiscreteCell {
    #[allow(clippy::too_many_arguments)]
    fn new(
        ps: &mut ParamStore,
        rng: &mut rand_chacha::ChaCha8Rng,
        edges: &[(OpKind, usize)],
        c_prev_prev: usize,
        c_prev: usize,
        c: usize,
        reduction: bool,
        prev_reduction: bool,
    ) -> Self {
        let num_nodes = edges.len() / 2;
        let pre0: Box<dyn Layer> = if prev_reduction {
            Box::new(FactorizedReduce::new(ps, rng, c_prev_prev, c, true, true))
        } else {
            relu_conv_bn(ps, rng, c_prev_prev, c, true, true)
        };
        let pre1 = relu_conv_bn(ps, rng, c_prev, c, true, true);
        let ops = edges
            .iter()
            .map(|&(kind, src)| {
                let stride = if reduction && src < 2 { 2 } else { 1 };
                (build_op(kind, ps, rng, c, stride, true, true), src)
            })
            .collect();
        DiscreteCell {
            pre0,
            pre1,
            ops,
            num_nodes,
            c_per_node: c,
        }
    }

    fn forward(&mut self, ps: &mut ParamStore, s0: &Feat, s1: &Feat, mode: Mode) -> Feat {
        let mut states = vec![
            self.pre0.forward(ps, s0, mode),
            self.pre1.forward(ps, s1, mode),
        ];
        for j in 0..self.num_nodes {
            let (a, b) = (2 * j, 2 * j + 1);
            let src_a = self.ops[a].1;
            let ya = {
                let (op, _) = &mut self.ops[a];
                let s = &states[src_a] as *const Feat;
                // SAFETY: ops only read the state; states is not resized
                // during the call.
                op.forward(ps, unsafe { &*s }, mode)
            };
            let src_b = self.ops[b].1;
            let mut yb = {
                let (op, _) = &mut self.ops[b];
                let s = &states[src_b] as *const Feat;
                // SAFETY: as above.
                op.forward(ps, unsafe { &*s }, mode)
            };
            yb += &ya;
            states.push(yb);
        }
        let views: Vec<_> = states[2..].iter().map(|s| s.view()).collect();
        concatenate(Axis(0), &views).expect("node shapes agree")
    }

    fn backward(&mut self, ps: &mut ParamStore, dy: &Feat, need_param_grads: bool) -> (Feat, Feat) {
        let c = self.c_per_node;
        let mut dstates: Vec<Option<Feat>> = (0..2 + self.num_nodes).map(|_| None).collect();
        for k in 0..self.num_nodes {
            dstates[2 + k] = Some(
                dy.slice_axis(Axis(0), Slice::from(k * c..(k + 1) * c))
                    .to_owned(),
            );
        }
        for j in (0..self.num_nodes).rev() {
            let node_grad = dstates[2 + j].take().expect("node gradient");
            for e in [2 * j + 1, 2 * j] {
                let src = self.ops[e].1;
                let d = self.ops[e].0.backward(ps, &node_grad, need_param_grads);
                match &mut dstates[src] {
                    None => dstates[src] = Some(d),
                    Some(g) => *g += &d,
                }
            }
        }
        let d1 = self
            .pre1
            .backward(ps, dstates[1].as_ref().expect("input 1 grad"), need_param_grads);
        let d0 = self
            .pre0
            .backward(ps, dstates[0].as_ref().expect("input 0 grad"), need_param_grads);
        (d0, d1)
    }
}

/// A fixed network instantiated from a genotype, with affine batch norm and
/// tracked running statistics.
pub struct DiscreteNet {
    pub config: SuperNetConfig,
    pub genotype: CellGenotype,
    stem: Sequential,
    cells: Vec<DiscreteCell>,
    gap: GlobalAvgPool,
    classifier: Linear,
    weight_ids: Vec<ParamId>,
    states: Option<usize>,
}

/// Builds the discrete network for `genotype` with the same stacking and
/// channel plan as the supernet.
pub fn build_discrete(
    ps: &mut ParamStore,
    genotype: &CellGenotype,
    cfg: &SuperNetConfig,
    weight_seed: u64,
) -> Result<DiscreteNet, SearchSpaceError> {
    genotype.validate()?;
    assert_eq!(genotype.num_nodes(), cfg.num_nodes, "node count mismatch");
    let weights_start = ps.len();
    let mut r = rng::stream(weight_seed, "weight_init", 0);

    let c_stem = 3 * cfg.channels;
    let stem = Sequential::new(vec![
        Box::new(Conv2d::new(ps, &mut r, cfg.input_channels, c_stem, 3, 1)),
        Box::new(BatchNorm::new(ps, c_stem, true, true)),
    ]);

    let reductions = reduction_positions(cfg.cells);
    let (mut c_pp, mut c_p, mut c) = (c_stem, c_stem, cfg.channels);
    let mut prev_reduction = false;
    let mut cells = Vec::with_capacity(cfg.cells);
    for i in 0..cfg.cells {
        let reduction = reductions.contains(&i);
        if reduction {
            c *= 2;
        }
        let edges = if reduction {
            &genotype.reduce
        } else {
            &genotype.normal
        };
        cells.push(DiscreteCell::new(
            ps,
            &mut r,
            edges,
            c_pp,
            c_p,
            c,
            reduction,
            prev_reduction,
        ));
        c_pp = c_p;
        c_p = cfg.num_nodes * c;
        prev_reduction = reduction;
    }
    let classifier = Linear::new(ps, &mut r, c_p, cfg.num_classes);
    let weight_ids = ps.ids_from(weights_start);
    Ok(DiscreteNet {
        config: cfg.clone(),
        genotype: genotype.clone(),
        stem,
        cells,
        gap: GlobalAvgPool::new(),
        classifier,
        weight_ids,
        states: None,
    })
}

impl Network for DiscreteNet {
    fn forward(&mut self, ps: &mut ParamStore, x: &Feat, mode: Mode) -> Array2<f32> {
        let t0 = self.stem.forward(ps, x, mode);
        let mut h: Vec<Feat> = vec![t0];
        for k in 0..self.cells.len() {
            let (i0, i1) = if k == 0 { (0, 0) } else { (k - 1, k) };
            let out = {
                let s0 = &h[i0] as *const Feat;
                let s1 = &h[i1] as *const Feat;
                // SAFETY: the cell only reads the inputs; `h` is stable.
                unsafe { self.cells[k].forward(ps, &*s0, &*s1, mode) }
            };
            h.push(out);
        }
        let feat = self.gap.forward(h.last().expect("states"));
        self.states = Some(self.cells.len());
        self.classifier.forward(ps, &feat)
    }

    fn backward(&mut self, ps: &mut ParamStore, dlogits: &Array2<f32>, need_param_grads: bool) {
        let n_cells = self.states.take().expect("backward without forward");
        let dfeat = self.classifier.backward(ps, dlogits, need_param_grads);
        let dlast = self.gap.backward(&dfeat);
        let mut dh: Vec<Option<Feat>> = (0..n_cells + 1).map(|_| None).collect();
        dh[n_cells] = Some(dlast);
        for k in (0..n_cells).rev() {
            let g = dh[k + 1].take().expect("cell output gradient");
            let (d0, d1) = self.cells[k].backward(ps, &g, need_param_grads);
            if k == 0 {
                let mut sum = d0;
                sum += &d1;
                accum(&mut dh[0], sum);
            } else {
                accum(&mut dh[k - 1], d0);
                accum(&mut dh[k], d1);
            }
        }
        let g0 = dh[0].take().expect("stem gradient");
        self.stem.backward(ps, &g0, need_param_grads);
    }

    fn weight_ids(&self) -> &[ParamId] {
        &self.weight_ids
    }
}
