//! Differentiable layer primitives in channel-major `(C, N, H, W)` layout.
//!
//! Convolutions are bias-free. 1x1 convolutions run as a single matrix
//! product over flattened pixels; depthwise convolutions run as per-tap
//! scaled adds over strided views; only the stem needs a general `KxK`
//! convolution, done by im2col. Each layer caches what its own backward
//! pass requires and releases the cache when backward consumes it.

use ndarray::{concatenate, s, Array2, ArrayD, Axis, Ix1, Ix2, Slice};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::kernels;
use super::{Feat, Layer, Mode, ParamId, ParamStore};

/// Batch-normalization epsilon (matches the common framework default).
pub const BN_EPS: f64 = 1e-5;
/// Running-statistics update rate for tracked batch norm.
pub const BN_MOMENTUM: f64 = 0.1;

/// He-normal initialization: `N(0, sqrt(2 / fan_in))`.
pub fn kaiming_normal(rng: &mut impl Rng, shape: &[usize], fan_in: usize) -> ArrayD<f32> {
    let std = (2.0 / fan_in as f64).sqrt();
    let dist = Normal::new(0.0, std).expect("positive std");
    let n: usize = shape.iter().product();
    let data: Vec<f32> = (0..n).map(|_| dist.sample(rng) as f32).collect();
    ArrayD::from_shape_vec(shape.to_vec(), data).expect("shape/data agree")
}

/// Uniform initialization on `[-bound, bound]`.
pub fn uniform_init(rng: &mut impl Rng, shape: &[usize], bound: f64) -> ArrayD<f32> {
    let n: usize = shape.iter().product();
    let data: Vec<f32> = (0..n).map(|_| rng.random_range(-bound..=bound) as f32).collect();
    ArrayD::from_shape_vec(shape.to_vec(), data).expect("shape/data agree")
}

fn out_len(in_len: usize, k: usize, stride: usize, pad: usize, dilation: usize) -> usize {
    (in_len + 2 * pad - dilation * (k - 1) - 1) / stride + 1
}

/// Valid output/input index ranges along one axis for kernel tap offset
/// `k_off = tap * dilation`: returns `(o_lo, o_hi_exclusive, i_lo)` such that
/// input index `i = o * stride + k_off - pad` stays in bounds.
fn tap_range(
    in_len: usize,
    out_len: usize,
    k_off: usize,
    stride: usize,
    pad: usize,
) -> Option<(usize, usize, usize)> {
    let s = stride as isize;
    let shift = k_off as isize - pad as isize;
    let o_lo = if shift >= 0 { 0 } else { (-shift + s - 1) / s };
    let top = in_len as isize - 1 - shift;
    if top < 0 {
        return None;
    }
    let o_hi = (top / s).min(out_len as isize - 1);
    if o_lo > o_hi {
        return None;
    }
    Some((o_lo as usize, (o_hi + 1) as usize, (o_lo * s + shift) as usize))
}

// ---------------------------------------------------------------------------
// ReLU

#[derive(Default)]
pub struct Relu {
    mask: Vec<u8>,
}

impl Relu {
    pub fn new() -> Self {
        Self::default()
    }
}

impl Layer for Relu {
    fn forward(&mut self, _ps: &mut ParamStore, x: &Feat, _mode: Mode) -> Feat {
        let xs = x.as_slice().expect("activations are standard layout");
        self.mask.clear();
        self.mask.resize(xs.len(), 0);
        let mut y = Feat::zeros(x.raw_dim());
        let ys = y.as_slice_mut().expect("fresh array is standard layout");
        for ((yv, m), &v) in ys.iter_mut().zip(&mut self.mask).zip(xs) {
            if v > 0.0 {
                *yv = v;
                *m = 1;
            }
        }
        y
    }

    fn backward(&mut self, _ps: &mut ParamStore, dy: &Feat, _need_param_grads: bool) -> Feat {
        let dys = dy.as_slice().expect("gradients are standard layout");
        assert_eq!(dys.len(), self.mask.len(), "backward without forward");
        let mut dx = Feat::zeros(dy.raw_dim());
        let dxs = dx.as_slice_mut().expect("fresh array is standard layout");
        for ((d, &m), &g) in dxs.iter_mut().zip(&self.mask).zip(dys) {
            if m != 0 {
                *d = g;
            }
        }
        dx
    }
}

// ---------------------------------------------------------------------------
// Pointwise (1x1) convolution

/// 1x1 convolution as one matrix product. `stride` subsamples the spatial
/// grid starting at `offset`, which also expresses the shifted path of a
/// factorized reduce (`offset = (1, 1)`).
pub struct PwConv {
    pub w: ParamId,
    in_ch: usize,
    out_ch: usize,
    stride: usize,
    offset: (usize, usize),
    x_cache: Option<Array2<f32>>,
    in_dim: (usize, usize, usize, usize),
    out_spatial: (usize, usize),
}

impl PwConv {
    pub fn new(
        ps: &mut ParamStore,
        rng: &mut impl Rng,
        in_ch: usize,
        out_ch: usize,
        stride: usize,
        offset: (usize, usize),
    ) -> Self {
        let w = ps.add(kaiming_normal(rng, &[out_ch, in_ch], in_ch));
        PwConv {
            w,
            in_ch,
            out_ch,
            stride,
            offset,
            x_cache: None,
            in_dim: (0, 0, 0, 0),
            out_spatial: (0, 0),
        }
    }
}

impl Layer for PwConv {
    fn forward(&mut self, ps: &mut ParamStore, x: &Feat, _mode: Mode) -> Feat {
        let (ci, n, h, w) = x.dim();
        assert_eq!(ci, self.in_ch, "pointwise conv channel mismatch");
        let hs = (h - self.offset.0).div_ceil(self.stride);
        let ws = (w - self.offset.1).div_ceil(self.stride);
        let len = n * hs * ws;
        let xs: Array2<f32> = if self.stride == 1 && self.offset == (0, 0) {
            let xc = x.as_standard_layout();
            xc.view()
                .into_shape_with_order((ci, n * h * w))
                .expect("contiguous reshape")
                .to_owned()
        } else {
            x.slice(s![.., .., self.offset.0..; self.stride, self.offset.1..; self.stride])
                .to_owned()
                .into_shape_with_order((ci, len))
                .expect("owned reshape")
        };
        let mut y = vec![0f32; self.out_ch * len];
        {
            let wts = ps.value(self.w);
            kernels::gemm_small(
                self.out_ch,
                ci,
                len,
                wts.as_slice().expect("weights are standard layout"),
                xs.as_slice().expect("pixel matrix is standard layout"),
                &mut y,
            );
        }
        self.x_cache = Some(xs);
        self.in_dim = (ci, n, h, w);
        self.out_spatial = (hs, ws);
        Feat::from_shape_vec((self.out_ch, n, hs, ws), y).expect("shape/data agree")
    }

    fn backward(&mut self, ps: &mut ParamStore, dy: &Feat, need_param_grads: bool) -> Feat {
        let (ci, n, h, w) = self.in_dim;
        let (hs, ws) = self.out_spatial;
        let len = n * hs * ws;
        let xs = self.x_cache.take().expect("backward without forward");
        let dyc = dy.as_standard_layout();
        let dy_flat = dyc.as_slice().expect("gradients are standard layout");
        if need_param_grads {
            let mut acc = vec![0f64; self.out_ch * ci];
            kernels::gemm_nt_f64(
                self.out_ch,
                ci,
                len,
                dy_flat,
                xs.as_slice().expect("pixel matrix is standard layout"),
                &mut acc,
            );
            let g = ps.grad_mut(self.w);
            let gs = g.as_slice_mut().expect("grads are standard layout");
            for (gv, a) in gs.iter_mut().zip(&acc) {
                *gv += *a as f32;
            }
        }
        // dx = W^T dY; transpose the small weight matrix once so both GEMMs
        // stream their operands row-major.
        let wt: Vec<f32> = {
            let wts = ps.value(self.w);
            let ws_ = wts.as_slice().expect("weights are standard layout");
            let mut t = vec![0f32; ci * self.out_ch];
            for o in 0..self.out_ch {
                for i in 0..ci {
                    t[i * self.out_ch + o] = ws_[o * ci + i];
                }
            }
            t
        };
        let mut dxs = vec![0f32; ci * len];
        kernels::gemm_small(ci, self.out_ch, len, &wt, dy_flat, &mut dxs);
        if self.stride == 1 && self.offset == (0, 0) {
            Feat::from_shape_vec((ci, n, h, w), dxs).expect("shape/data agree")
        } else {
            let dxm = Array2::from_shape_vec((ci, len), dxs).expect("shape/data agree");
            let mut dx = Feat::zeros((ci, n, h, w));
            dx.slice_mut(s![.., .., self.offset.0..; self.stride, self.offset.1..; self.stride])
                .assign(&dxm.into_shape_with_order((ci, n, hs, ws)).unwrap());
            dx
        }
    }
}

// ---------------------------------------------------------------------------
// Depthwise convolution

/// Depthwise `KxK` convolution (`groups = channels`), optionally strided and
/// dilated. Each `(channel, sample)` plane is copied once into a small
/// zero-padded scratch buffer, after which every row of the forward pass,
/// the input-gradient pass and the weight-gradient pass is one full-width
/// fused kernel call with no boundary cases.
pub struct DwConv {
    pub w: ParamId,
    channels: usize,
    k: usize,
    stride: usize,
    pad: usize,
    dilation: usize,
    x_cache: Option<Feat>,
    out_dim: (usize, usize),
    xpad: Vec<f32>,
    xpad_dim: (usize, usize),
    gpad: Vec<f32>,
    gpad_dim: (usize, usize),
}

impl DwConv {
    pub fn new(
        ps: &mut ParamStore,
        rng: &mut impl Rng,
        channels: usize,
        k: usize,
        stride: usize,
        pad: usize,
        dilation: usize,
    ) -> Self {
        // The transposed pass pads the incoming gradient by
        // `(k - 1) * dilation - pad`; "same"-style paddings always satisfy
        // this.
        assert!(
            pad <= (k - 1) * dilation,
            "padding exceeds the kernel footprint"
        );
        let w = ps.add(kaiming_normal(rng, &[channels, k, k], k * k));
        DwConv {
            w,
            channels,
            k,
            stride,
            pad,
            dilation,
            x_cache: None,
            out_dim: (0, 0),
            xpad: Vec::new(),
            xpad_dim: (0, 0),
            gpad: Vec::new(),
            gpad_dim: (0, 0),
        }
    }
}

impl Layer for DwConv {
    fn forward(&mut self, ps: &mut ParamStore, x: &Feat, _mode: Mode) -> Feat {
        let (c, n, h, w) = x.dim();
        assert_eq!(c, self.channels, "depthwise conv channel mismatch");
        let (k, st, d, p) = (self.k, self.stride, self.dilation, self.pad);
        let ho = out_len(h, k, st, p, d);
        let wo = out_len(w, k, st, p, d);
        let (hp, wp) = (h + 2 * p, w + 2 * p);
        if self.xpad_dim != (hp, wp) {
            self.xpad = vec![0.0; hp * wp];
            self.xpad_dim = (hp, wp);
        }
        let (pin, pout) = (h * w, ho * wo);
        let mut y = Feat::zeros((c, n, ho, wo));
        {
            let wts = ps.value(self.w);
            let wts = wts.as_slice().expect("weights are standard layout");
            let xs_all = x.as_slice().expect("activations are standard layout");
            let ys_all = y.as_slice_mut().expect("fresh array is standard layout");
            for cc in 0..c {
                let wt = &wts[cc * k * k..][..k * k];
                for nn in 0..n {
                    let xp = &xs_all[(cc * n + nn) * pin..][..pin];
                    let yp = &mut ys_all[(cc * n + nn) * pout..][..pout];
                    kernels::pad_plane(&mut self.xpad, xp, h, w, p);
                    kernels::plane_conv_acc(yp, wo, &self.xpad, wp, wt, k, d, st);
                }
            }
        }
        self.x_cache = Some(x.clone());
        self.out_dim = (ho, wo);
        y
    }

    fn backward(&mut self, ps: &mut ParamStore, dy: &Feat, need_param_grads: bool) -> Feat {
        let xc = self.x_cache.take().expect("backward without forward");
        let (c, n, h, w) = xc.dim();
        let (ho, wo) = self.out_dim;
        let (k, st, d, p) = (self.k, self.stride, self.dilation, self.pad);
        let (pin, pout) = (h * w, ho * wo);
        let dys_all = dy.as_slice().expect("gradients are standard layout");
        let mut dx = Feat::zeros((c, n, h, w));
        // Stride 1: dx is a full correlation of the padded gradient with the
        // 180-degree flipped kernel. Stride 2: input row `ih = 2a + r` only
        // receives kernel rows with `kh * d + p + r` even, from output row
        // `a - c` where `c = (kh * d - p - r) / 2`; columns decompose the
        // same way, and within a parity class consecutive taps sit `spacing`
        // apart in the output, so each class is again a fused row pass.
        let mar = if st == 1 { (k - 1) * d - p } else { (k - 1) * d };
        let (hg, wg) = (ho + 2 * mar, wo + 2 * mar);
        if self.gpad_dim != (hg, wg) {
            self.gpad = vec![0.0; hg * wg];
            self.gpad_dim = (hg, wg);
        }
        let classes: [Vec<(usize, isize)>; 2] = if st == 2 {
            let cls = |r: usize| -> Vec<(usize, isize)> {
                (0..k)
                    .filter(|&kh| (kh * d + p + r) % 2 == 0)
                    .map(|kh| (kh, ((kh * d) as isize - (p + r) as isize) / 2))
                    .collect()
            };
            [cls(0), cls(1)]
        } else {
            [Vec::new(), Vec::new()]
        };
        let spacing = if d % 2 == 0 { d / 2 } else { d };
        {
            let wts = ps.value(self.w);
            let wts = wts.as_slice().expect("weights are standard layout");
            let dx_all = dx.as_slice_mut().expect("fresh array is standard layout");
            let (we, wod) = ((w + 1) / 2, w / 2);
            let mut te = vec![0f32; we];
            let mut to = vec![0f32; wod];
            for cc in 0..c {
                let wt = &wts[cc * k * k..][..k * k];
                let mut wrev = [0f32; 32];
                for t in 0..k {
                    for u in 0..k {
                        wrev[t * k + u] = wt[(k - 1 - t) * k + (k - 1 - u)];
                    }
                }
                // Per (kernel row, column parity): class weights in reversed
                // tap order, so offsets into the padded row ascend.
                let mut wsel = [[([0f32; 8], 0usize); 2]; 8];
                if st == 2 {
                    for kh in 0..k {
                        for (q, cls) in classes.iter().enumerate() {
                            for (t, &(kw, _)) in cls.iter().rev().enumerate() {
                                wsel[kh][q].0[t] = wt[kh * k + kw];
                            }
                            wsel[kh][q].1 = cls.len();
                        }
                    }
                }
                for nn in 0..n {
                    let dyp = &dys_all[(cc * n + nn) * pout..][..pout];
                    let dxp = &mut dx_all[(cc * n + nn) * pin..][..pin];
                    kernels::pad_plane(&mut self.gpad, dyp, ho, wo, mar);
                    if st == 1 {
                        // Full correlation with the flipped kernel; same plane
                        // stencil as the forward pass.
                        kernels::plane_conv_acc(dxp, w, &self.gpad, wg, &wrev[..k * k], k, d, 1);
                    } else {
                        for ih in 0..h {
                            let r = ih % 2;
                            if classes[r].is_empty() {
                                continue;
                            }
                            te.fill(0.0);
                            to.fill(0.0);
                            for &(kh, cv) in &classes[r] {
                                let row = ((ih / 2) as isize - cv + mar as isize) as usize;
                                let grow = &self.gpad[row * wg..][..wg];
                                for (q, cls) in classes.iter().enumerate() {
                                    let (ws, cnt) = (&wsel[kh][q].0, wsel[kh][q].1);
                                    let dst = if q == 0 { &mut te[..] } else { &mut to[..] };
                                    if cnt == 0 || dst.is_empty() {
                                        continue;
                                    }
                                    let cmax = cls.last().unwrap().1;
                                    let base = (mar as isize - cmax) as usize;
                                    kernels::row_conv_acc(dst, &grow[base..], &ws[..cnt], spacing);
                                }
                            }
                            let dxrow = &mut dxp[ih * w..][..w];
                            for (b, &v) in te.iter().enumerate() {
                                dxrow[2 * b] = v;
                            }
                            for (b, &v) in to.iter().enumerate() {
                                dxrow[2 * b + 1] = v;
                            }
                        }
                    }
                }
            }
        }
        if need_param_grads {
            debug_assert!(k * k <= 32, "kernel taps fit the accumulator");
            let xs_all = xc.as_slice().expect("cache is standard layout");
            let (_, wp) = self.xpad_dim;
            let g = ps.grad_mut(self.w);
            let gs = g.as_slice_mut().expect("grads are standard layout");
            for cc in 0..c {
                let mut acc = [0f64; 32];
                for nn in 0..n {
                    let dyp = &dys_all[(cc * n + nn) * pout..][..pout];
                    let xp = &xs_all[(cc * n + nn) * pin..][..pin];
                    kernels::pad_plane(&mut self.xpad, xp, h, w, p);
                    for kh in 0..k {
                        for kw in 0..k {
                            let b = &self.xpad[(kh * d) * wp + kw * d..];
                            acc[kh * k + kw] += if st == 1 {
                                kernels::corr2_f64(dyp, wo, b, wp, ho, wo)
                            } else {
                                kernels::corr2_s2_f64(dyp, wo, b, 2 * wp, ho, wo)
                            };
                        }
                    }
                }
                for (i, a) in acc[..k * k].iter().enumerate() {
                    gs[cc * k * k + i] += *a as f32;
                }
            }
        }
        dx
    }
}

// ---------------------------------------------------------------------------
// General KxK convolution (stem only) via im2col

/// Full `KxK` convolution, stride 1, bias-free. Used for the stem; wider
/// kernels elsewhere are depthwise-separable.
pub struct Conv2d {
    pub w: ParamId,
    in_ch: usize,
    out_ch: usize,
    k: usize,
    pad: usize,
    cols: Option<Array2<f32>>,
    in_dim: (usize, usize, usize, usize),
}

impl Conv2d {
    pub fn new(
        ps: &mut ParamStore,
        rng: &mut impl Rng,
        in_ch: usize,
        out_ch: usize,
        k: usize,
        pad: usize,
    ) -> Self {
        let w = ps.add(kaiming_normal(rng, &[out_ch, in_ch * k * k], in_ch * k * k));
        Conv2d {
            w,
            in_ch,
            out_ch,
            k,
            pad,
            cols: None,
            in_dim: (0, 0, 0, 0),
        }
    }

    fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        (
            out_len(h, self.k, 1, self.pad, 1),
            out_len(w, self.k, 1, self.pad, 1),
        )
    }
}

impl Layer for Conv2d {
    fn forward(&mut self, ps: &mut ParamStore, x: &Feat, _mode: Mode) -> Feat {
        let (ci, n, h, w) = x.dim();
        assert_eq!(ci, self.in_ch, "conv channel mismatch");
        let (ho, wo) = self.out_hw(h, w);
        let k = self.k;
        let mut cols = Array2::<f32>::zeros((ci * k * k, n * ho * wo));
        for c0 in 0..ci {
            for kh in 0..k {
                let Some((oh0, oh1, ih0)) = tap_range(h, ho, kh, 1, self.pad) else {
                    continue;
                };
                for kw in 0..k {
                    let Some((ow0, ow1, iw0)) = tap_range(w, wo, kw, 1, self.pad) else {
                        continue;
                    };
                    let row = c0 * k * k + kh * k + kw;
                    let mut rv = cols
                        .row_mut(row)
                        .into_shape_with_order((n, ho, wo))
                        .unwrap();
                    rv.slice_mut(s![.., oh0..oh1, ow0..ow1]).assign(&x.slice(s![
                        c0,
                        ..,
                        ih0..ih0 + (oh1 - oh0),
                        iw0..iw0 + (ow1 - ow0)
                    ]));
                }
            }
        }
        let len = n * ho * wo;
        let rows = ci * k * k;
        let mut y = vec![0f32; self.out_ch * len];
        {
            let wts = ps.value(self.w);
            kernels::gemm_small(
                self.out_ch,
                rows,
                len,
                wts.as_slice().expect("weights are standard layout"),
                cols.as_slice().expect("im2col matrix is standard layout"),
                &mut y,
            );
        }
        self.cols = Some(cols);
        self.in_dim = (ci, n, h, w);
        Feat::from_shape_vec((self.out_ch, n, ho, wo), y).expect("shape/data agree")
    }

    fn backward(&mut self, ps: &mut ParamStore, dy: &Feat, need_param_grads: bool) -> Feat {
        let cols = self.cols.take().expect("backward without forward");
        let (ci, n, h, w) = self.in_dim;
        let (ho, wo) = self.out_hw(h, w);
        let k = self.k;
        let len = n * ho * wo;
        let rows = ci * k * k;
        let dyc = dy.as_standard_layout();
        let dy_flat = dyc.as_slice().expect("gradients are standard layout");
        if need_param_grads {
            let mut acc = vec![0f64; self.out_ch * rows];
            kernels::gemm_nt_f64(
                self.out_ch,
                rows,
                len,
                dy_flat,
                cols.as_slice().expect("im2col matrix is standard layout"),
                &mut acc,
            );
            let g = ps.grad_mut(self.w);
            let gs = g.as_slice_mut().expect("grads are standard layout");
            for (gv, a) in gs.iter_mut().zip(&acc) {
                *gv += *a as f32;
            }
        }
        let wt: Vec<f32> = {
            let wts = ps.value(self.w);
            let ws_ = wts.as_slice().expect("weights are standard layout");
            let mut t = vec![0f32; rows * self.out_ch];
            for o in 0..self.out_ch {
                for r in 0..rows {
                    t[r * self.out_ch + o] = ws_[o * rows + r];
                }
            }
            t
        };
        let mut dcols_v = vec![0f32; rows * len];
        kernels::gemm_small(rows, self.out_ch, len, &wt, dy_flat, &mut dcols_v);
        let dcols = Array2::from_shape_vec((rows, len), dcols_v).expect("shape/data agree");
        let mut dx = Feat::zeros((ci, n, h, w));
        for c0 in 0..ci {
            for kh in 0..k {
                let Some((oh0, oh1, ih0)) = tap_range(h, ho, kh, 1, self.pad) else {
                    continue;
                };
                for kw in 0..k {
                    let Some((ow0, ow1, iw0)) = tap_range(w, wo, kw, 1, self.pad) else {
                        continue;
                    };
                    let row = c0 * k * k + kh * k + kw;
                    let rv = dcols.row(row).into_shape_with_order((n, ho, wo)).unwrap();
                    let src = rv.slice(s![.., oh0..oh1, ow0..ow1]);
                    let mut dst = dx.slice_mut(s![
                        c0,
                        ..,
                        ih0..ih0 + (oh1 - oh0),
                        iw0..iw0 + (ow1 - ow0)
                    ]);
                    dst += &src;
                }
            }
        }
        dx
    }
}

// ---------------------------------------------------------------------------
// Batch normalization

/// Per-channel batch normalization.
///
/// With `track_running = false` (search networks) it always normalizes with
/// batch statistics and keeps no state across steps. With `track_running =
/// true` (discrete networks) it updates running statistics in train mode and
/// normalizes with them in eval mode.
pub struct BatchNorm {
    gamma: Option<ParamId>,
    beta: Option<ParamId>,
    channels: usize,
    track_running: bool,
    running_mean: Vec<f32>,
    running_var: Vec<f32>,
    xhat: Option<Feat>,
    inv_std: Vec<f32>,
    used_batch: bool,
}

impl BatchNorm {
    pub fn new(ps: &mut ParamStore, channels: usize, affine: bool, track_running: bool) -> Self {
        let gamma = affine.then(|| ps.add(ArrayD::from_elem(vec![channels], 1.0f32)));
        let beta = affine.then(|| ps.add(ArrayD::zeros(vec![channels])));
        BatchNorm {
            gamma,
            beta,
            channels,
            track_running,
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            xhat: None,
            inv_std: Vec::new(),
            used_batch: true,
        }
    }
}

impl Layer for BatchNorm {
    fn forward(&mut self, ps: &mut ParamStore, x: &Feat, mode: Mode) -> Feat {
        let (c, n, h, w) = x.dim();
        assert_eq!(c, self.channels, "batch norm channel mismatch");
        let plane = n * h * w;
        let m = plane as f64;
        let use_batch = !self.track_running || mode == Mode::Train;
        let affine = match (self.gamma, self.beta) {
            (Some(g), Some(b)) => {
                let gv: Vec<f32> = ps.value(g).iter().copied().collect();
                let bv: Vec<f32> = ps.value(b).iter().copied().collect();
                Some((gv, bv))
            }
            _ => None,
        };
        let xs_all = x.as_slice().expect("activations are standard layout");
        let mut xhat = Feat::zeros((c, n, h, w));
        let mut y = Feat::zeros((c, n, h, w));
        let mut inv_std = vec![0f32; c];
        {
            let xh_all = xhat.as_slice_mut().expect("fresh array is standard layout");
            let ys_all = y.as_slice_mut().expect("fresh array is standard layout");
            for cc in 0..c {
                let xp = &xs_all[cc * plane..][..plane];
                let (mean, inv) = if use_batch {
                    let mean = kernels::sum_f64(xp) / m;
                    let var = kernels::center_sumsq_f64(xp, mean) / m;
                    if self.track_running {
                        let unbiased = if m > 1.0 { var * m / (m - 1.0) } else { var };
                        self.running_mean[cc] = ((1.0 - BN_MOMENTUM)
                            * self.running_mean[cc] as f64
                            + BN_MOMENTUM * mean) as f32;
                        self.running_var[cc] = ((1.0 - BN_MOMENTUM) * self.running_var[cc] as f64
                            + BN_MOMENTUM * unbiased) as f32;
                    }
                    (mean, 1.0 / (var + BN_EPS).sqrt())
                } else {
                    (
                        self.running_mean[cc] as f64,
                        1.0 / (self.running_var[cc] as f64 + BN_EPS).sqrt(),
                    )
                };
                inv_std[cc] = inv as f32;
                let (mf, invf) = (mean as f32, inv as f32);
                let xhp = &mut xh_all[cc * plane..][..plane];
                let yp = &mut ys_all[cc * plane..][..plane];
                match &affine {
                    Some((gv, bv)) => {
                        let (gc, bc) = (gv[cc], bv[cc]);
                        for ((xh, yv), &v) in xhp.iter_mut().zip(yp.iter_mut()).zip(xp) {
                            let t = (v - mf) * invf;
                            *xh = t;
                            *yv = t * gc + bc;
                        }
                    }
                    None => {
                        for ((xh, yv), &v) in xhp.iter_mut().zip(yp.iter_mut()).zip(xp) {
                            let t = (v - mf) * invf;
                            *xh = t;
                            *yv = t;
                        }
                    }
                }
            }
        }
        self.xhat = Some(xhat);
        self.inv_std = inv_std;
        self.used_batch = use_batch;
        y
    }

    fn backward(&mut self, ps: &mut ParamStore, dy: &Feat, need_param_grads: bool) -> Feat {
        let xhat = self.xhat.take().expect("backward without forward");
        let (c, n, h, w) = xhat.dim();
        let plane = n * h * w;
        let m = plane as f64;
        let gv: Vec<f32> = match self.gamma {
            Some(g) => ps.value(g).iter().copied().collect(),
            None => vec![1.0; c],
        };
        let mut dgamma = vec![0f64; c];
        let mut dbeta = vec![0f64; c];
        let dys_all = dy.as_slice().expect("gradients are standard layout");
        let xh_all = xhat.as_slice().expect("cache is standard layout");
        let mut dx = Feat::zeros((c, n, h, w));
        {
            let dx_all = dx.as_slice_mut().expect("fresh array is standard layout");
            for cc in 0..c {
                let dyp = &dys_all[cc * plane..][..plane];
                let xhp = &xh_all[cc * plane..][..plane];
                let (sdy, sdyx) = kernels::sum_and_dot_f64(dyp, xhp);
                dgamma[cc] = sdyx;
                dbeta[cc] = sdy;
                let dxp = &mut dx_all[cc * plane..][..plane];
                if self.used_batch {
                    let k1 = gv[cc] as f64 * self.inv_std[cc] as f64;
                    let c1 = sdy / m;
                    let c2 = sdyx / m;
                    for ((o, &a), &b) in dxp.iter_mut().zip(dyp).zip(xhp) {
                        *o = (k1 * (a as f64 - c1 - (b as f64) * c2)) as f32;
                    }
                } else {
                    let k1 = gv[cc] * self.inv_std[cc];
                    for (o, &a) in dxp.iter_mut().zip(dyp) {
                        *o = a * k1;
                    }
                }
            }
        }
        if need_param_grads {
            if let (Some(g), Some(b)) = (self.gamma, self.beta) {
                {
                    let gg = ps.grad_mut(g);
                    let mut gg = gg.view_mut().into_dimensionality::<Ix1>().unwrap();
                    for cc in 0..c {
                        gg[cc] += dgamma[cc] as f32;
                    }
                }
                let gb = ps.grad_mut(b);
                let mut gb = gb.view_mut().into_dimensionality::<Ix1>().unwrap();
                for cc in 0..c {
                    gb[cc] += dbeta[cc] as f32;
                }
            }
        }
        dx
    }
}

// ---------------------------------------------------------------------------
// Pooling

/// 3x3 max pooling with padding; padded positions never win the max.
pub struct MaxPool {
    k: usize,
    stride: usize,
    pad: usize,
    argmax: Option<ndarray::Array4<u32>>,
    in_dim: (usize, usize, usize, usize),
}

impl MaxPool {
    pub fn new(k: usize, stride: usize, pad: usize) -> Self {
        MaxPool {
            k,
            stride,
            pad,
            argmax: None,
            in_dim: (0, 0, 0, 0),
        }
    }
}

/// Valid input range `[lo, hi)` of a pooling window at output index `o`.
fn pool_window(o: usize, in_len: usize, k: usize, stride: usize, pad: usize) -> (usize, usize) {
    let base = (o * stride) as isize - pad as isize;
    let lo = base.max(0) as usize;
    let hi = (base + k as isize).min(in_len as isize) as usize;
    (lo, hi)
}

impl Layer for MaxPool {
    fn forward(&mut self, _ps: &mut ParamStore, x: &Feat, _mode: Mode) -> Feat {
        let (c, n, h, w) = x.dim();
        let ho = out_len(h, self.k, self.stride, self.pad, 1);
        let wo = out_len(w, self.k, self.stride, self.pad, 1);
        let rows: Vec<(usize, usize)> =
            (0..ho).map(|o| pool_window(o, h, self.k, self.stride, self.pad)).collect();
        let cols: Vec<(usize, usize)> =
            (0..wo).map(|o| pool_window(o, w, self.k, self.stride, self.pad)).collect();
        let (pin, pout) = (h * w, ho * wo);
        let mut y = Feat::zeros((c, n, ho, wo));
        let mut arg = ndarray::Array4::<u32>::zeros((c, n, ho, wo));
        {
            let xs_all = x.as_slice().expect("activations are standard layout");
            let ys_all = y.as_slice_mut().expect("fresh array is standard layout");
            let arg_all = arg.as_slice_mut().expect("fresh array is standard layout");
            for p in 0..c * n {
                let xp = &xs_all[p * pin..][..pin];
                let yp = &mut ys_all[p * pout..][..pout];
                let ap = &mut arg_all[p * pout..][..pout];
                for oh in 0..ho {
                    let (h0, h1) = rows[oh];
                    for ow in 0..wo {
                        let (w0, w1) = cols[ow];
                        // Scan order (row-major, strict >) fixes which of two
                        // tied inputs takes the gradient.
                        let mut best = f32::NEG_INFINITY;
                        let mut bidx = 0u32;
                        for ih in h0..h1 {
                            for (iw, &v) in (w0..w1).zip(&xp[ih * w + w0..ih * w + w1]) {
                                if v > best {
                                    best = v;
                                    bidx = (ih * w + iw) as u32;
                                }
                            }
                        }
                        yp[oh * wo + ow] = best;
                        ap[oh * wo + ow] = bidx;
                    }
                }
            }
        }
        self.argmax = Some(arg);
        self.in_dim = (c, n, h, w);
        y
    }

    fn backward(&mut self, _ps: &mut ParamStore, dy: &Feat, _need_param_grads: bool) -> Feat {
        let arg = self.argmax.take().expect("backward without forward");
        let (c, n, h, w) = self.in_dim;
        let (_, _, ho, wo) = dy.dim();
        let (pin, pout) = (h * w, ho * wo);
        let dys_all = dy.as_slice().expect("gradients are standard layout");
        let arg_all = arg.as_slice().expect("cache is standard layout");
        let mut dx = Feat::zeros((c, n, h, w));
        let dx_all = dx.as_slice_mut().expect("fresh array is standard layout");
        for p in 0..c * n {
            let dyp = &dys_all[p * pout..][..pout];
            let ap = &arg_all[p * pout..][..pout];
            let dxp = &mut dx_all[p * pin..][..pin];
            for (&g, &a) in dyp.iter().zip(ap) {
                dxp[a as usize] += g;
            }
        }
        dx
    }
}

/// 3x3 average pooling with padding; padded positions are excluded from the
/// divisor (count_include_pad = false).
pub struct AvgPool {
    k: usize,
    stride: usize,
    pad: usize,
    in_dim: (usize, usize, usize, usize),
}

impl AvgPool {
    pub fn new(k: usize, stride: usize, pad: usize) -> Self {
        AvgPool {
            k,
            stride,
            pad,
            in_dim: (0, 0, 0, 0),
        }
    }
}

impl Layer for AvgPool {
    fn forward(&mut self, _ps: &mut ParamStore, x: &Feat, _mode: Mode) -> Feat {
        let (c, n, h, w) = x.dim();
        let ho = out_len(h, self.k, self.stride, self.pad, 1);
        let wo = out_len(w, self.k, self.stride, self.pad, 1);
        let rows: Vec<(usize, usize)> =
            (0..ho).map(|o| pool_window(o, h, self.k, self.stride, self.pad)).collect();
        let cols: Vec<(usize, usize)> =
            (0..wo).map(|o| pool_window(o, w, self.k, self.stride, self.pad)).collect();
        let (pin, pout) = (h * w, ho * wo);
        let mut y = Feat::zeros((c, n, ho, wo));
        let xs_all = x.as_slice().expect("activations are standard layout");
        let ys_all = y.as_slice_mut().expect("fresh array is standard layout");
        let mut vsum = vec![0f32; w];
        for p in 0..c * n {
            let xp = &xs_all[p * pin..][..pin];
            let yp = &mut ys_all[p * pout..][..pout];
            for oh in 0..ho {
                let (h0, h1) = rows[oh];
                // Column sums over the window rows, then short row sums.
                vsum.copy_from_slice(&xp[h0 * w..][..w]);
                for ih in h0 + 1..h1 {
                    kernels::axpy(&mut vsum, 1.0, &xp[ih * w..][..w]);
                }
                let yrow = &mut yp[oh * wo..][..wo];
                for (ow, yv) in yrow.iter_mut().enumerate() {
                    let (w0, w1) = cols[ow];
                    let count = ((h1 - h0) * (w1 - w0)) as f32;
                    let s: f32 = vsum[w0..w1].iter().sum();
                    *yv = s / count;
                }
            }
        }
        self.in_dim = (c, n, h, w);
        y
    }

    fn backward(&mut self, _ps: &mut ParamStore, dy: &Feat, _need_param_grads: bool) -> Feat {
        let (c, n, h, w) = self.in_dim;
        let (_, _, ho, wo) = dy.dim();
        let rows: Vec<(usize, usize)> =
            (0..ho).map(|o| pool_window(o, h, self.k, self.stride, self.pad)).collect();
        let cols: Vec<(usize, usize)> =
            (0..wo).map(|o| pool_window(o, w, self.k, self.stride, self.pad)).collect();
        let (pin, pout) = (h * w, ho * wo);
        let dys_all = dy.as_slice().expect("gradients are standard layout");
        let mut dx = Feat::zeros((c, n, h, w));
        let dx_all = dx.as_slice_mut().expect("fresh array is standard layout");
        let mut spread = vec![0f32; w];
        for p in 0..c * n {
            let dyp = &dys_all[p * pout..][..pout];
            let dxp = &mut dx_all[p * pin..][..pin];
            for oh in 0..ho {
                let (h0, h1) = rows[oh];
                let dyrow = &dyp[oh * wo..][..wo];
                spread.iter_mut().for_each(|v| *v = 0.0);
                for (ow, &g) in dyrow.iter().enumerate() {
                    let (w0, w1) = cols[ow];
                    let count = ((h1 - h0) * (w1 - w0)) as f32;
                    let sc = g / count;
                    for v in &mut spread[w0..w1] {
                        *v += sc;
                    }
                }
                for ih in h0..h1 {
                    kernels::axpy(&mut dxp[ih * w..][..w], 1.0, &spread);
                }
            }
        }
        dx
    }
}

// ---------------------------------------------------------------------------
// Identity / Zero

#[derive(Default)]
pub struct Identity;

impl Identity {
    pub fn new() -> Self {
        Identity
    }
}

impl Layer for Identity {
    fn forward(&mut self, _ps: &mut ParamStore, x: &Feat, _mode: Mode) -> Feat {
        x.clone()
    }

    fn backward(&mut self, _ps: &mut ParamStore, dy: &Feat, _need_param_grads: bool) -> Feat {
        dy.clone()
    }
}

/// The zero operation: outputs zeros, subsampling the grid when strided so
/// its shape matches the other candidates on the edge.
pub struct ZeroOp {
    stride: usize,
    in_dim: (usize, usize, usize, usize),
}

impl ZeroOp {
    pub fn new(stride: usize) -> Self {
        ZeroOp {
            stride,
            in_dim: (0, 0, 0, 0),
        }
    }
}

impl Layer for ZeroOp {
    fn forward(&mut self, _ps: &mut ParamStore, x: &Feat, _mode: Mode) -> Feat {
        let (c, n, h, w) = x.dim();
        self.in_dim = (c, n, h, w);
        Feat::zeros((c, n, h.div_ceil(self.stride), w.div_ceil(self.stride)))
    }

    fn backward(&mut self, _ps: &mut ParamStore, _dy: &Feat, _need_param_grads: bool) -> Feat {
        Feat::zeros(self.in_dim)
    }
}

// ---------------------------------------------------------------------------
// Factorized reduce

/// Halves the spatial grid while preserving information: ReLU, two parallel
/// stride-2 1x1 convolutions (the second on the grid shifted by one pixel),
/// channel concatenation, batch norm.
pub struct FactorizedReduce {
    relu: Relu,
    c1: PwConv,
    c2: PwConv,
    bn: BatchNorm,
    half: usize,
}

impl FactorizedReduce {
    pub fn new(
        ps: &mut ParamStore,
        rng: &mut impl Rng,
        in_ch: usize,
        out_ch: usize,
        affine: bool,
        track_running: bool,
    ) -> Self {
        assert!(out_ch % 2 == 0, "factorized reduce needs even output channels");
        let c1 = PwConv::new(ps, rng, in_ch, out_ch / 2, 2, (0, 0));
        let c2 = PwConv::new(ps, rng, in_ch, out_ch / 2, 2, (1, 1));
        let bn = BatchNorm::new(ps, out_ch, affine, track_running);
        FactorizedReduce {
            relu: Relu::new(),
            c1,
            c2,
            bn,
            half: out_ch / 2,
        }
    }
}

impl Layer for FactorizedReduce {
    fn forward(&mut self, ps: &mut ParamStore, x: &Feat, mode: Mode) -> Feat {
        let r = self.relu.forward(ps, x, mode);
        let y1 = self.c1.forward(ps, &r, mode);
        let y2 = self.c2.forward(ps, &r, mode);
        let y = concatenate![Axis(0), y1, y2];
        self.bn.forward(ps, &y, mode)
    }

    fn backward(&mut self, ps: &mut ParamStore, dy: &Feat, need_param_grads: bool) -> Feat {
        let db = self.bn.backward(ps, dy, need_param_grads);
        let d1 = db.slice_axis(Axis(0), Slice::from(0..self.half)).to_owned();
        let d2 = db.slice_axis(Axis(0), Slice::from(self.half..2 * self.half)).to_owned();
        let dr = self.c1.backward(ps, &d1, need_param_grads)
            + self.c2.backward(ps, &d2, need_param_grads);
        self.relu.backward(ps, &dr, need_param_grads)
    }
}

// ---------------------------------------------------------------------------
// Sequential

/// Runs layers in order; backward reverses them.
pub struct Sequential {
    layers: Vec<Box<dyn Layer>>,
}

impl Sequential {
    pub fn new(layers: Vec<Box<dyn Layer>>) -> Self {
        Sequential { layers }
    }
}

impl Layer for Sequential {
    fn forward(&mut self, ps: &mut ParamStore, x: &Feat, mode: Mode) -> Feat {
        let mut cur: Option<Feat> = None;
        for l in &mut self.layers {
            let y = match cur.as_ref() {
                None => l.forward(ps, x, mode),
                Some(c) => l.forward(ps, c, mode),
            };
            cur = Some(y);
        }
        cur.unwrap_or_else(|| x.clone())
    }

    fn backward(&mut self, ps: &mut ParamStore, dy: &Feat, need_param_grads: bool) -> Feat {
        let mut cur: Option<Feat> = None;
        for l in self.layers.iter_mut().rev() {
            let d = match cur.as_ref() {
                None => l.backward(ps, dy, need_param_grads),
                Some(c) => l.backward(ps, c, need_param_grads),
            };
            cur = Some(d);
        }
        cur.unwrap_or_else(|| dy.clone())
    }
}

// ---------------------------------------------------------------------------
// Classifier head pieces (not `Layer`: they change tensor rank)

/// Mean over the spatial grid: `(C, N, H, W) -> (C, N)`.
#[derive(Default)]
pub struct GlobalAvgPool {
    in_dim: (usize, usize, usize, usize),
}

impl GlobalAvgPool {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn forward(&mut self, x: &Feat) -> Array2<f32> {
        let (c, n, h, w) = x.dim();
        self.in_dim = (c, n, h, w);
        x.sum_axis(Axis(3)).sum_axis(Axis(2)) / ((h * w) as f32)
    }

    pub fn backward(&mut self, dy: &Array2<f32>) -> Feat {
        let (c, n, h, w) = self.in_dim;
        let scale = 1.0 / ((h * w) as f32);
        let mut dx = Feat::zeros((c, n, h, w));
        for cc in 0..c {
            for nn in 0..n {
                dx.slice_mut(s![cc, nn, .., ..]).fill(dy[[cc, nn]] * scale);
            }
        }
        dx
    }
}

/// Fully connected classifier: features `(C, N)` to logits `(D, N)`.
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    x_cache: Option<Array2<f32>>,
}

impl Linear {
    pub fn new(ps: &mut ParamStore, rng: &mut impl Rng, in_features: usize, out_features: usize) -> Self {
        let bound = 1.0 / (in_features as f64).sqrt();
        let w = ps.add(uniform_init(rng, &[out_features, in_features], bound));
        let b = ps.add(uniform_init(rng, &[out_features], bound));
        Linear { w, b, x_cache: None }
    }

    pub fn forward(&mut self, ps: &ParamStore, x: &Array2<f32>) -> Array2<f32> {
        let wmat = ps.value(self.w).view().into_dimensionality::<Ix2>().unwrap();
        let bv = ps.value(self.b).view().into_dimensionality::<Ix1>().unwrap();
        let mut y = wmat.dot(x);
        y += &bv.insert_axis(Axis(1));
        self.x_cache = Some(x.clone());
        y
    }

    pub fn backward(
        &mut self,
        ps: &mut ParamStore,
        dy: &Array2<f32>,
        need_param_grads: bool,
    ) -> Array2<f32> {
        let x = self.x_cache.take().expect("backward without forward");
        if need_param_grads {
            let dw = dy.dot(&x.t());
            {
                let g = ps.grad_mut(self.w);
                let mut gv = g.view_mut().into_dimensionality::<Ix2>().unwrap();
                gv += &dw;
            }
            let db = dy.sum_axis(Axis(1));
            let g = ps.grad_mut(self.b);
            let mut gv = g.view_mut().into_dimensionality::<Ix1>().unwrap();
            gv += &db;
        }
        let wmat = ps.value(self.w).view().into_dimensionality::<Ix2>().unwrap();
        wmat.t().dot(dy)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::fd::{fd_param, rel_err};
    use crate::rng;
    use ndarray::{Array1, Array4};

    // The conv layers are linear in their parameters, so the central
    // difference has no truncation error and a larger step just dilutes the
    // f32 forward noise.
    const EPS: f32 = 3e-3;
    const TOL: f32 = 1e-2;

    fn rand_feat(seed: u64, dim: (usize, usize, usize, usize)) -> Feat {
        let mut r = rng::stream(seed, "nn_test", 0);
        Array4::from_shape_fn(dim, |_| r.random_range(-1.0..1.0f32))
    }

    /// `loss = sum(y * t)` for a fixed random `t`, so `dL/dy = t`.
    fn probe_loss(y: &Feat, t: &Feat) -> f64 {
        let mut acc = 0f64;
        ndarray::azip!((&a in y, &b in t) acc += (a as f64) * (b as f64));
        acc
    }

    /// Checks every parameter gradient of `layer` (up to `max_probes` randomly
    /// spread entries per tensor) and a handful of input gradients against
    /// central differences.
    fn check_layer_grads(
        ps: &mut ParamStore,
        layer: &mut dyn Layer,
        param_ids: &[ParamId],
        x: &Feat,
        out_dim: (usize, usize, usize, usize),
        max_probes: usize,
    ) {
        let t = rand_feat(99, out_dim);
        // Analytic pass.
        ps.zero_grads();
        let y = layer.forward(ps, x, Mode::Train);
        assert_eq!(y.dim(), out_dim, "unexpected output shape");
        let dx = layer.backward(ps, &t, true);
        assert_eq!(dx.dim(), x.dim());

        // Parameter gradients.
        for &id in param_ids {
            let len = ps.value(id).len();
            let stride = (len / max_probes).max(1);
            for flat in (0..len).step_by(stride) {
                let analytic = ps.grad(id).as_slice().unwrap()[flat] as f64;
                let mut f = |ps: &mut ParamStore| {
                    let y = layer.forward(ps, x, Mode::Train);
                    let l = probe_loss(&y, &t);
                    layer.backward(ps, &t, false);
                    l
                };
                let numeric = fd_param(ps, id, flat, EPS, &mut f);
                assert!(
                    rel_err(analytic, numeric) < TOL as f64,
                    "param grad mismatch id={id:?} flat={flat}: analytic={analytic} numeric={numeric}"
                );
            }
        }

        // Input gradients at a few entries.
        let len = x.len();
        let stride = (len / max_probes).max(1);
        for flat in (0..len).step_by(stride) {
            let analytic = dx.as_slice().unwrap()[flat] as f64;
            let mut xp = x.clone();
            let orig = xp.as_slice().unwrap()[flat];
            xp.as_slice_mut().unwrap()[flat] = orig + EPS;
            let lp = probe_loss(&layer.forward(ps, &xp, Mode::Train), &t);
            layer.backward(ps, &t, false);
            xp.as_slice_mut().unwrap()[flat] = orig - EPS;
            let lm = probe_loss(&layer.forward(ps, &xp, Mode::Train), &t);
            layer.backward(ps, &t, false);
            let numeric = (lp - lm) / (2.0 * EPS as f64);
            assert!(
                rel_err(analytic, numeric) < TOL as f64,
                "input grad mismatch flat={flat}: analytic={analytic} numeric={numeric}"
            );
        }
    }

    #[test]
    fn relu_gradients_match_finite_differences() {
        let mut ps = ParamStore::new();
        let x = rand_feat(1, (3, 2, 5, 5));
        let mut l = Relu::new();
        check_layer_grads(&mut ps, &mut l, &[], &x, (3, 2, 5, 5), 8);
    }

    #[test]
    fn pwconv_gradients_match_finite_differences() {
        let mut r = rng::stream(0, "init", 0);
        for (stride, offset, out_hw) in [(1, (0, 0), (6, 6)), (2, (0, 0), (3, 3)), (2, (1, 1), (3, 3))] {
            let mut ps = ParamStore::new();
            let mut l = PwConv::new(&mut ps, &mut r, 3, 4, stride, offset);
            let ids = [l.w];
            let x = rand_feat(2, (3, 2, 6, 6));
            check_layer_grads(&mut ps, &mut l, &ids, &x, (4, 2, out_hw.0, out_hw.1), 12);
        }
    }

    /// Exact reference for the depthwise backward pass: both gradients are
    /// plain nested sums, so any disagreement beyond float storage noise is
    /// an indexing bug rather than finite-difference noise.
    #[test]
    fn dwconv_backward_matches_brute_force() {
        let mut r = rng::stream(0, "init", 1);
        for (k, stride, pad, dil, out_hw) in [
            (3usize, 1usize, 1usize, 1usize, (6usize, 6usize)),
            (3, 2, 1, 1, (3, 3)),
            (5, 1, 2, 1, (6, 6)),
            (5, 2, 2, 1, (3, 3)),
            (5, 1, 4, 2, (6, 6)),
            (5, 2, 4, 2, (3, 3)),
            (3, 1, 2, 2, (6, 6)),
            (3, 2, 2, 2, (3, 3)),
        ] {
            let mut ps = ParamStore::new();
            let mut l = DwConv::new(&mut ps, &mut r, 3, k, stride, pad, dil);
            let x = rand_feat(3, (3, 2, 6, 6));
            let t = rand_feat(99, (3, 2, out_hw.0, out_hw.1));
            ps.zero_grads();
            let _y = l.forward(&mut ps, &x, Mode::Train);
            let dx = l.backward(&mut ps, &t, true);
            let (c, n, h, w) = x.dim();
            let (ho, wo) = out_hw;
            let wv = ps.value(l.w).clone();
            let wv = wv.as_slice().unwrap().to_vec();
            let mut dw_want = vec![0f64; c * k * k];
            let mut dx_want = Feat::zeros((c, n, h, w));
            for cc in 0..c {
                for nn in 0..n {
                    for oh in 0..ho {
                        for ow in 0..wo {
                            for kh in 0..k {
                                for kw in 0..k {
                                    let ih = (oh * stride + kh * dil) as isize - pad as isize;
                                    let iw = (ow * stride + kw * dil) as isize - pad as isize;
                                    if ih < 0 || iw < 0 || ih >= h as isize || iw >= w as isize {
                                        continue;
                                    }
                                    let (ih, iw) = (ih as usize, iw as usize);
                                    let g = t[[cc, nn, oh, ow]];
                                    dw_want[cc * k * k + kh * k + kw] +=
                                        g as f64 * x[[cc, nn, ih, iw]] as f64;
                                    dx_want[[cc, nn, ih, iw]] += wv[cc * k * k + kh * k + kw] * g;
                                }
                            }
                        }
                    }
                }
            }
            for (i, &want) in dw_want.iter().enumerate() {
                let got = ps.grad(l.w).as_slice().unwrap()[i] as f64;
                assert!(
                    (got - want).abs() < 1e-7 * want.abs().max(1.0),
                    "k={k} st={stride} p={pad} d={dil} dW[{i}]: got={got} want={want}"
                );
            }
            for (got, want) in dx.iter().zip(dx_want.iter()) {
                assert!(
                    (got - want).abs() < 1e-5 * want.abs().max(1.0),
                    "k={k} st={stride} p={pad} d={dil} dx: got={got} want={want}"
                );
            }
        }
    }

    #[test]
    fn dwconv_gradients_match_finite_differences() {
        let mut r = rng::stream(0, "init", 1);
        // (k, stride, pad, dilation, out_hw) — every shape the ops use.
        for (k, stride, pad, dil, out_hw) in [
            (3, 1, 1, 1, (6, 6)),
            (3, 2, 1, 1, (3, 3)),
            (5, 1, 2, 1, (6, 6)),
            (5, 2, 2, 1, (3, 3)),
            (5, 1, 4, 2, (6, 6)),
            (5, 2, 4, 2, (3, 3)),
            (3, 1, 2, 2, (6, 6)),
            (3, 2, 2, 2, (3, 3)),
        ] {
            let mut ps = ParamStore::new();
            let mut l = DwConv::new(&mut ps, &mut r, 3, k, stride, pad, dil);
            let ids = [l.w];
            let x = rand_feat(3, (3, 2, 6, 6));
            check_layer_grads(&mut ps, &mut l, &ids, &x, (3, 2, out_hw.0, out_hw.1), 12);
        }
    }

    #[test]
    fn conv2d_gradients_match_finite_differences() {
        let mut r = rng::stream(0, "init", 2);
        let mut ps = ParamStore::new();
        let mut l = Conv2d::new(&mut ps, &mut r, 3, 4, 3, 1);
        let ids = [l.w];
        let x = rand_feat(4, (3, 2, 5, 5));
        check_layer_grads(&mut ps, &mut l, &ids, &x, (4, 2, 5, 5), 12);
    }

    #[test]
    fn batchnorm_gradients_match_finite_differences() {
        for affine in [false, true] {
            let mut ps = ParamStore::new();
            let mut l = BatchNorm::new(&mut ps, 3, affine, false);
            let ids: Vec<ParamId> = [l.gamma, l.beta].into_iter().flatten().collect();
            let x = rand_feat(5, (3, 2, 4, 4));
            check_layer_grads(&mut ps, &mut l, &ids, &x, (3, 2, 4, 4), 6);
        }
    }

    #[test]
    fn batchnorm_normalizes_per_channel() {
        let mut ps = ParamStore::new();
        let mut l = BatchNorm::new(&mut ps, 2, false, false);
        let x = rand_feat(6, (2, 4, 8, 8)) * 3.0 + 1.5;
        let y = l.forward(&mut ps, &x, Mode::Train);
        for cc in 0..2 {
            let ys = y.slice(s![cc, .., .., ..]);
            let m = ys.mean().unwrap();
            let v = ys.mapv(|a| (a - m) * (a - m)).mean().unwrap();
            assert!(m.abs() < 1e-4, "channel mean {m}");
            assert!((v - 1.0).abs() < 1e-2, "channel var {v}");
        }
    }

    #[test]
    fn batchnorm_eval_uses_running_stats() {
        let mut ps = ParamStore::new();
        let mut l = BatchNorm::new(&mut ps, 2, false, true);
        let x = rand_feat(7, (2, 4, 4, 4)) * 2.0 + 1.0;
        for _ in 0..200 {
            l.forward(&mut ps, &x, Mode::Train);
        }
        // After many updates on the same batch the running stats converge to
        // the batch stats, so eval output matches train output closely.
        let yt = l.forward(&mut ps, &x, Mode::Train);
        let ye = l.forward(&mut ps, &x, Mode::Eval);
        let max_diff = (&yt - &ye).iter().fold(0f32, |a, &b| a.max(b.abs()));
        assert!(max_diff < 0.05, "train/eval divergence {max_diff}");
    }

    #[test]
    fn maxpool_matches_hand_example_and_fd() {
        // 1 channel, 1 sample, 4x4, stride 2: windows overlap at the center.
        let x = Array4::from_shape_vec(
            (1, 1, 4, 4),
            vec![
                1.0, 2.0, 3.0, 4.0, //
                5.0, 6.0, 7.0, 8.0, //
                9.0, 10.0, 11.0, 12.0, //
                13.0, 14.0, 15.0, 16.0,
            ],
        )
        .unwrap();
        let mut ps = ParamStore::new();
        let mut l = MaxPool::new(3, 2, 1);
        let y = l.forward(&mut ps, &x, Mode::Train);
        assert_eq!(y.dim(), (1, 1, 2, 2));
        assert_eq!(
            y.as_slice().unwrap(),
            &[6.0, 8.0, 14.0, 16.0],
            "3x3/stride-2/pad-1 max pooling of a 4x4 ramp"
        );
        let dy = Array4::from_elem((1, 1, 2, 2), 1.0f32);
        let dx = l.backward(&mut ps, &dy, true);
        // Each max location receives exactly one unit of gradient.
        assert_eq!(dx[[0, 0, 1, 1]], 1.0);
        assert_eq!(dx[[0, 0, 1, 3]], 1.0);
        assert_eq!(dx[[0, 0, 3, 1]], 1.0);
        assert_eq!(dx[[0, 0, 3, 3]], 1.0);
        assert_eq!(dx.sum(), 4.0);

        let mut l = MaxPool::new(3, 1, 1);
        let x = rand_feat(8, (2, 2, 5, 5));
        check_layer_grads(&mut ps, &mut l, &[], &x, (2, 2, 5, 5), 8);
    }

    #[test]
    fn avgpool_divisor_excludes_padding() {
        // Constant input: every output must equal the constant only if the
        // divisor counts valid elements, not the padded window size.
        let x = Array4::from_elem((1, 1, 4, 4), 2.0f32);
        let mut ps = ParamStore::new();
        let mut l = AvgPool::new(3, 2, 1);
        let y = l.forward(&mut ps, &x, Mode::Train);
        assert!(y.iter().all(|&v| (v - 2.0).abs() < 1e-6), "{y:?}");

        let mut l = AvgPool::new(3, 1, 1);
        let x = rand_feat(9, (2, 2, 5, 5));
        check_layer_grads(&mut ps, &mut l, &[], &x, (2, 2, 5, 5), 8);
    }

    #[test]
    fn zero_op_outputs_and_backprops_zeros() {
        let mut ps = ParamStore::new();
        let x = rand_feat(10, (3, 2, 6, 6));
        for (stride, hw) in [(1, 6), (2, 3)] {
            let mut l = ZeroOp::new(stride);
            let y = l.forward(&mut ps, &x, Mode::Train);
            assert_eq!(y.dim(), (3, 2, hw, hw));
            assert!(y.iter().all(|&v| v == 0.0));
            let dx = l.backward(&mut ps, &y, true);
            assert_eq!(dx.dim(), x.dim());
            assert!(dx.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn factorized_reduce_gradients_match_finite_differences() {
        let mut r = rng::stream(0, "init", 3);
        let mut ps = ParamStore::new();
        let before = ps.len();
        let mut l = FactorizedReduce::new(&mut ps, &mut r, 3, 4, false, false);
        let ids = ps.ids_from(before);
        let x = rand_feat(11, (3, 2, 6, 6));
        check_layer_grads(&mut ps, &mut l, &ids, &x, (4, 2, 3, 3), 10);
    }

    #[test]
    fn sequential_composes_forward_and_backward() {
        let mut r = rng::stream(0, "init", 4);
        let mut ps = ParamStore::new();
        let before = ps.len();
        let mut l = Sequential::new(vec![
            Box::new(Relu::new()),
            Box::new(DwConv::new(&mut ps, &mut r, 3, 3, 1, 1, 1)),
            Box::new(PwConv::new(&mut ps, &mut r, 3, 3, 1, (0, 0))),
            Box::new(BatchNorm::new(&mut ps, 3, false, false)),
        ]);
        let ids = ps.ids_from(before);
        let x = rand_feat(12, (3, 2, 5, 5));
        check_layer_grads(&mut ps, &mut l, &ids, &x, (3, 2, 5, 5), 6);
    }

    #[test]
    fn global_pool_and_linear_gradients_match_finite_differences() {
        let mut r = rng::stream(0, "init", 5);
        let mut ps = ParamStore::new();
        let mut gap = GlobalAvgPool::new();
        let mut lin = Linear::new(&mut ps, &mut r, 3, 4);
        let x = rand_feat(13, (3, 2, 4, 4));
        let mut t_rng = rng::stream(14, "nn_test", 0);
        let t = Array2::from_shape_fn((4, 2), |_| t_rng.random_range(-1.0..1.0f32));

        ps.zero_grads();
        let f = gap.forward(&x);
        let y = lin.forward(&ps, &f);
        let mut acc = 0f64;
        ndarray::azip!((&a in &y, &b in &t) acc += (a as f64) * (b as f64));
        let df = lin.backward(&mut ps, &t, true);
        let dx = gap.backward(&df);
        assert_eq!(dx.dim(), x.dim());

        for id in [lin.w, lin.b] {
            let len = ps.value(id).len();
            for flat in 0..len {
                let analytic = ps.grad(id).as_slice().unwrap()[flat] as f64;
                let mut f2 = |ps: &mut ParamStore| {
                    let f = gap.forward(&x);
                    let y = lin.forward(ps, &f);
                    lin.backward(ps, &t, false);
                    let mut acc = 0f64;
                    ndarray::azip!((&a in &y, &b in &t) acc += (a as f64) * (b as f64));
                    acc
                };
                let numeric = fd_param(&mut ps, id, flat, EPS, &mut f2);
                assert!(
                    rel_err(analytic, numeric) < TOL as f64,
                    "linear grad mismatch flat={flat}: {analytic} vs {numeric}"
                );
            }
        }
        // Input gradient at a few entries.
        for flat in (0..x.len()).step_by(17) {
            let analytic = dx.as_slice().unwrap()[flat] as f64;
            let probe = |xp: &Feat, gap: &mut GlobalAvgPool, lin: &mut Linear, ps: &mut ParamStore| {
                let f = gap.forward(xp);
                let y = lin.forward(ps, &f);
                lin.backward(ps, &t, false);
                let mut acc = 0f64;
                ndarray::azip!((&a in &y, &b in &t) acc += (a as f64) * (b as f64));
                acc
            };
            let mut xp = x.clone();
            xp.as_slice_mut().unwrap()[flat] += EPS;
            let lp = probe(&xp, &mut gap, &mut lin, &mut ps);
            xp.as_slice_mut().unwrap()[flat] -= 2.0 * EPS;
            let lm = probe(&xp, &mut gap, &mut lin, &mut ps);
            let numeric = (lp - lm) / (2.0 * EPS as f64);
            assert!(rel_err(analytic, numeric) < TOL as f64);
        }
        let _ = acc;
    }

    #[test]
    fn kaiming_std_is_close_to_target() {
        let mut r = rng::stream(0, "init", 6);
        let w = kaiming_normal(&mut r, &[64, 64], 64);
        let std = (2.0f64 / 64.0).sqrt();
        let sample_std = (w.iter().map(|&v| (v as f64).powi(2)).sum::<f64>() / w.len() as f64).sqrt();
        assert!((sample_std - std).abs() / std < 0.1, "{sample_std} vs {std}");
    }

    #[test]
    fn linear_bias_is_applied_per_row() {
        let mut r = rng::stream(0, "init", 7);
        let mut ps = ParamStore::new();
        let lin = Linear::new(&mut ps, &mut r, 2, 3);
        // Overwrite with known values.
        *ps.value_mut(lin.w) = ArrayD::from_shape_vec(vec![3, 2], vec![1., 0., 0., 1., 1., 1.]).unwrap();
        *ps.value_mut(lin.b) = Array1::from_vec(vec![0.5, -0.5, 0.0]).into_dyn();
        let mut lin = lin;
        let x = Array2::from_shape_vec((2, 2), vec![1., 2., 3., 4.]).unwrap();
        let y = lin.forward(&ps, &x);
        assert_eq!(y.as_slice().unwrap(), &[1.5, 2.5, 2.5, 3.5, 4.0, 6.0]);
    }
}
