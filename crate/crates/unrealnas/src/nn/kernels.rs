//! Tight inner loops shared by the layer implementations.
//!
//! Reductions accumulate in `f64` over a fixed number of lanes so the result
//! is deterministic for a given build while still letting the compiler keep
//! several independent chains in flight. Callers hand in contiguous slices;
//! layers guarantee that by keeping activations in standard layout.

const LANES: usize = 8;

/// `sum(xs)` with f64 accumulation.
pub(crate) fn sum_f64(xs: &[f32]) -> f64 {
    let mut lanes = [0f64; LANES];
    let chunks = xs.chunks_exact(LANES);
    let tail = chunks.remainder();
    for ch in chunks {
        for (l, &v) in lanes.iter_mut().zip(ch) {
            *l += v as f64;
        }
    }
    for (l, &v) in lanes.iter_mut().zip(tail) {
        *l += v as f64;
    }
    lanes.iter().sum()
}

/// `sum((xs - mean)^2)` with f64 accumulation.
pub(crate) fn center_sumsq_f64(xs: &[f32], mean: f64) -> f64 {
    let mut lanes = [0f64; LANES];
    let chunks = xs.chunks_exact(LANES);
    let tail = chunks.remainder();
    for ch in chunks {
        for (l, &v) in lanes.iter_mut().zip(ch) {
            let d = v as f64 - mean;
            *l += d * d;
        }
    }
    for (l, &v) in lanes.iter_mut().zip(tail) {
        let d = v as f64 - mean;
        *l += d * d;
    }
    lanes.iter().sum()
}

/// `dot(a, b)` with f64 accumulation.
pub(crate) fn dot_f64(a: &[f32], b: &[f32]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut lanes = [0f64; LANES];
    let ca = a.chunks_exact(LANES);
    let cb = b.chunks_exact(LANES);
    let (ta, tb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for ((l, &u), &v) in lanes.iter_mut().zip(x).zip(y) {
            *l += u as f64 * v as f64;
        }
    }
    for ((l, &u), &v) in lanes.iter_mut().zip(ta).zip(tb) {
        *l += u as f64 * v as f64;
    }
    lanes.iter().sum()
}

/// `(sum(a), dot(a, b))` in one pass, both with f64 accumulation.
pub(crate) fn sum_and_dot_f64(a: &[f32], b: &[f32]) -> (f64, f64) {
    debug_assert_eq!(a.len(), b.len());
    let mut sl = [0f64; LANES];
    let mut dl = [0f64; LANES];
    let ca = a.chunks_exact(LANES);
    let cb = b.chunks_exact(LANES);
    let (ta, tb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for i in 0..LANES {
            sl[i] += x[i] as f64;
            dl[i] += x[i] as f64 * y[i] as f64;
        }
    }
    for i in 0..ta.len() {
        sl[i] += ta[i] as f64;
        dl[i] += ta[i] as f64 * tb[i] as f64;
    }
    (sl.iter().sum(), dl.iter().sum())
}

/// `dst += s * xs`, elementwise.
#[inline]
pub(crate) fn axpy(dst: &mut [f32], s: f32, xs: &[f32]) {
    debug_assert_eq!(dst.len(), xs.len());
    for (d, &v) in dst.iter_mut().zip(xs) {
        *d += s * v;
    }
}

/// Copy an `h x w` plane into the interior of a `(h + 2m) x (w + 2m)` scratch
/// buffer. The caller keeps one buffer per layer; its border cells are zeroed
/// on allocation and never written afterwards, so convolutions can read past
/// the image edge unconditionally.
pub(crate) fn pad_plane(dst: &mut [f32], src: &[f32], h: usize, w: usize, m: usize) {
    let wp = w + 2 * m;
    debug_assert_eq!(dst.len(), (h + 2 * m) * wp);
    debug_assert_eq!(src.len(), h * w);
    for (r, row) in src.chunks_exact(w).enumerate() {
        dst[(r + m) * wp + m..][..w].copy_from_slice(row);
    }
}

/// One row of a dilated correlation, all taps fused:
/// `dst[i] += sum_t w[t] * src[i + t * d]`.
///
/// Caller guarantees `src.len() >= dst.len() + (w.len() - 1) * d`. The 2-, 3-
/// and 5-tap paths cover every kernel the search space builds, including the
/// parity-split tap subsets of strided backward passes.
#[inline]
pub(crate) fn row_conv_acc(dst: &mut [f32], src: &[f32], w: &[f32], d: usize) {
    let len = dst.len();
    match w.len() {
        2 => {
            let s0 = &src[..len];
            let s1 = &src[d..d + len];
            for (i, o) in dst.iter_mut().enumerate() {
                *o += w[0] * s0[i] + w[1] * s1[i];
            }
        }
        3 => {
            let s0 = &src[..len];
            let s1 = &src[d..d + len];
            let s2 = &src[2 * d..2 * d + len];
            for (i, o) in dst.iter_mut().enumerate() {
                *o += w[0] * s0[i] + w[1] * s1[i] + w[2] * s2[i];
            }
        }
        5 => {
            let s0 = &src[..len];
            let s1 = &src[d..d + len];
            let s2 = &src[2 * d..2 * d + len];
            let s3 = &src[3 * d..3 * d + len];
            let s4 = &src[4 * d..4 * d + len];
            for (i, o) in dst.iter_mut().enumerate() {
                *o += w[0] * s0[i]
                    + w[1] * s1[i]
                    + w[2] * s2[i]
                    + w[3] * s3[i]
                    + w[4] * s4[i];
            }
        }
        _ => {
            for (t, &wv) in w.iter().enumerate() {
                axpy(dst, wv, &src[t * d..t * d + len]);
            }
        }
    }
}

/// Stride-2 variant of [`row_conv_acc`]:
/// `dst[i] += sum_t w[t] * src[2 * i + t * d]`.
///
/// Caller guarantees `src.len() >= 2 * (dst.len() - 1) + (w.len() - 1) * d + 1`.
#[inline]
pub(crate) fn row_conv_acc_s2(dst: &mut [f32], src: &[f32], w: &[f32], d: usize) {
    match w.len() {
        3 => {
            let (s0, s1, s2) = (src, &src[d..], &src[2 * d..]);
            for (i, o) in dst.iter_mut().enumerate() {
                *o += w[0] * s0[2 * i] + w[1] * s1[2 * i] + w[2] * s2[2 * i];
            }
        }
        5 => {
            let (s0, s1, s2) = (src, &src[d..], &src[2 * d..]);
            let (s3, s4) = (&src[3 * d..], &src[4 * d..]);
            for (i, o) in dst.iter_mut().enumerate() {
                *o += w[0] * s0[2 * i]
                    + w[1] * s1[2 * i]
                    + w[2] * s2[2 * i]
                    + w[3] * s3[2 * i]
                    + w[4] * s4[2 * i];
            }
        }
        _ => {
            for (t, &wv) in w.iter().enumerate() {
                let st = &src[t * d..];
                for (i, o) in dst.iter_mut().enumerate() {
                    *o += wv * st[2 * i];
                }
            }
        }
    }
}

/// A full output plane of a dilated depthwise correlation over a padded
/// input plane: for each `(oh, i)`,
/// `dst[oh * wo + i] += sum_{r,c} wt[r * k + c] * src[(oh * st + r * d) * wp + i * st + c * d]`.
///
/// The 3x3 and 5x5 arms fuse every tap of the window into a single pass per
/// output row, so each element costs one load per tap plus a single store,
/// and the kernel-size dispatch happens once per plane instead of once per
/// row. Callers guarantee `src` covers the full window footprint.
pub(crate) fn plane_conv_acc(
    dst: &mut [f32],
    wo: usize,
    src: &[f32],
    wp: usize,
    wt: &[f32],
    k: usize,
    d: usize,
    st: usize,
) {
    debug_assert_eq!(wt.len(), k * k);
    debug_assert_eq!(dst.len() % wo.max(1), 0);
    match (st, k) {
        (1, 3) => plane_arm::<3, 1>(dst, wo, src, wp, wt, d),
        (2, 3) => plane_arm::<3, 2>(dst, wo, src, wp, wt, d),
        (1, 5) => plane_arm::<5, 1>(dst, wo, src, wp, wt, d),
        (2, 5) => plane_arm::<5, 2>(dst, wo, src, wp, wt, d),
        _ => {
            for (oh, drow) in dst.chunks_exact_mut(wo).enumerate() {
                for r in 0..k {
                    let s = &src[(oh * st + r * d) * wp..];
                    if st == 1 {
                        row_conv_acc(drow, s, &wt[r * k..][..k], d);
                    } else {
                        row_conv_acc_s2(drow, s, &wt[r * k..][..k], d);
                    }
                }
            }
        }
    }
}

fn plane_arm<const K: usize, const ST: usize>(
    dst: &mut [f32],
    wo: usize,
    src: &[f32],
    wp: usize,
    wt: &[f32],
    d: usize,
) {
    let w: [[f32; K]; K] = core::array::from_fn(|r| core::array::from_fn(|c| wt[r * K + c]));
    for (oh, drow) in dst.chunks_exact_mut(wo).enumerate() {
        let rows: [&[f32]; K] = core::array::from_fn(|r| &src[(oh * ST + r * d) * wp..]);
        stencil_row::<K, ST>(drow, rows, &w, d);
    }
}

/// One output row with all `K * K` taps fused:
/// `dst[i] += sum_{r,c} w[r][c] * rows[r][ST * i + c * d]`.
#[inline(always)]
fn stencil_row<const K: usize, const ST: usize>(
    dst: &mut [f32],
    rows: [&[f32]; K],
    w: &[[f32; K]; K],
    d: usize,
) {
    let n = dst.len();
    if n == 0 {
        return;
    }
    // Tight tap slices let the optimizer prove the affine indices in bounds.
    let m = ST * (n - 1) + 1;
    let taps: [[&[f32]; K]; K] =
        core::array::from_fn(|r| core::array::from_fn(|c| &rows[r][c * d..c * d + m]));
    for (i, o) in dst.iter_mut().enumerate() {
        let j = ST * i;
        let mut acc = *o;
        for r in 0..K {
            for c in 0..K {
                acc += w[r][c] * taps[r][c][j];
            }
        }
        *o = acc;
    }
}

/// Rectangle correlation `sum_r dot(a[r * aw ..][..cols], b[r * bw ..][..cols])`
/// with f64 lane accumulators carried across rows and reduced once, so short
/// rows do not pay a reduction epilogue each.
pub(crate) fn corr2_f64(a: &[f32], aw: usize, b: &[f32], bw: usize, rows: usize, cols: usize) -> f64 {
    let mut lanes = [0f64; LANES];
    for r in 0..rows {
        let ar = &a[r * aw..][..cols];
        let br = &b[r * bw..][..cols];
        let ca = ar.chunks_exact(LANES);
        let cb = br.chunks_exact(LANES);
        let (ta, tb) = (ca.remainder(), cb.remainder());
        for (x, y) in ca.zip(cb) {
            for ((l, &u), &v) in lanes.iter_mut().zip(x).zip(y) {
                *l += u as f64 * v as f64;
            }
        }
        for ((l, &u), &v) in lanes.iter_mut().zip(ta).zip(tb) {
            *l += u as f64 * v as f64;
        }
    }
    lanes.iter().sum()
}

/// [`corr2_f64`] with `b` sampled at every second column:
/// `sum_r sum_i a[r * aw + i] * b[r * bw + 2 * i]`.
pub(crate) fn corr2_s2_f64(
    a: &[f32],
    aw: usize,
    b: &[f32],
    bw: usize,
    rows: usize,
    cols: usize,
) -> f64 {
    if cols == 0 {
        return 0.0;
    }
    let mut lanes = [0f64; LANES];
    for r in 0..rows {
        let ar = &a[r * aw..][..cols];
        let br = &b[r * bw..][..2 * cols - 1];
        let ch = ar.chunks_exact(LANES);
        let tail = ch.remainder();
        for (ci, x) in ch.enumerate() {
            let base = ci * LANES * 2;
            for (j, (l, &u)) in lanes.iter_mut().zip(x).enumerate() {
                *l += u as f64 * br[base + 2 * j] as f64;
            }
        }
        let base = (cols - tail.len()) * 2;
        for (j, (l, &u)) in lanes.iter_mut().zip(tail).enumerate() {
            *l += u as f64 * br[base + 2 * j] as f64;
        }
    }
    lanes.iter().sum()
}

/// `y = w . x` for a row-major `(m, k)` by `(k, n)` product, written for the
/// small `m`/`k` and large `n` of pointwise convolutions, where packing-based
/// GEMMs spend most of their time shuffling data. Walks `n` in vector-width
/// column tiles, accumulating four output rows per pass so each loaded `x`
/// tile feeds four multiply-adds.
pub(crate) fn gemm_small(m: usize, k: usize, n: usize, w: &[f32], x: &[f32], y: &mut [f32]) {
    debug_assert_eq!(w.len(), m * k);
    debug_assert_eq!(x.len(), k * n);
    debug_assert_eq!(y.len(), m * n);
    const T: usize = 8;
    let mut rows: Vec<&mut [f32]> = y.chunks_exact_mut(n).collect();
    let mut mi = 0;
    while mi + 4 <= m {
        let [r0, r1, r2, r3] = &mut rows[mi..mi + 4] else {
            unreachable!()
        };
        let (w0, w1, w2, w3) = (
            &w[mi * k..][..k],
            &w[(mi + 1) * k..][..k],
            &w[(mi + 2) * k..][..k],
            &w[(mi + 3) * k..][..k],
        );
        let mut j = 0;
        while j + T <= n {
            let (mut a0, mut a1, mut a2, mut a3) = ([0f32; T], [0f32; T], [0f32; T], [0f32; T]);
            for kk in 0..k {
                let xs = &x[kk * n + j..][..T];
                let (c0, c1, c2, c3) = (w0[kk], w1[kk], w2[kk], w3[kk]);
                for (l, &v) in xs.iter().enumerate() {
                    a0[l] += c0 * v;
                    a1[l] += c1 * v;
                    a2[l] += c2 * v;
                    a3[l] += c3 * v;
                }
            }
            r0[j..j + T].copy_from_slice(&a0);
            r1[j..j + T].copy_from_slice(&a1);
            r2[j..j + T].copy_from_slice(&a2);
            r3[j..j + T].copy_from_slice(&a3);
            j += T;
        }
        for jj in j..n {
            let (mut a0, mut a1, mut a2, mut a3) = (0f32, 0f32, 0f32, 0f32);
            for kk in 0..k {
                let v = x[kk * n + jj];
                a0 += w0[kk] * v;
                a1 += w1[kk] * v;
                a2 += w2[kk] * v;
                a3 += w3[kk] * v;
            }
            r0[jj] = a0;
            r1[jj] = a1;
            r2[jj] = a2;
            r3[jj] = a3;
        }
        mi += 4;
    }
    while mi < m {
        let dst = &mut rows[mi];
        let wr = &w[mi * k..][..k];
        let mut j = 0;
        while j + T <= n {
            let mut acc = [0f32; T];
            for kk in 0..k {
                let xs = &x[kk * n + j..][..T];
                let c = wr[kk];
                for (l, &v) in xs.iter().enumerate() {
                    acc[l] += c * v;
                }
            }
            dst[j..j + T].copy_from_slice(&acc);
            j += T;
        }
        for jj in j..n {
            let mut acc = 0f32;
            for kk in 0..k {
                acc += wr[kk] * x[kk * n + jj];
            }
            dst[jj] = acc;
        }
        mi += 1;
    }
}

/// `acc[mi * k + kk] += dot(a_row_mi, b_row_kk)` over `(m, n)` and `(k, n)`
/// row-major operands — the `dW = dY . X^T` shape of a pointwise convolution.
/// Column blocks keep the active rows cache-resident; 2x2 row tiles share
/// every load and f64 conversion across four accumulators.
pub(crate) fn gemm_nt_f64(m: usize, k: usize, n: usize, a: &[f32], b: &[f32], acc: &mut [f64]) {
    debug_assert_eq!(a.len(), m * n);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(acc.len(), m * k);
    const BLOCK: usize = 512;
    const L4: usize = 4;
    let mut j = 0;
    while j < n {
        let blk = BLOCK.min(n - j);
        let mut mi = 0;
        while mi + 2 <= m {
            let a0 = &a[mi * n + j..][..blk];
            let a1 = &a[(mi + 1) * n + j..][..blk];
            let mut kk = 0;
            while kk + 2 <= k {
                let b0 = &b[kk * n + j..][..blk];
                let b1 = &b[(kk + 1) * n + j..][..blk];
                let (mut l00, mut l01) = ([0f64; L4], [0f64; L4]);
                let (mut l10, mut l11) = ([0f64; L4], [0f64; L4]);
                let full = blk / L4 * L4;
                let mut t = 0;
                while t < full {
                    let x0: &[f32; L4] = a0[t..t + L4].try_into().unwrap();
                    let x1: &[f32; L4] = a1[t..t + L4].try_into().unwrap();
                    let y0: &[f32; L4] = b0[t..t + L4].try_into().unwrap();
                    let y1: &[f32; L4] = b1[t..t + L4].try_into().unwrap();
                    for l in 0..L4 {
                        let (u0, u1) = (x0[l] as f64, x1[l] as f64);
                        let (v0, v1) = (y0[l] as f64, y1[l] as f64);
                        l00[l] += u0 * v0;
                        l01[l] += u0 * v1;
                        l10[l] += u1 * v0;
                        l11[l] += u1 * v1;
                    }
                    t += L4;
                }
                for t in full..blk {
                    let (u0, u1) = (a0[t] as f64, a1[t] as f64);
                    let (v0, v1) = (b0[t] as f64, b1[t] as f64);
                    let l = t - full;
                    l00[l] += u0 * v0;
                    l01[l] += u0 * v1;
                    l10[l] += u1 * v0;
                    l11[l] += u1 * v1;
                }
                acc[mi * k + kk] += l00.iter().sum::<f64>();
                acc[mi * k + kk + 1] += l01.iter().sum::<f64>();
                acc[(mi + 1) * k + kk] += l10.iter().sum::<f64>();
                acc[(mi + 1) * k + kk + 1] += l11.iter().sum::<f64>();
                kk += 2;
            }
            if kk < k {
                let br = &b[kk * n + j..][..blk];
                acc[mi * k + kk] += dot_f64(a0, br);
                acc[(mi + 1) * k + kk] += dot_f64(a1, br);
            }
            mi += 2;
        }
        if mi < m {
            let ar = &a[mi * n + j..][..blk];
            for kk in 0..k {
                acc[mi * k + kk] += dot_f64(ar, &b[kk * n + j..][..blk]);
            }
        }
        j += blk;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn series(n: usize, seed: u64) -> Vec<f32> {
        // Cheap deterministic pseudo-random values in [-1, 1).
        let mut state = seed.wrapping_mul(0x9e3779b97f4a7c15).wrapping_add(1);
        (0..n)
            .map(|_| {
                state = state
                    .wrapping_mul(6364136223846793005)
                    .wrapping_add(1442695040888963407);
                ((state >> 40) as f32 / (1 << 23) as f32) - 1.0
            })
            .collect()
    }

    #[test]
    fn reductions_match_naive() {
        for n in [0, 1, 7, 8, 9, 63, 64, 100] {
            let a = series(n, 3);
            let b = series(n, 7);
            let naive_sum: f64 = a.iter().map(|&v| v as f64).sum();
            let naive_dot: f64 = a.iter().zip(&b).map(|(&u, &v)| u as f64 * v as f64).sum();
            assert!((sum_f64(&a) - naive_sum).abs() < 1e-9);
            assert!((dot_f64(&a, &b) - naive_dot).abs() < 1e-9);
            let mean = if n == 0 { 0.0 } else { naive_sum / n as f64 };
            let naive_var: f64 = a.iter().map(|&v| (v as f64 - mean).powi(2)).sum();
            assert!((center_sumsq_f64(&a, mean) - naive_var).abs() < 1e-9);
            let (s, d) = sum_and_dot_f64(&a, &b);
            assert!((s - naive_sum).abs() < 1e-9);
            assert!((d - naive_dot).abs() < 1e-9);
        }
    }

    #[test]
    fn axpy_matches_naive() {
        let a = series(37, 1);
        let b = series(37, 2);
        let mut got = a.clone();
        axpy(&mut got, 0.37, &b);
        for i in 0..a.len() {
            assert_eq!(got[i], a[i] + 0.37 * b[i]);
        }
    }

    #[test]
    fn row_conv_matches_per_tap_adds() {
        for k in [2usize, 3, 5] {
            for d in [1usize, 2] {
                let len = 29;
                let src = series(len + (k - 1) * d, k as u64);
                let w = series(k, 99);
                let base = series(len, 5);
                let mut got = base.clone();
                row_conv_acc(&mut got, &src, &w, d);
                let mut want = base.clone();
                for t in 0..k {
                    for i in 0..len {
                        want[i] += w[t] * src[i + t * d];
                    }
                }
                for i in 0..len {
                    assert!(
                        (got[i] - want[i]).abs() <= 1e-5 * want[i].abs().max(1.0),
                        "k={k} d={d} i={i}: {} vs {}",
                        got[i],
                        want[i]
                    );
                }
            }
        }
    }

    #[test]
    fn gemms_match_naive_products() {
        // Shapes chosen to hit the 4-row tile, the remainder rows, even and
        // odd k, and the vector-width tail of n.
        for (m, k, n) in [(5, 7, 1203), (8, 8, 64), (4, 2, 17), (1, 3, 9), (2, 1, 8)] {
            let w = series(m * k, 11);
            let x = series(k * n, 12);
            let mut y = vec![0f32; m * n];
            gemm_small(m, k, n, &w, &x, &mut y);
            for mi in 0..m {
                for j in 0..n {
                    let want: f32 = (0..k).map(|kk| w[mi * k + kk] * x[kk * n + j]).sum();
                    assert!(
                        (y[mi * n + j] - want).abs() < 1e-4,
                        "gemm_small m={m} k={k} n={n} at ({mi},{j})"
                    );
                }
            }
            let a = series(m * n, 13);
            let b = series(k * n, 14);
            let mut acc = vec![0f64; m * k];
            gemm_nt_f64(m, k, n, &a, &b, &mut acc);
            for mi in 0..m {
                for kk in 0..k {
                    let want: f64 = (0..n)
                        .map(|j| a[mi * n + j] as f64 * b[kk * n + j] as f64)
                        .sum();
                    assert!(
                        (acc[mi * k + kk] - want).abs() < 1e-9,
                        "gemm_nt m={m} k={k} n={n} at ({mi},{kk})"
                    );
                }
            }
        }
    }

    #[test]
    fn pad_plane_writes_interior_only() {
        let (h, w, m) = (3, 4, 2);
        let src = series(h * w, 21);
        let mut dst = vec![0f32; (h + 2 * m) * (w + 2 * m)];
        pad_plane(&mut dst, &src, h, w, m);
        let wp = w + 2 * m;
        for r in 0..h + 2 * m {
            for c in 0..wp {
                let inside = r >= m && r < h + m && c >= m && c < w + m;
                let want = if inside { src[(r - m) * w + (c - m)] } else { 0.0 };
                assert_eq!(dst[r * wp + c], want, "at ({r},{c})");
            }
        }
    }

    #[test]
    fn strided_row_conv_matches_naive() {
        for k in [2usize, 3, 5] {
            for d in [1usize, 2] {
                let len = 13;
                let src = series(2 * (len - 1) + (k - 1) * d + 1, 31 + k as u64);
                let w = series(k, 77);
                let base = series(len, 9);
                let mut got = base.clone();
                row_conv_acc_s2(&mut got, &src, &w, d);
                for i in 0..len {
                    let want: f32 = base[i] + (0..k).map(|t| w[t] * src[2 * i + t * d]).sum::<f32>();
                    assert!(
                        (got[i] - want).abs() <= 1e-5 * want.abs().max(1.0),
                        "k={k} d={d} i={i}"
                    );
                }
            }
        }
    }

    #[test]
    fn plane_conv_matches_per_tap_adds() {
        // Covers the four monomorphized stencil arms and the generic path.
        for (k, st) in [(3usize, 1usize), (3, 2), (5, 1), (5, 2), (2, 1), (2, 2)] {
            for d in [1usize, 2] {
                let (ho, wo) = (4, 6);
                let hp = (ho - 1) * st + (k - 1) * d + 1;
                let wp = (wo - 1) * st + (k - 1) * d + 1 + 3;
                let src = series(hp * wp, 13 + (k * st) as u64);
                let wt = series(k * k, 5);
                let base = series(ho * wo, 3);
                let mut got = base.clone();
                plane_conv_acc(&mut got, wo, &src, wp, &wt, k, d, st);
                for oh in 0..ho {
                    for i in 0..wo {
                        let mut want = base[oh * wo + i];
                        for r in 0..k {
                            for c in 0..k {
                                want += wt[r * k + c] * src[(oh * st + r * d) * wp + i * st + c * d];
                            }
                        }
                        let g = got[oh * wo + i];
                        assert!(
                            (g - want).abs() <= 1e-4 * want.abs().max(1.0),
                            "k={k} st={st} d={d} at ({oh},{i}): got={g} want={want}"
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn rect_correlations_match_naive() {
        for (rows, cols) in [(1, 1), (3, 7), (4, 8), (5, 19)] {
            let aw = cols + 3;
            let bw = 2 * cols + 5;
            let a = series(rows * aw, 41);
            let b = series(rows * bw, 42);
            let want: f64 = (0..rows)
                .flat_map(|r| (0..cols).map(move |i| (r, i)))
                .map(|(r, i)| a[r * aw + i] as f64 * b[r * bw + i] as f64)
                .sum();
            assert!((corr2_f64(&a, aw, &b, bw, rows, cols) - want).abs() < 1e-9);
            let want2: f64 = (0..rows)
                .flat_map(|r| (0..cols).map(move |i| (r, i)))
                .map(|(r, i)| a[r * aw + i] as f64 * b[r * bw + 2 * i] as f64)
                .sum();
            assert!((corr2_s2_f64(&a, aw, &b, bw, rows, cols) - want2).abs() < 1e-9);
        }
    }
}
