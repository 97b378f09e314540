//! Forward and backward kernels for every layer type.
//!
//! Convolutions and pooling operate on volumes `[C, T, H, W]`; the 2D
//! variants are the `T = 1` case with a unit temporal kernel. All
//! convolutions are stride-1 "valid" cross-correlations lowered to GEMM
//! through an im2col buffer. Pooling is non-overlapping with floor division.
//!
//! Slice kernels are what the model runs; the `Tensor` wrappers at the
//! bottom are the standalone form of each operation.

use crate::error::{Error, Result};
use crate::tensor::{gemm, gemm_ld, Real, Tensor};

/// Batch-norm running-statistics momentum: `running = m * running + (1 - m) * batch`.
pub const BN_MOMENTUM: f64 = 0.9;
/// Stabilizer added to the variance inside the square root.
pub const BN_EPS: f64 = 1e-5;

/// Per-sample volume extents.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Vol {
    pub c: usize,
    pub t: usize,
    pub h: usize,
    pub w: usize,
}

impl Vol {
    pub fn new(c: usize, t: usize, h: usize, w: usize) -> Self {
        Self { c, t, h, w }
    }

    pub fn len(&self) -> usize {
        self.c * self.t * self.h * self.w
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn plane(&self) -> usize {
        self.t * self.h * self.w
    }
}

/// Geometry of one valid convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub input: Vol,
    pub filters: usize,
    /// `[kt, kh, kw]`
    pub kernel: [usize; 3],
}

impl ConvGeom {
    pub fn new(input: Vol, filters: usize, kernel: [usize; 3]) -> Result<Self> {
        let [kt, kh, kw] = kernel;
        if filters == 0 || kt == 0 || kh == 0 || kw == 0 {
            return Err(Error::shape(format!(
                "kernel {kernel:?} x {filters} filters has a zero extent"
            )));
        }
        if kt > input.t || kh > input.h || kw > input.w {
            return Err(Error::shape(format!(
                "kernel {kernel:?} larger than input {}x{}x{}",
                input.t, input.h, input.w
            )));
        }
        Ok(Self {
            input,
            filters,
            kernel,
        })
    }

    pub fn output(&self) -> Vol {
        let [kt, kh, kw] = self.kernel;
        Vol::new(
            self.filters,
            self.input.t - kt + 1,
            self.input.h - kh + 1,
            self.input.w - kw + 1,
        )
    }

    /// Rows of the im2col matrix (= weight fan-in).
    pub fn patch_len(&self) -> usize {
        let [kt, kh, kw] = self.kernel;
        self.input.c * kt * kh * kw
    }

    pub fn weight_len(&self) -> usize {
        self.filters * self.patch_len()
    }
}

/// Unfolds input patches into `col[patch_len, out_plane]`.
pub fn im2col<T: Real>(input: &[T], g: &ConvGeom, col: &mut [T]) {
    debug_assert_eq!(input.len(), g.input.len());
    im2col_range(input, g, 0, g.output().plane(), col);
}

/// Adjoint of [`im2col`]: accumulates `col` back into `dinput`.
pub fn col2im<T: Real>(col: &[T], g: &ConvGeom, dinput: &mut [T]) {
    col2im_range(col, g, 0, g.output().plane(), dinput);
}

/// Output positions per tile: the patch buffer stays near 256 KiB so it is
/// still in cache when the GEMM packs it.
fn tile_width(g: &ConvGeom) -> usize {
    ((1usize << 16) / g.patch_len()).max(32).min(g.output().plane())
}

/// Calls `f(offset, ot, oy, ox, len)` for each row segment of output
/// positions `[p0, p0 + count)`; `offset` is relative to `p0`.
#[inline]
fn for_runs(o: Vol, p0: usize, count: usize, mut f: impl FnMut(usize, usize, usize, usize, usize)) {
    let mut p = p0;
    let end = p0 + count;
    while p < end {
        let ot = p / (o.h * o.w);
        let oy = p / o.w % o.h;
        let ox = p % o.w;
        let len = (o.w - ox).min(end - p);
        f(p - p0, ot, oy, ox, len);
        p += len;
    }
}

/// Patches of output positions `[p0, p0 + count)` as columns of `col[R, count]`.
fn im2col_range<T: Real>(input: &[T], g: &ConvGeom, p0: usize, count: usize, col: &mut [T]) {
    let (i, o) = (g.input, g.output());
    let [kt, kh, kw] = g.kernel;
    let mut r = 0;
    for c in 0..i.c {
        for dt in 0..kt {
            for dy in 0..kh {
                for dx in 0..kw {
                    let row = &mut col[r * count..(r + 1) * count];
                    for_runs(o, p0, count, |off, ot, oy, ox, len| {
                        let src = ((c * i.t + ot + dt) * i.h + oy + dy) * i.w + ox + dx;
                        row[off..off + len].copy_from_slice(&input[src..src + len]);
                    });
                    r += 1;
                }
            }
        }
    }
}

/// Adjoint of [`im2col_range`]: accumulates `col[R, count]` into `dinput`.
fn col2im_range<T: Real>(col: &[T], g: &ConvGeom, p0: usize, count: usize, dinput: &mut [T]) {
    let (i, o) = (g.input, g.output());
    let [kt, kh, kw] = g.kernel;
    let mut r = 0;
    for c in 0..i.c {
        for dt in 0..kt {
            for dy in 0..kh {
                for dx in 0..kw {
                    let row = &col[r * count..(r + 1) * count];
                    for_runs(o, p0, count, |off, ot, oy, ox, len| {
                        let dst = ((c * i.t + ot + dt) * i.h + oy + dy) * i.w + ox + dx;
                        for (d, &s) in dinput[dst..dst + len].iter_mut().zip(&row[off..off + len]) {
                            *d = *d + s;
                        }
                    });
                    r += 1;
                }
            }
        }
    }
}

/// Patches of output positions `[p0, p0 + count)` as rows of `rows[count, R]`.
fn im2row_range<T: Real>(input: &[T], g: &ConvGeom, p0: usize, count: usize, rows: &mut [T]) {
    let (i, o) = (g.input, g.output());
    let r = g.patch_len();
    let [kt, kh, kw] = g.kernel;
    for_runs(o, p0, count, |off, ot, oy, ox, len| {
        for q in 0..len {
            let patch = &mut rows[(off + q) * r..(off + q + 1) * r];
            let mut j = 0;
            for c in 0..i.c {
                for dt in 0..kt {
                    for dy in 0..kh {
                        let src = ((c * i.t + ot + dt) * i.h + oy + dy) * i.w + ox + q;
                        for (d, &s) in patch[j..j + kw].iter_mut().zip(&input[src..src + kw]) {
                            *d = s;
                        }
                        j += kw;
                    }
                }
            }
        }
    });
}

/// One sample: `out[K, P] = W[K, R] * col[R, P] + bias`, tiled over P.
pub fn conv_forward<T: Real>(
    input: &[T],
    g: &ConvGeom,
    weight: &[T],
    bias: &[T],
    out: &mut [T],
    col: &mut Vec<T>,
) {
    let p = g.output().plane();
    let r = g.patch_len();
    let tw = tile_width(g);
    col.resize(r * tw, T::zero());
    for (k, row) in out.chunks_exact_mut(p).enumerate() {
        row.fill(bias[k]);
    }
    for p0 in (0..p).step_by(tw) {
        let t = tw.min(p - p0);
        im2col_range(input, g, p0, t, col);
        gemm_ld(false, false, g.filters, t, r, T::one(), weight, r, col, t, T::one(), &mut out[p0..], p);
    }
}

/// One sample of the conv backward pass. Accumulates into `dweight` and
/// `dbias` when given; writes `dinput` (overwriting) when given.
pub fn conv_backward<T: Real>(
    input: &[T],
    g: &ConvGeom,
    weight: &[T],
    dout: &[T],
    dparams: Option<(&mut [T], &mut [T])>,
    dinput: Option<&mut [T]>,
    col: &mut Vec<T>,
) {
    let p = g.output().plane();
    let r = g.patch_len();
    let k = g.filters;
    let tw = tile_width(g);
    col.resize(r * tw, T::zero());
    if let Some((dweight, dbias)) = dparams {
        for p0 in (0..p).step_by(tw) {
            let t = tw.min(p - p0);
            // the GEMM packs a row-major [t, R] operand far faster than a
            // transposed view of [R, t]
            im2row_range(input, g, p0, t, col);
            gemm_ld(false, false, k, r, t, T::one(), &dout[p0..], p, col, r, T::one(), dweight, r);
        }
        for (db, row) in dbias.iter_mut().zip(dout.chunks_exact(p)) {
            *db = *db + row.iter().copied().sum::<T>();
        }
    }
    if let Some(dinput) = dinput {
        dinput.fill(T::zero());
        for p0 in (0..p).step_by(tw) {
            let t = tw.min(p - p0);
            gemm_ld(true, false, r, t, k, T::one(), weight, r, &dout[p0..], p, T::zero(), col, t);
            col2im_range(col, g, p0, t, dinput);
        }
    }
}

/// Output extents of non-overlapping pooling over `(T, H, W)` with `[pt, ph, pw]`.
pub fn pool_output(input: Vol, pool: [usize; 3]) -> Result<Vol> {
    let [pt, ph, pw] = pool;
    if pt == 0 || ph == 0 || pw == 0 {
        return Err(Error::shape(format!("pool extents {pool:?} must be >= 1")));
    }
    if pt > input.t || ph > input.h || pw > input.w {
        return Err(Error::shape(format!(
            "pool {pool:?} exceeds input {}x{}x{}",
            input.t, input.h, input.w
        )));
    }
    Ok(Vol::new(input.c, input.t / pt, input.h / ph, input.w / pw))
}

/// One sample of max pooling; `argmax` receives flat input indices.
/// Ties resolve to the first maximum in scan order.
pub fn maxpool_forward_slice<T: Real>(
    input: &[T],
    iv: Vol,
    pool: [usize; 3],
    out: &mut [T],
    argmax: &mut [u32],
) {
    let [pt, ph, pw] = pool;
    let (ot, oh, ow) = (iv.t / pt, iv.h / ph, iv.w / pw);
    if pt == 1 && ph == 2 && pw == 2 {
        return maxpool_2x2(input, iv, out, argmax);
    }
    let mut o = 0;
    for c in 0..iv.c {
        for zt in 0..ot {
            for zy in 0..oh {
                for zx in 0..ow {
                    let mut best = T::neg_infinity();
                    let mut best_i = 0usize;
                    for dt in 0..pt {
                        for dy in 0..ph {
                            let base = ((c * iv.t + zt * pt + dt) * iv.h + zy * ph + dy) * iv.w + zx * pw;
                            for dx in 0..pw {
                                let v = input[base + dx];
                                if v > best {
                                    best = v;
                                    best_i = base + dx;
                                }
                            }
                        }
                    }
                    out[o] = best;
                    argmax[o] = best_i as u32;
                    o += 1;
                }
            }
        }
    }
}

/// Same result as the general loop for pool `[1, 2, 2]`, scan order kept.
fn maxpool_2x2<T: Real>(input: &[T], iv: Vol, out: &mut [T], argmax: &mut [u32]) {
    let (oh, ow) = (iv.h / 2, iv.w / 2);
    let mut o = 0;
    for plane in 0..iv.c * iv.t {
        for zy in 0..oh {
            let top = (plane * iv.h + 2 * zy) * iv.w;
            let bottom = top + iv.w;
            for zx in 0..ow {
                let cand = [top + 2 * zx, top + 2 * zx + 1, bottom + 2 * zx, bottom + 2 * zx + 1];
                let mut best_i = cand[0];
                let mut best = input[best_i];
                for &i in &cand[1..] {
                    if input[i] > best {
                        best = input[i];
                        best_i = i;
                    }
                }
                out[o] = best;
                argmax[o] = best_i as u32;
                o += 1;
            }
        }
    }
}

/// Routes each output gradient to its argmax input position.
pub fn maxpool_backward_slice<T: Real>(dout: &[T], argmax: &[u32], dinput: &mut [T]) {
    dinput.fill(T::zero());
    for (&g, &i) in dout.iter().zip(argmax) {
        let i = i as usize;
        dinput[i] = dinput[i] + g;
    }
}

pub fn relu_slice<T: Real>(input: &[T], out: &mut [T]) {
    for (o, &x) in out.iter_mut().zip(input) {
        *o = if x > T::zero() { x } else { T::zero() };
    }
}

/// Gradient through ReLU given its forward output.
pub fn relu_backward_slice<T: Real>(output: &[T], dout: &[T], dinput: &mut [T]) {
    for ((d, &y), &g) in dinput.iter_mut().zip(output).zip(dout) {
        *d = if y > T::zero() { g } else { T::zero() };
    }
}

/// Batch statistics saved by a train-mode batch-norm forward. Kept in f64
/// whatever the model precision: the backward pass subtracts nearly equal
/// sums, which loses most of an f32 mantissa.
#[derive(Debug, Clone, Default)]
pub struct BnBatchStats {
    pub mean: Vec<f64>,
    /// Biased batch variance.
    pub var: Vec<f64>,
    pub inv_std: Vec<f64>,
    pub xhat: Vec<f64>,
}

/// Train-mode batch norm over rows of `x[B, F]`.
pub fn batchnorm_train_slice<T: Real>(
    x: &[T],
    batch: usize,
    features: usize,
    gamma: &[T],
    beta: &[T],
    out: &mut [T],
    stats: &mut BnBatchStats,
) -> Result<()> {
    if batch < 2 {
        return Err(Error::InvalidBatch(batch));
    }
    let bn = batch as f64;
    stats.mean.clear();
    stats.mean.resize(features, 0.0);
    stats.var.clear();
    stats.var.resize(features, 0.0);
    stats.inv_std.resize(features, 0.0);
    stats.xhat.resize(batch * features, 0.0);
    for row in x.chunks_exact(features) {
        for (m, &v) in stats.mean.iter_mut().zip(row) {
            *m += v.as_f64();
        }
    }
    stats.mean.iter_mut().for_each(|m| *m /= bn);
    for row in x.chunks_exact(features) {
        for ((s, &v), &m) in stats.var.iter_mut().zip(row).zip(&stats.mean) {
            let d = v.as_f64() - m;
            *s += d * d;
        }
    }
    for (is, s) in stats.inv_std.iter_mut().zip(stats.var.iter_mut()) {
        *s /= bn;
        *is = 1.0 / (*s + BN_EPS).sqrt();
    }
    for ((row, xh), o) in x
        .chunks_exact(features)
        .zip(stats.xhat.chunks_exact_mut(features))
        .zip(out.chunks_exact_mut(features))
    {
        for f in 0..features {
            let h = (row[f].as_f64() - stats.mean[f]) * stats.inv_std[f];
            xh[f] = h;
            o[f] = T::of(gamma[f].as_f64() * h + beta[f].as_f64());
        }
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
pub fn batchnorm_infer_slice<T: Real>(
    x: &[T],
    features: usize,
    gamma: &[T],
    beta: &[T],
    running_mean: &[T],
    running_var: &[T],
    out: &mut [T],
) {
    let eps = T::of(BN_EPS);
    for (row, o) in x.chunks_exact(features).zip(out.chunks_exact_mut(features)) {
        for f in 0..features {
            let inv = T::one() / (running_var[f] + eps).sqrt();
            o[f] = gamma[f] * (row[f] - running_mean[f]) * inv + beta[f];
        }
    }
}

/// Backward of train-mode batch norm. Accumulates `dgamma`/`dbeta`, overwrites `dx`.
#[allow(clippy::too_many_arguments)]
pub fn batchnorm_backward_slice<T: Real>(
    dy: &[T],
    stats: &BnBatchStats,
    gamma: &[T],
    batch: usize,
    features: usize,
    dx: &mut [T],
    dgamma: &mut [T],
    dbeta: &mut [T],
) {
    let bn = batch as f64;
    let mut sum_dy = vec![0.0; features];
    let mut sum_dy_xhat = vec![0.0; features];
    for (g, xh) in dy.chunks_exact(features).zip(stats.xhat.chunks_exact(features)) {
        for f in 0..features {
            let g = g[f].as_f64();
            sum_dy[f] += g;
            sum_dy_xhat[f] += g * xh[f];
        }
    }
    for f in 0..features {
        dgamma[f] = dgamma[f] + T::of(sum_dy_xhat[f]);
        dbeta[f] = dbeta[f] + T::of(sum_dy[f]);
    }
    for ((g, xh), d) in dy
        .chunks_exact(features)
        .zip(stats.xhat.chunks_exact(features))
        .zip(dx.chunks_exact_mut(features))
    {
        for f in 0..features {
            let scale = gamma[f].as_f64() * stats.inv_std[f] / bn;
            d[f] = T::of(scale * (bn * g[f].as_f64() - sum_dy[f] - xh[f] * sum_dy_xhat[f]));
        }
    }
}

/// Backward of [`batchnorm_infer_slice`]: a per-feature affine map.
/// Writes `dx`; accumulates `dgamma` and `dbeta`.
#[allow(clippy::too_many_arguments)]
pub fn batchnorm_infer_backward_slice<T: Real>(
    dy: &[T],
    x: &[T],
    features: usize,
    gamma: &[T],
    running_mean: &[T],
    running_var: &[T],
    dx: &mut [T],
    dgamma: &mut [T],
    dbeta: &mut [T],
) {
    let eps = T::of(BN_EPS);
    let inv: Vec<T> = running_var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    for ((gs, xs), d) in dy
        .chunks_exact(features)
        .zip(x.chunks_exact(features))
        .zip(dx.chunks_exact_mut(features))
    {
        for f in 0..features {
            d[f] = gs[f] * gamma[f] * inv[f];
            dgamma[f] = dgamma[f] + gs[f] * (xs[f] - running_mean[f]) * inv[f];
            dbeta[f] = dbeta[f] + gs[f];
        }
    }
}

/// Folds one batch's statistics into the running estimates.
pub fn bn_update_running<T: Real>(running_mean: &mut [T], running_var: &mut [T], stats: &BnBatchStats) {
    for (r, &b) in running_mean.iter_mut().zip(&stats.mean) {
        *r = T::of(BN_MOMENTUM * r.as_f64() + (1.0 - BN_MOMENTUM) * b);
    }
    for (r, &b) in running_var.iter_mut().zip(&stats.var) {
        *r = T::of(BN_MOMENTUM * r.as_f64() + (1.0 - BN_MOMENTUM) * b);
    }
}

/// `out[B, M] = x[B, N] * w[N, M] + bias`.
pub fn dense_forward_slice<T: Real>(x: &[T], batch: usize, n: usize, w: &[T], bias: &[T], out: &mut [T]) {
    let m = bias.len();
    for row in out.chunks_exact_mut(m) {
        row.copy_from_slice(bias);
    }
    gemm(false, false, batch, m, n, T::one(), x, w, T::one(), out);
}

/// Accumulates `dw`, `dbias`; writes `dx` when given.
#[allow(clippy::too_many_arguments)]
pub fn dense_backward_slice<T: Real>(
    x: &[T],
    batch: usize,
    n: usize,
    w: &[T],
    dout: &[T],
    dw: &mut [T],
    dbias: &mut [T],
    dx: Option<&mut [T]>,
) {
    let m = dbias.len();
    gemm(true, false, n, m, batch, T::one(), x, dout, T::one(), dw);
    for row in dout.chunks_exact(m) {
        for (d, &g) in dbias.iter_mut().zip(row) {
            *d = *d + g;
        }
    }
    if let Some(dx) = dx {
        gemm(false, true, batch, n, m, T::one(), dout, w, T::zero(), dx);
    }
}

/// Mean cross-entropy of `softmax(logits)` against `labels`, and its gradient
/// `(softmax - onehot) / B` with respect to the logits.
pub fn softmax_cross_entropy_slice<T: Real>(
    logits: &[T],
    classes: usize,
    labels: &[usize],
    dlogits: &mut [T],
) -> Result<T> {
    let batch = labels.len();
    if logits.len() != batch * classes || dlogits.len() != logits.len() {
        return Err(Error::shape(format!(
            "logits of length {} do not match {batch} labels x {classes} classes",
            logits.len()
        )));
    }
    if let Some(&label) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::InvalidLabel { label, classes });
    }
    let bn = batch as f64;
    let mut loss = 0.0f64;
    for ((row, d), &label) in logits
        .chunks_exact(classes)
        .zip(dlogits.chunks_exact_mut(classes))
        .zip(labels)
    {
        let max = row.iter().fold(f64::NEG_INFINITY, |m, v| m.max(v.as_f64()));
        let sum: f64 = row.iter().map(|v| (v.as_f64() - max).exp()).sum();
        let lse = max + sum.ln();
        loss += lse - row[label].as_f64();
        for (c, (dv, v)) in d.iter_mut().zip(row).enumerate() {
            let p = (v.as_f64() - lse).exp();
            let onehot = if c == label { 1.0 } else { 0.0 };
            *dv = T::of((p - onehot) / bn);
        }
    }
    Ok(T::of(loss / bn))
}

// ---------------------------------------------------------------------------
// Tensor-level operations

fn conv_geom_from(input_shape: &[usize], weight_shape: &[usize], rank3: bool) -> Result<ConvGeom> {
    let (iv, k, kernel) = if rank3 {
        if input_shape.len() != 4 || weight_shape.len() != 5 {
            return Err(Error::shape("conv3d expects input [C,T,H,W] and weights [K,C,kt,kh,kw]"));
        }
        (
            Vol::new(input_shape[0], input_shape[1], input_shape[2], input_shape[3]),
            weight_shape[0],
            [weight_shape[2], weight_shape[3], weight_shape[4]],
        )
    } else {
        if input_shape.len() != 3 || weight_shape.len() != 4 {
            return Err(Error::shape("conv2d expects input [C,H,W] and weights [K,C,kh,kw]"));
        }
        (
            Vol::new(input_shape[0], 1, input_shape[1], input_shape[2]),
            weight_shape[0],
            [1, weight_shape[2], weight_shape[3]],
        )
    };
    let wc = weight_shape[1];
    if wc != iv.c {
        return Err(Error::shape(format!(
            "weights expect {wc} input channels, input has {}",
            iv.c
        )));
    }
    ConvGeom::new(iv, k, kernel)
}

fn conv_tensor<T: Real>(input: &Tensor<T>, weights: &Tensor<T>, bias: &Tensor<T>, rank3: bool) -> Result<Tensor<T>> {
    let g = conv_geom_from(input.shape(), weights.shape(), rank3)?;
    if bias.len() != g.filters {
        return Err(Error::shape(format!("bias has {} entries for {} filters", bias.len(), g.filters)));
    }
    let o = g.output();
    let mut out = vec![T::zero(); o.len()];
    let mut col = Vec::new();
    conv_forward(input.data(), &g, weights.data(), bias.data(), &mut out, &mut col);
    let shape = if rank3 { vec![o.c, o.t, o.h, o.w] } else { vec![o.c, o.h, o.w] };
    Tensor::from_vec(&shape, out)
}

/// Valid 2D cross-correlation: `[C,H,W] * [K,C,kh,kw] -> [K,H-kh+1,W-kw+1]`.
pub fn conv2d_forward<T: Real>(input: &Tensor<T>, weights: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    conv_tensor(input, weights, bias, false)
}

/// Valid 3D cross-correlation: `[C,T,H,W] * [K,C,kt,kh,kw] -> [K,T',H',W']`.
pub fn conv3d_forward<T: Real>(input: &Tensor<T>, weights: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    conv_tensor(input, weights, bias, true)
}

/// Max pooling over the trailing `pool.len()` axes (1 to 3 of them).
/// Returns the pooled tensor and, per output element, the flat input index
/// of its maximum.
pub fn maxpool_forward<T: Real>(input: &Tensor<T>, pool: &[usize]) -> Result<(Tensor<T>, Vec<usize>)> {
    let shape = input.shape();
    if pool.is_empty() || pool.len() > 3 || pool.len() > shape.len() {
        return Err(Error::shape(format!("cannot pool {shape:?} with {pool:?}")));
    }
    let lead = shape.len() - pool.len();
    let c: usize = shape[..lead].iter().product();
    let mut ext = [1usize; 3];
    let mut p3 = [1usize; 3];
    ext[3 - pool.len()..].copy_from_slice(&shape[lead..]);
    p3[3 - pool.len()..].copy_from_slice(pool);
    let iv = Vol::new(c, ext[0], ext[1], ext[2]);
    let ov = pool_output(iv, p3)?;
    let mut out = vec![T::zero(); ov.len()];
    let mut arg = vec![0u32; ov.len()];
    maxpool_forward_slice(input.data(), iv, p3, &mut out, &mut arg);
    let mut oshape = shape[..lead].to_vec();
    oshape.extend_from_slice(&[ov.t, ov.h, ov.w][3 - pool.len()..]);
    Ok((Tensor::from_vec(&oshape, out)?, arg.into_iter().map(|i| i as usize).collect()))
}

pub fn relu<T: Real>(input: &Tensor<T>) -> Tensor<T> {
    let mut out = input.clone();
    relu_slice(input.data(), out.data_mut());
    out
}

/// Trainable batch-norm parameters plus running statistics for `F` features.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm<T: Real = f32> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
}

impl<T: Real> BatchNorm<T> {
    pub fn new(features: usize) -> Result<Self> {
        Ok(Self {
            gamma: Tensor::new(&[features], T::one())?,
            beta: Tensor::zeros(&[features])?,
            running_mean: Tensor::zeros(&[features])?,
            running_var: Tensor::new(&[features], T::one())?,
        })
    }

    pub fn features(&self) -> usize {
        self.gamma.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

/// Batch norm over `[B, F]`. Train mode standardizes by batch statistics
/// and folds them into the running estimates; infer mode uses the running
/// estimates.
pub fn batchnorm_forward<T: Real>(input: &Tensor<T>, bn: &mut BatchNorm<T>, mode: Mode) -> Result<Tensor<T>> {
    let shape = input.shape();
    if shape.len() != 2 || shape[1] != bn.features() {
        return Err(Error::shape(format!(
            "batch norm over {} features cannot take {shape:?}",
            bn.features()
        )));
    }
    let (b, f) = (shape[0], shape[1]);
    let mut out = vec![T::zero(); b * f];
    match mode {
        Mode::Train => {
            let mut stats = BnBatchStats::default();
            batchnorm_train_slice(input.data(), b, f, bn.gamma.data(), bn.beta.data(), &mut out, &mut stats)?;
            bn_update_running(bn.running_mean.data_mut(), bn.running_var.data_mut(), &stats);
        }
        Mode::Infer => batchnorm_infer_slice(
            input.data(),
            f,
            bn.gamma.data(),
            bn.beta.data(),
            bn.running_mean.data(),
            bn.running_var.data(),
            &mut out,
        ),
    }
    Tensor::from_vec(shape, out)
}

/// `[B, N] x [N, M] + [M] -> [B, M]`.
pub fn dense_forward<T: Real>(input: &Tensor<T>, weights: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    let (is, ws) = (input.shape(), weights.shape());
    if is.len() != 2 || ws.len() != 2 || is[1] != ws[0] || bias.len() != ws[1] {
        return Err(Error::shape(format!(
            "dense cannot map {is:?} through weights {ws:?} and bias {:?}",
            bias.shape()
        )));
    }
    let mut out = vec![T::zero(); is[0] * ws[1]];
    dense_forward_slice(input.data(), is[0], is[1], weights.data(), bias.data(), &mut out);
    Tensor::from_vec(&[is[0], ws[1]], out)
}

/// Mean softmax cross-entropy of `logits[B, C]` and its gradient.
pub fn softmax_cross_entropy<T: Real>(logits: &Tensor<T>, labels: &[usize]) -> Result<(T, Tensor<T>)> {
    let shape = logits.shape();
    if shape.len() != 2 || shape[0] != labels.len() {
        return Err(Error::shape(format!("logits {shape:?} vs {} labels", labels.len())));
    }
    let mut d = vec![T::zero(); logits.len()];
    let loss = softmax_cross_entropy_slice(logits.data(), shape[1], labels, &mut d)?;
    Ok((loss, Tensor::from_vec(shape, d)?))
}
