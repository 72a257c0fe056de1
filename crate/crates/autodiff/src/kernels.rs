//! Raw array kernels. Shapes are validated by the graph before these run.

/// Output positions `[lo, hi)` whose input coordinate `o * stride + k - pad`
/// falls inside `[0, in_len)`.
#[inline]
fn valid_range(out_len: usize, in_len: usize, k: usize, stride: usize, pad: usize) -> (usize, usize) {
    let lo = if pad > k { (pad - k).div_ceil(stride) } else { 0 };
    let top = in_len + pad; // exclusive bound on o * stride + k
    let hi = if top > k { (top - k - 1) / stride + 1 } else { 0 };
    (lo.min(out_len), hi.min(out_len))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub ci: usize,
    pub h: usize,
    pub w: usize,
    pub co: usize,
    pub kh: usize,
    pub kw: usize,
    pub ho: usize,
    pub wo: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn new(x: &[usize], w: &[usize], stride: usize, pad: usize) -> Option<ConvGeom> {
        if x.len() != 4 || w.len() != 4 || x[1] != w[1] || stride == 0 {
            return None;
        }
        let (h, wd, kh, kw) = (x[2], x[3], w[2], w[3]);
        if h + 2 * pad < kh || wd + 2 * pad < kw {
            return None;
        }
        Some(ConvGeom {
            n: x[0],
            ci: x[1],
            h,
            w: wd,
            co: w[0],
            kh,
            kw,
            ho: (h + 2 * pad - kh) / stride + 1,
            wo: (wd + 2 * pad - kw) / stride + 1,
            stride,
            pad,
        })
    }

    pub fn input_shape(&self) -> Vec<usize> {
        vec![self.n, self.ci, self.h, self.w]
    }

    pub fn weight_shape(&self) -> Vec<usize> {
        vec![self.co, self.ci, self.kh, self.kw]
    }

    pub fn output_shape(&self) -> Vec<usize> {
        vec![self.n, self.co, self.ho, self.wo]
    }
}

/// Columns of the im2col matrix processed together; keeps a tile of the
/// column matrix resident in cache.
const TILE: usize = 128;

/// im2col: `col[(c, ki, kj), (n, oh, ow)]`, zero where the window hits padding.
fn im2col(x: &[f64], g: &ConvGeom) -> Vec<f64> {
    let plane_in = g.h * g.w;
    let plane_out = g.ho * g.wo;
    let cols = g.n * plane_out;
    let mut col = vec![0.0; g.ci * g.kh * g.kw * cols];
    for ci in 0..g.ci {
        for ki in 0..g.kh {
            let (oh_lo, oh_hi) = valid_range(g.ho, g.h, ki, g.stride, g.pad);
            for kj in 0..g.kw {
                let (ow_lo, ow_hi) = valid_range(g.wo, g.w, kj, g.stride, g.pad);
                let row = &mut col[((ci * g.kh + ki) * g.kw + kj) * cols..][..cols];
                for n in 0..g.n {
                    let xin = &x[(n * g.ci + ci) * plane_in..][..plane_in];
                    let dst = &mut row[n * plane_out..][..plane_out];
                    for oh in oh_lo..oh_hi {
                        let ih = oh * g.stride + ki - g.pad;
                        for ow in ow_lo..ow_hi {
                            dst[oh * g.wo + ow] = xin[ih * g.w + ow * g.stride + kj - g.pad];
                        }
                    }
                }
            }
        }
    }
    col
}

/// Inverse scatter of [`im2col`]: sums column entries back into image positions.
fn col2im(col: &[f64], g: &ConvGeom) -> Vec<f64> {
    let plane_in = g.h * g.w;
    let plane_out = g.ho * g.wo;
    let cols = g.n * plane_out;
    let mut x = vec![0.0; g.n * g.ci * plane_in];
    for ci in 0..g.ci {
        for ki in 0..g.kh {
            let (oh_lo, oh_hi) = valid_range(g.ho, g.h, ki, g.stride, g.pad);
            for kj in 0..g.kw {
                let (ow_lo, ow_hi) = valid_range(g.wo, g.w, kj, g.stride, g.pad);
                let row = &col[((ci * g.kh + ki) * g.kw + kj) * cols..][..cols];
                for n in 0..g.n {
                    let xin = &mut x[(n * g.ci + ci) * plane_in..][..plane_in];
                    let src = &row[n * plane_out..][..plane_out];
                    for oh in oh_lo..oh_hi {
                        let ih = oh * g.stride + ki - g.pad;
                        for ow in ow_lo..ow_hi {
                            xin[ih * g.w + ow * g.stride + kj - g.pad] += src[oh * g.wo + ow];
                        }
                    }
                }
            }
        }
    }
    x
}

/// `[n, c, p] -> [c, n * p]`
fn channels_first(y: &[f64], n: usize, c: usize, p: usize) -> Vec<f64> {
    let mut out = vec![0.0; y.len()];
    for i in 0..n {
        for j in 0..c {
            out[(j * n + i) * p..][..p].copy_from_slice(&y[(i * c + j) * p..][..p]);
        }
    }
    out
}

/// `[c, n * p] -> [n, c, p]`
fn batch_first(y: &[f64], n: usize, c: usize, p: usize) -> Vec<f64> {
    let mut out = vec![0.0; y.len()];
    for j in 0..c {
        for i in 0..n {
            out[(i * c + j) * p..][..p].copy_from_slice(&y[(j * n + i) * p..][..p]);
        }
    }
    out
}

/// `c[m, cols] += a[m, k] * b[k, cols]`, tiled over columns.
fn gemm_tiled(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, cols: usize) {
    for t0 in (0..cols).step_by(TILE) {
        let t1 = (t0 + TILE).min(cols);
        for i in 0..m {
            let crow = &mut c[i * cols + t0..i * cols + t1];
            for p in 0..k {
                let av = a[i * k + p];
                if av == 0.0 {
                    continue;
                }
                for (cv, bv) in crow.iter_mut().zip(&b[p * cols + t0..p * cols + t1]) {
                    *cv += av * bv;
                }
            }
        }
    }
}

/// Dot product with independent partial sums so the loop vectorises.
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        for k in 0..8 {
            acc[k] += x[k] * y[k];
        }
    }
    acc.iter().sum::<f64>() + tail
}

/// Cross-correlation `y[n,o] = sum_c x[n,c] * w[o,c]`.
pub(crate) fn conv2d(x: &[f64], w: &[f64], g: &ConvGeom) -> Vec<f64> {
    let kk = g.ci * g.kh * g.kw;
    let p = g.ho * g.wo;
    let col = im2col(x, g);
    let mut y = vec![0.0; g.co * g.n * p];
    gemm_tiled(w, &col, &mut y, g.co, kk, g.n * p);
    batch_first(&y, g.n, g.co, p)
}

/// Adjoint of [`conv2d`] in its input: `gx = d<gy, conv2d(x, w)>/dx`.
pub(crate) fn conv2d_input_grad(gy: &[f64], w: &[f64], g: &ConvGeom) -> Vec<f64> {
    let kk = g.ci * g.kh * g.kw;
    let p = g.ho * g.wo;
    let gyc = channels_first(gy, g.n, g.co, p);
    let wt = transpose(w, g.co, kk);
    let mut col = vec![0.0; kk * g.n * p];
    gemm_tiled(&wt, &gyc, &mut col, kk, g.co, g.n * p);
    col2im(&col, g)
}

/// Adjoint of [`conv2d`] in its weight: `gw = d<gy, conv2d(x, w)>/dw`.
pub(crate) fn conv2d_weight_grad(x: &[f64], gy: &[f64], g: &ConvGeom) -> Vec<f64> {
    let kk = g.ci * g.kh * g.kw;
    let cols = g.n * g.ho * g.wo;
    let gyc = channels_first(gy, g.n, g.co, g.ho * g.wo);
    let col = im2col(x, g);
    let mut gw = vec![0.0; g.co * kk];
    for t0 in (0..cols).step_by(TILE) {
        let t1 = (t0 + TILE).min(cols);
        for o in 0..g.co {
            let grow = &gyc[o * cols + t0..o * cols + t1];
            for q in 0..kk {
                let crow = &col[q * cols + t0..q * cols + t1];
                gw[o * kk + q] += dot(grow, crow);
            }
        }
    }
    gw
}

/// Loop-nest cross-correlation, kept as the reference for the im2col path.
#[cfg(test)]
pub(crate) fn conv2d_direct(x: &[f64], w: &[f64], g: &ConvGeom) -> Vec<f64> {
    let plane_in = g.h * g.w;
    let plane_out = g.ho * g.wo;
    let mut y = vec![0.0; g.n * g.co * plane_out];
    for n in 0..g.n {
        for co in 0..g.co {
            let out = &mut y[(n * g.co + co) * plane_out..][..plane_out];
            for ci in 0..g.ci {
                let xin = &x[(n * g.ci + ci) * plane_in..][..plane_in];
                let wk = &w[(co * g.ci + ci) * g.kh * g.kw..][..g.kh * g.kw];
                for ki in 0..g.kh {
                    let (oh_lo, oh_hi) = valid_range(g.ho, g.h, ki, g.stride, g.pad);
                    for kj in 0..g.kw {
                        let wv = wk[ki * g.kw + kj];
                        if wv == 0.0 {
                            continue;
                        }
                        let (ow_lo, ow_hi) = valid_range(g.wo, g.w, kj, g.stride, g.pad);
                        if ow_lo >= ow_hi {
                            continue;
                        }
                        for oh in oh_lo..oh_hi {
                            let ih = oh * g.stride + ki - g.pad;
                            let orow = &mut out[oh * g.wo + ow_lo..oh * g.wo + ow_hi];
                            let iw0 = ow_lo * g.stride + kj - g.pad;
                            if g.stride == 1 {
                                let irow = &xin[ih * g.w + iw0..][..orow.len()];
                                for (o, i) in orow.iter_mut().zip(irow) {
                                    *o += wv * i;
                                }
                            } else {
                                for (t, o) in orow.iter_mut().enumerate() {
                                    *o += wv * xin[ih * g.w + iw0 + t * g.stride];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    y
}

#[cfg(test)]
pub(crate) fn conv2d_input_grad_direct(gy: &[f64], w: &[f64], g: &ConvGeom) -> Vec<f64> {
    let plane_in = g.h * g.w;
    let plane_out = g.ho * g.wo;
    let mut gx = vec![0.0; g.n * g.ci * plane_in];
    for n in 0..g.n {
        for ci in 0..g.ci {
            let xin = &mut gx[(n * g.ci + ci) * plane_in..][..plane_in];
            for co in 0..g.co {
                let grow = &gy[(n * g.co + co) * plane_out..][..plane_out];
                let wk = &w[(co * g.ci + ci) * g.kh * g.kw..][..g.kh * g.kw];
                for ki in 0..g.kh {
                    let (oh_lo, oh_hi) = valid_range(g.ho, g.h, ki, g.stride, g.pad);
                    for kj in 0..g.kw {
                        let wv = wk[ki * g.kw + kj];
                        if wv == 0.0 {
                            continue;
                        }
                        let (ow_lo, ow_hi) = valid_range(g.wo, g.w, kj, g.stride, g.pad);
                        if ow_lo >= ow_hi {
                            continue;
                        }
                        for oh in oh_lo..oh_hi {
                            let ih = oh * g.stride + ki - g.pad;
                            let src = &grow[oh * g.wo + ow_lo..oh * g.wo + ow_hi];
                            let iw0 = ow_lo * g.stride + kj - g.pad;
                            if g.stride == 1 {
                                let dst = &mut xin[ih * g.w + iw0..][..src.len()];
                                for (d, s) in dst.iter_mut().zip(src) {
                                    *d += wv * s;
                                }
                            } else {
                                for (t, s) in src.iter().enumerate() {
                                    xin[ih * g.w + iw0 + t * g.stride] += wv * s;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    gx
}

#[cfg(test)]
pub(crate) fn conv2d_weight_grad_direct(x: &[f64], gy: &[f64], g: &ConvGeom) -> Vec<f64> {
    let plane_in = g.h * g.w;
    let plane_out = g.ho * g.wo;
    let mut gw = vec![0.0; g.co * g.ci * g.kh * g.kw];
    for co in 0..g.co {
        for ci in 0..g.ci {
            let wk = &mut gw[(co * g.ci + ci) * g.kh * g.kw..][..g.kh * g.kw];
            for ki in 0..g.kh {
                let (oh_lo, oh_hi) = valid_range(g.ho, g.h, ki, g.stride, g.pad);
                for kj in 0..g.kw {
                    let (ow_lo, ow_hi) = valid_range(g.wo, g.w, kj, g.stride, g.pad);
                    if ow_lo >= ow_hi {
                        continue;
                    }
                    let mut acc = 0.0;
                    for n in 0..g.n {
                        let grow = &gy[(n * g.co + co) * plane_out..][..plane_out];
                        let xin = &x[(n * g.ci + ci) * plane_in..][..plane_in];
                        for oh in oh_lo..oh_hi {
                            let ih = oh * g.stride + ki - g.pad;
                            let src = &grow[oh * g.wo + ow_lo..oh * g.wo + ow_hi];
                            let iw0 = ow_lo * g.stride + kj - g.pad;
                            if g.stride == 1 {
                                let xr = &xin[ih * g.w + iw0..][..src.len()];
                                acc += src.iter().zip(xr).map(|(a, b)| a * b).sum::<f64>();
                            } else {
                                for (t, s) in src.iter().enumerate() {
                                    acc += s * xin[ih * g.w + iw0 + t * g.stride];
                                }
                            }
                        }
                    }
                    wk[ki * g.kw + kj] = acc;
                }
            }
        }
    }
    gw
}

/// Non-overlapping `k x k` average pooling over `[n, c, h, w]`.
pub(crate) fn avg_pool(x: &[f64], shape: &[usize], k: usize) -> Vec<f64> {
    let (nc, h, w) = (shape[0] * shape[1], shape[2], shape[3]);
    let (ho, wo) = (h / k, w / k);
    let scale = 1.0 / (k * k) as f64;
    let mut y = vec![0.0; nc * ho * wo];
    for p in 0..nc {
        let xin = &x[p * h * w..][..h * w];
        let out = &mut y[p * ho * wo..][..ho * wo];
        for i in 0..h {
            let orow = &mut out[(i / k) * wo..][..wo];
            let irow = &xin[i * w..][..w];
            for (j, v) in irow.iter().enumerate() {
                orow[j / k] += v;
            }
        }
        out.iter_mut().for_each(|v| *v *= scale);
    }
    y
}

/// Adjoint of [`avg_pool`]: spreads each value over its window, scaled by `1/k^2`.
/// `shape` is the pooled shape.
pub(crate) fn pool_spread(g: &[f64], shape: &[usize], k: usize) -> Vec<f64> {
    let (nc, ho, wo) = (shape[0] * shape[1], shape[2], shape[3]);
    let (h, w) = (ho * k, wo * k);
    let scale = 1.0 / (k * k) as f64;
    let mut y = vec![0.0; nc * h * w];
    for p in 0..nc {
        let src = &g[p * ho * wo..][..ho * wo];
        let out = &mut y[p * h * w..][..h * w];
        for i in 0..h {
            let srow = &src[(i / k) * wo..][..wo];
            for (j, o) in out[i * w..][..w].iter_mut().enumerate() {
                *o = srow[j / k] * scale;
            }
        }
    }
    y
}

/// Per-plane mean and `1 / sqrt(var + eps)` of a `[n, c, h, w]` array.
fn plane_stats(plane: &[f64], eps: f64) -> (f64, f64) {
    let inv = 1.0 / plane.len() as f64;
    let mean = plane.iter().sum::<f64>() * inv;
    let var = plane.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() * inv;
    (mean, 1.0 / (var + eps).sqrt())
}

/// Normalises every `h x w` plane to zero mean and unit variance.
pub(crate) fn instance_norm(x: &[f64], shape: &[usize], eps: f64) -> Vec<f64> {
    let area = shape[2] * shape[3];
    let mut y = vec![0.0; x.len()];
    for (xp, yp) in x.chunks(area).zip(y.chunks_mut(area)) {
        let (mean, r) = plane_stats(xp, eps);
        for (o, v) in yp.iter_mut().zip(xp) {
            *o = (v - mean) * r;
        }
    }
    y
}

/// `r * (g - mean(g) - y * mean(g * y))` per plane, the vector-Jacobian
/// product of [`instance_norm`] with output `y`.
pub(crate) fn instance_norm_grad(y: &[f64], g: &[f64], x: &[f64], shape: &[usize], eps: f64) -> Vec<f64> {
    let area = shape[2] * shape[3];
    let inv = 1.0 / area as f64;
    let mut gx = vec![0.0; x.len()];
    for (((xp, yp), gp), op) in x.chunks(area).zip(y.chunks(area)).zip(g.chunks(area)).zip(gx.chunks_mut(area)) {
        let (_, r) = plane_stats(xp, eps);
        let mg = gp.iter().sum::<f64>() * inv;
        let mgy = gp.iter().zip(yp).map(|(a, b)| a * b).sum::<f64>() * inv;
        for ((o, gv), yv) in op.iter_mut().zip(gp).zip(yp) {
            *o = r * (gv - mg - yv * mgy);
        }
    }
    gx
}

pub(crate) fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let crow = &mut c[i * n..][..n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            for (cv, bv) in crow.iter_mut().zip(&b[p * n..][..n]) {
                *cv += av * bv;
            }
        }
    }
    c
}

pub(crate) fn transpose(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut t = vec![0.0; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            t[j * rows + i] = a[i * cols + j];
        }
    }
    t
}

fn contiguous_strides(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1; shape.len()];
    for d in (0..shape.len().saturating_sub(1)).rev() {
        strides[d] = strides[d + 1] * shape[d + 1];
    }
    strides
}

/// Visits every element of `big`, passing its linear index and the linear
/// index of the corresponding element in `small` (dims of size 1 broadcast).
fn for_each_broadcast(big: &[usize], small: &[usize], mut f: impl FnMut(usize, usize)) {
    let rank = big.len();
    let sstrides: Vec<usize> =
        contiguous_strides(small).into_iter().zip(small).map(|(s, &d)| if d == 1 { 0 } else { s }).collect();
    let total: usize = big.iter().product();
    if rank == 0 {
        f(0, 0);
        return;
    }
    let inner = big[rank - 1];
    let inner_stride = sstrides[rank - 1];
    let mut idx = vec![0usize; rank];
    let mut base = 0usize;
    let mut lin = 0usize;
    while lin < total {
        for t in 0..inner {
            f(lin + t, base + t * inner_stride);
        }
        lin += inner;
        // advance the odometer over all but the last dim
        let mut d = rank - 1;
        loop {
            if d == 0 {
                break;
            }
            d -= 1;
            idx[d] += 1;
            base += sstrides[d];
            if idx[d] < big[d] {
                break;
            }
            base -= sstrides[d] * big[d];
            idx[d] = 0;
        }
    }
}

pub(crate) fn expand(x: &[f64], small: &[usize], big: &[usize]) -> Vec<f64> {
    let mut y = vec![0.0; big.iter().product()];
    for_each_broadcast(big, small, |b, s| y[b] = x[s]);
    y
}

pub(crate) fn reduce_sum(x: &[f64], big: &[usize], small: &[usize]) -> Vec<f64> {
    let mut y = vec![0.0; small.iter().product()];
    for_each_broadcast(big, small, |b, s| y[s] += x[b]);
    y
}

/// Row-wise softmax over the last dim of a `[rows, cols]` array.
pub(crate) fn softmax_rows(x: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut y = vec![0.0; rows * cols];
    for r in 0..rows {
        let xr = &x[r * cols..][..cols];
        let yr = &mut y[r * cols..][..cols];
        let m = xr.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for (o, v) in yr.iter_mut().zip(xr) {
            *o = (v - m).exp();
            z += *o;
        }
        yr.iter_mut().for_each(|o| *o /= z);
    }
    y
}

/// Per-row `logsumexp(x) - x[target]`.
pub(crate) fn cross_entropy_rows(x: &[f64], targets: &[usize], cols: usize) -> Vec<f64> {
    targets
        .iter()
        .enumerate()
        .map(|(r, &t)| {
            let xr = &x[r * cols..][..cols];
            let m = xr.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + xr.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            lse - xr[t]
        })
        .collect()
}
