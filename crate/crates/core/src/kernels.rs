//! Forward and backward kernels for the primitive layers.
//!
//! Everything here is a pure function of its inputs. The autodiff tape in
//! [`crate::graph`] wires these together; tests call them directly.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// `c = a · b + beta · c` for strided row-major views.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_strides: (usize, usize),
    b: &[f64],
    b_strides: (usize, usize),
    beta: f64,
    c: &mut [f64],
    c_row_stride: usize,
) {
    gemm_scaled(m, k, n, 1.0, a, a_strides, b, b_strides, beta, c, c_row_stride)
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm_scaled(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
    rsc: usize,
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(k == 0 || (m - 1) * rsa + (k - 1) * csa < a.len(), "gemm: a out of bounds");
    assert!(k == 0 || (k - 1) * rsb + (n - 1) * csb < b.len(), "gemm: b out of bounds");
    assert!((m - 1) * rsc + (n - 1) < c.len(), "gemm: c out of bounds");
    // SAFETY: every index touched by dgemm lies within the slices, checked above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            1,
        );
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

// ---------------------------------------------------------------------------
// 2-D convolution

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    ci: usize,
    co: usize,
    kt: usize,
    kf: usize,
    dt: usize,
    df: usize,
    t: usize,
    f: usize,
}

impl ConvGeom {
    fn new(x: &Tensor, w: &Tensor, b: &Tensor, dilation: (usize, usize)) -> Result<Self> {
        let (ci, t, f) = x.dims3()?;
        let [co, wci, kt, kf] = w.shape()[..] else {
            return Err(Error::Shape(format!(
                "conv weight must be rank 4, got {:?}",
                w.shape()
            )));
        };
        if wci != ci {
            return Err(Error::Shape(format!(
                "conv expects {wci} input channels, got {ci}"
            )));
        }
        if kt % 2 == 0 || kf % 2 == 0 {
            return Err(Error::Config(format!(
                "conv kernel must be odd in both axes, got {kt}x{kf}"
            )));
        }
        if b.shape() != [co] {
            return Err(Error::Shape(format!(
                "conv bias must be [{co}], got {:?}",
                b.shape()
            )));
        }
        if dilation.0 == 0 || dilation.1 == 0 {
            return Err(Error::Config("conv dilation must be >= 1".into()));
        }
        Ok(Self {
            ci,
            co,
            kt,
            kf,
            dt: dilation.0,
            df: dilation.1,
            t,
            f,
        })
    }

    fn pointwise(&self) -> bool {
        self.kt == 1 && self.kf == 1
    }

    fn rows(&self) -> usize {
        self.ci * self.kt * self.kf
    }

    fn chunk_rows(&self) -> usize {
        (1024 / self.f).max(1)
    }

    fn im2col(&self, x: &[f64], t0: usize, t1: usize, col: &mut [f64]) {
        let (tn, fnn) = (self.t as isize, self.f as isize);
        let pc = (t1 - t0) * self.f;
        let pt = ((self.kt - 1) * self.dt / 2) as isize;
        let pf = ((self.kf - 1) * self.df / 2) as isize;
        for ci in 0..self.ci {
            for i in 0..self.kt {
                let toff = (i * self.dt) as isize - pt;
                for j in 0..self.kf {
                    let foff = (j * self.df) as isize - pf;
                    let r = (ci * self.kt + i) * self.kf + j;
                    let row = &mut col[r * pc..(r + 1) * pc];
                    let f_lo = (-foff).clamp(0, fnn) as usize;
                    let f_hi = (fnn - foff).clamp(0, fnn) as usize;
                    for (rt, t) in (t0..t1).enumerate() {
                        let dst = &mut row[rt * self.f..(rt + 1) * self.f];
                        let tt = t as isize + toff;
                        if tt < 0 || tt >= tn || f_lo >= f_hi {
                            dst.fill(0.0);
                            continue;
                        }
                        dst[..f_lo].fill(0.0);
                        dst[f_hi..].fill(0.0);
                        let base = (ci * self.t + tt as usize) * self.f;
                        let s0 = (base as isize + f_lo as isize + foff) as usize;
                        dst[f_lo..f_hi].copy_from_slice(&x[s0..s0 + (f_hi - f_lo)]);
                    }
                }
            }
        }
    }

    fn col2im(&self, col: &[f64], t0: usize, t1: usize, dx: &mut [f64]) {
        let (tn, fnn) = (self.t as isize, self.f as isize);
        let pc = (t1 - t0) * self.f;
        let pt = ((self.kt - 1) * self.dt / 2) as isize;
        let pf = ((self.kf - 1) * self.df / 2) as isize;
        for ci in 0..self.ci {
            for i in 0..self.kt {
                let toff = (i * self.dt) as isize - pt;
                for j in 0..self.kf {
                    let foff = (j * self.df) as isize - pf;
                    let r = (ci * self.kt + i) * self.kf + j;
                    let row = &col[r * pc..(r + 1) * pc];
                    let f_lo = (-foff).clamp(0, fnn) as usize;
                    let f_hi = (fnn - foff).clamp(0, fnn) as usize;
                    if f_lo >= f_hi {
                        continue;
                    }
                    for (rt, t) in (t0..t1).enumerate() {
                        let tt = t as isize + toff;
                        if tt < 0 || tt >= tn {
                            continue;
                        }
                        let src = &row[rt * self.f + f_lo..rt * self.f + f_hi];
                        let base = (ci * self.t + tt as usize) * self.f;
                        let s0 = (base as isize + f_lo as isize + foff) as usize;
                        for (d, s) in dx[s0..s0 + (f_hi - f_lo)].iter_mut().zip(src) {
                            *d += s;
                        }
                    }
                }
            }
        }
    }
}

/// Same-size 2-D cross-correlation with symmetric zero padding.
///
/// `x` is `[Ci, T, F]`, `w` is `[Co, Ci, kt, kf]` with odd kernel dims,
/// `b` is `[Co]`. Output is `[Co, T, F]`.
pub fn conv2d(x: &Tensor, w: &Tensor, b: &Tensor, dilation: (usize, usize)) -> Result<Tensor> {
    let g = ConvGeom::new(x, w, b, dilation)?;
    let p = g.t * g.f;
    let mut out = vec![0.0; g.co * p];
    if g.pointwise() {
        gemm(g.co, g.ci, p, w.data(), (g.ci, 1), x.data(), (p, 1), 0.0, &mut out, p);
    } else {
        let r = g.rows();
        let step = g.chunk_rows();
        let mut col = vec![0.0; r * step * g.f];
        let mut t0 = 0;
        while t0 < g.t {
            let t1 = (t0 + step).min(g.t);
            let pc = (t1 - t0) * g.f;
            g.im2col(x.data(), t0, t1, &mut col);
            gemm(
                g.co,
                r,
                pc,
                w.data(),
                (r, 1),
                &col,
                (pc, 1),
                0.0,
                &mut out[t0 * g.f..],
                p,
            );
            t0 = t1;
        }
    }
    for (o, row) in out.chunks_mut(p).enumerate() {
        let bo = b.data()[o];
        row.iter_mut().for_each(|v| *v += bo);
    }
    Tensor::new(vec![g.co, g.t, g.f], out)
}

/// Gradients of [`conv2d`]: `(dx, dw, db)`. `dx` is skipped unless requested.
pub fn conv2d_backward(
    x: &Tensor,
    w: &Tensor,
    b: &Tensor,
    dilation: (usize, usize),
    gout: &Tensor,
    need_dx: bool,
) -> Result<(Option<Tensor>, Tensor, Tensor)> {
    let g = ConvGeom::new(x, w, b, dilation)?;
    let p = g.t * g.f;
    let go = gout.data();
    let db: Vec<f64> = go.chunks(p).map(|row| row.iter().sum()).collect();
    let r = g.rows();
    let mut dw = vec![0.0; g.co * r];
    let mut dx = need_dx.then(|| vec![0.0; x.len()]);
    if g.pointwise() {
        gemm(g.co, p, g.ci, go, (p, 1), x.data(), (1, p), 0.0, &mut dw, g.ci);
        if let Some(dx) = dx.as_mut() {
            gemm(g.ci, g.co, p, w.data(), (1, g.ci), go, (p, 1), 0.0, dx, p);
        }
    } else {
        let step = g.chunk_rows();
        let mut col = vec![0.0; r * step * g.f];
        let mut dcol = if need_dx {
            vec![0.0; r * step * g.f]
        } else {
            Vec::new()
        };
        let mut t0 = 0;
        while t0 < g.t {
            let t1 = (t0 + step).min(g.t);
            let pc = (t1 - t0) * g.f;
            g.im2col(x.data(), t0, t1, &mut col);
            gemm(
                g.co,
                pc,
                r,
                &go[t0 * g.f..],
                (p, 1),
                &col,
                (1, pc),
                1.0,
                &mut dw,
                r,
            );
            if let Some(dx) = dx.as_mut() {
                gemm(
                    r,
                    g.co,
                    pc,
                    w.data(),
                    (1, r),
                    &go[t0 * g.f..],
                    (p, 1),
                    0.0,
                    &mut dcol,
                    pc,
                );
                g.col2im(&dcol, t0, t1, dx);
            }
            t0 = t1;
        }
    }
    Ok((
        dx.map(|d| Tensor::new(x.shape().to_vec(), d)).transpose()?,
        Tensor::new(w.shape().to_vec(), dw)?,
        Tensor::new(vec![g.co], db)?,
    ))
}

// ---------------------------------------------------------------------------
// Layer normalization over one axis

/// Splits a shape around `axis` into `(outer, n, inner)`.
pub(crate) fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Cached statistics of a layer-norm forward pass.
#[derive(Clone, Debug)]
pub struct LayerNormCache {
    pub xhat: Vec<f64>,
    pub rstd: Vec<f64>,
}

/// Normalizes `x` to zero mean and unit variance along `axis`, then applies
/// the per-index affine `gain`/`bias` (both of length `shape[axis]`).
pub fn layer_norm(
    x: &Tensor,
    gain: &Tensor,
    bias: &Tensor,
    axis: usize,
) -> Result<(Tensor, LayerNormCache)> {
    if axis >= x.rank() {
        return Err(Error::Shape(format!(
            "layer norm axis {axis} out of range for {:?}",
            x.shape()
        )));
    }
    let (outer, n, inner) = axis_split(x.shape(), axis);
    if gain.len() != n || bias.len() != n {
        return Err(Error::Shape(format!(
            "layer norm affine must have {n} entries, got {} / {}",
            gain.len(),
            bias.len()
        )));
    }
    let xd = x.data();
    let mut y = vec![0.0; x.len()];
    let mut xhat = vec![0.0; x.len()];
    let mut rstd = vec![0.0; outer * inner];
    let mut mean = vec![0.0; inner];
    let mut var = vec![0.0; inner];
    let inv_n = 1.0 / n as f64;
    for o in 0..outer {
        let block = o * n * inner;
        mean.fill(0.0);
        var.fill(0.0);
        for k in 0..n {
            let row = &xd[block + k * inner..block + (k + 1) * inner];
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m *= inv_n);
        for k in 0..n {
            let row = &xd[block + k * inner..block + (k + 1) * inner];
            for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
                let d = v - m;
                *s += d * d;
            }
        }
        let rs = &mut rstd[o * inner..(o + 1) * inner];
        for (r, s) in rs.iter_mut().zip(&var) {
            *r = 1.0 / (s * inv_n + LAYER_NORM_EPS).sqrt();
        }
        for k in 0..n {
            let range = block + k * inner..block + (k + 1) * inner;
            let (gk, bk) = (gain.data()[k], bias.data()[k]);
            for i in 0..inner {
                let h = (xd[range.start + i] - mean[i]) * rs[i];
                xhat[range.start + i] = h;
                y[range.start + i] = h * gk + bk;
            }
        }
    }
    Ok((
        Tensor::new(x.shape().to_vec(), y)?,
        LayerNormCache { xhat, rstd },
    ))
}

/// Gradients of [`layer_norm`]: `(dx, dgain, dbias)`.
pub fn layer_norm_backward(
    shape: &[usize],
    gain: &Tensor,
    cache: &LayerNormCache,
    axis: usize,
    gout: &Tensor,
) -> (Tensor, Tensor, Tensor) {
    let (outer, n, inner) = axis_split(shape, axis);
    let g = gout.data();
    let xh = &cache.xhat;
    let mut dx = vec![0.0; g.len()];
    let mut dgain = vec![0.0; n];
    let mut dbias = vec![0.0; n];
    let mut sum_d = vec![0.0; inner];
    let mut sum_dx = vec![0.0; inner];
    let inv_n = 1.0 / n as f64;
    for o in 0..outer {
        let block = o * n * inner;
        sum_d.fill(0.0);
        sum_dx.fill(0.0);
        for k in 0..n {
            let gk = gain.data()[k];
            let (mut dg, mut dbs) = (0.0, 0.0);
            for i in 0..inner {
                let idx = block + k * inner + i;
                dg += g[idx] * xh[idx];
                dbs += g[idx];
                let d = g[idx] * gk;
                sum_d[i] += d;
                sum_dx[i] += d * xh[idx];
            }
            dgain[k] += dg;
            dbias[k] += dbs;
        }
        let rs = &cache.rstd[o * inner..(o + 1) * inner];
        for k in 0..n {
            let gk = gain.data()[k];
            for i in 0..inner {
                let idx = block + k * inner + i;
                let d = g[idx] * gk;
                dx[idx] = rs[i] * (d - inv_n * sum_d[i] - xh[idx] * inv_n * sum_dx[i]);
            }
        }
    }
    (
        Tensor::new(shape.to_vec(), dx).expect("shape preserved"),
        Tensor::new(vec![n], dgain).expect("shape preserved"),
        Tensor::new(vec![n], dbias).expect("shape preserved"),
    )
}

// ---------------------------------------------------------------------------
// SMU activation

const FRAC_2_SQRT_PI: f64 = std::f64::consts::FRAC_2_SQRT_PI;

/// Smooth maximum unit: `((1+α)x + (1−α)·x·erf(μ(1−α)x)) / 2`.
pub fn smu(x: f64, alpha: f64, mu: f64) -> f64 {
    let c = mu * (1.0 - alpha);
    0.5 * ((1.0 + alpha) * x + (1.0 - alpha) * x * libm::erf(c * x))
}

/// `(∂f/∂x, ∂f/∂μ)` of [`smu`].
pub fn smu_grad(x: f64, alpha: f64, mu: f64) -> (f64, f64) {
    let one_m = 1.0 - alpha;
    let c = mu * one_m;
    let gauss = (-(c * x) * (c * x)).exp();
    let dx = 0.5 * ((1.0 + alpha) + one_m * (libm::erf(c * x) + x * FRAC_2_SQRT_PI * gauss * c));
    let dmu = 0.5 * one_m * x * FRAC_2_SQRT_PI * gauss * one_m * x;
    (dx, dmu)
}

// ---------------------------------------------------------------------------
// Linear layers over the last axis

/// `y = x Wᵀ + b` with `x` `[..., Din]`, `w` `[Dout, Din]`, `b` `[Dout]`.
pub fn linear(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    let [dout, din] = w.shape()[..] else {
        return Err(Error::Shape(format!("linear weight must be rank 2, got {:?}", w.shape())));
    };
    let last = *x.shape().last().unwrap_or(&0);
    if last != din || b.shape() != [dout] {
        return Err(Error::Shape(format!(
            "linear {din}->{dout} applied to {:?} (bias {:?})",
            x.shape(),
            b.shape()
        )));
    }
    let rows = x.len() / din;
    let mut y = vec![0.0; rows * dout];
    gemm(rows, din, dout, x.data(), (din, 1), w.data(), (1, din), 0.0, &mut y, dout);
    for row in y.chunks_mut(dout) {
        for (v, bb) in row.iter_mut().zip(b.data()) {
            *v += bb;
        }
    }
    let mut shape = x.shape().to_vec();
    *shape.last_mut().expect("rank >= 1") = dout;
    Tensor::new(shape, y)
}

pub fn linear_backward(
    x: &Tensor,
    w: &Tensor,
    gout: &Tensor,
    need_dx: bool,
) -> (Option<Tensor>, Tensor, Tensor) {
    let (dout, din) = (w.shape()[0], w.shape()[1]);
    let rows = x.len() / din;
    let g = gout.data();
    let mut dw = vec![0.0; dout * din];
    gemm(dout, rows, din, g, (1, dout), x.data(), (din, 1), 0.0, &mut dw, din);
    let mut db = vec![0.0; dout];
    for row in g.chunks(dout) {
        for (d, v) in db.iter_mut().zip(row) {
            *d += v;
        }
    }
    let dx = need_dx.then(|| {
        let mut dx = vec![0.0; rows * din];
        gemm(rows, dout, din, g, (dout, 1), w.data(), (din, 1), 0.0, &mut dx, din);
        Tensor::new(x.shape().to_vec(), dx).expect("shape preserved")
    });
    (
        dx,
        Tensor::new(vec![dout, din], dw).expect("shape preserved"),
        Tensor::new(vec![dout], db).expect("shape preserved"),
    )
}

// ---------------------------------------------------------------------------
// Multi-head scaled dot-product attention

/// Full self-attention over `[N, L, D]` projections split into `heads`.
/// Returns the attended values and the row-stochastic weights `[N, H, L, L]`.
pub fn attention(q: &Tensor, k: &Tensor, v: &Tensor, heads: usize) -> Result<(Tensor, Vec<f64>)> {
    let (n, l, d) = q.dims3()?;
    q.same_shape(k, "attention keys")?;
    q.same_shape(v, "attention values")?;
    if heads == 0 || d % heads != 0 {
        return Err(Error::Config(format!("d_model {d} not divisible by {heads} heads")));
    }
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut probs = vec![0.0; n * heads * l * l];
    let mut out = vec![0.0; n * l * d];
    for s in 0..n {
        for h in 0..heads {
            let base = s * l * d + h * dh;
            let p = &mut probs[(s * heads + h) * l * l..(s * heads + h + 1) * l * l];
            gemm_scaled(l, dh, l, scale, &q.data()[base..], (d, 1), &k.data()[base..], (1, d), 0.0, p, l);
            for row in p.chunks_mut(l) {
                let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for e in row.iter_mut() {
                    *e = (*e - m).exp();
                    z += *e;
                }
                row.iter_mut().for_each(|e| *e /= z);
            }
            gemm(l, l, dh, p, (l, 1), &v.data()[base..], (d, 1), 0.0, &mut out[base..], d);
        }
    }
    Ok((Tensor::new(vec![n, l, d], out)?, probs))
}

pub fn attention_backward(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    probs: &[f64],
    heads: usize,
    gout: &Tensor,
) -> (Tensor, Tensor, Tensor) {
    let (n, l, d) = (q.shape()[0], q.shape()[1], q.shape()[2]);
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut dq = vec![0.0; q.len()];
    let mut dk = vec![0.0; q.len()];
    let mut dv = vec![0.0; q.len()];
    let mut dp = vec![0.0; l * l];
    let g = gout.data();
    for s in 0..n {
        for h in 0..heads {
            let base = s * l * d + h * dh;
            let p = &probs[(s * heads + h) * l * l..(s * heads + h + 1) * l * l];
            // dV = Pᵀ dO
            gemm(l, l, dh, p, (1, l), &g[base..], (d, 1), 0.0, &mut dv[base..], d);
            // dP = dO Vᵀ
            gemm(l, dh, l, &g[base..], (d, 1), &v.data()[base..], (1, d), 0.0, &mut dp, l);
            for (prow, drow) in p.chunks(l).zip(dp.chunks_mut(l)) {
                let dot: f64 = prow.iter().zip(drow.iter()).map(|(a, b)| a * b).sum();
                for (dd, pp) in drow.iter_mut().zip(prow) {
                    *dd = pp * (*dd - dot);
                }
            }
            gemm_scaled(l, l, dh, scale, &dp, (l, 1), &k.data()[base..], (d, 1), 0.0, &mut dq[base..], d);
            gemm_scaled(l, l, dh, scale, &dp, (1, l), &q.data()[base..], (d, 1), 0.0, &mut dk[base..], d);
        }
    }
    let shape = vec![n, l, d];
    (
        Tensor::new(shape.clone(), dq).expect("shape preserved"),
        Tensor::new(shape.clone(), dk).expect("shape preserved"),
        Tensor::new(shape, dv).expect("shape preserved"),
    )
}

// ---------------------------------------------------------------------------
// Depthwise 1-D convolution along the sequence axis of `[N, L, D]`

pub fn depthwise_conv1d(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (n, l, d) = x.dims3()?;
    let [wd, k] = w.shape()[..] else {
        return Err(Error::Shape(format!("depthwise weight must be [D, k], got {:?}", w.shape())));
    };
    if wd != d || b.shape() != [d] {
        return Err(Error::Shape(format!(
            "depthwise conv over {d} channels got weight {:?} bias {:?}",
            w.shape(),
            b.shape()
        )));
    }
    if k % 2 == 0 {
        return Err(Error::Config(format!("depthwise kernel must be odd, got {k}")));
    }
    let pad = (k - 1) / 2;
    let xd = x.data();
    let mut y = vec![0.0; x.len()];
    for s in 0..n {
        for t in 0..l {
            let out = &mut y[(s * l + t) * d..(s * l + t + 1) * d];
            out.copy_from_slice(b.data());
            for j in 0..k {
                let tt = t as isize + j as isize - pad as isize;
                if tt < 0 || tt >= l as isize {
                    continue;
                }
                let src = &xd[(s * l + tt as usize) * d..(s * l + tt as usize + 1) * d];
                for c in 0..d {
                    out[c] += w.data()[c * k + j] * src[c];
                }
            }
        }
    }
    Tensor::new(x.shape().to_vec(), y)
}

pub fn depthwise_conv1d_backward(
    x: &Tensor,
    w: &Tensor,
    gout: &Tensor,
    need_dx: bool,
) -> (Option<Tensor>, Tensor, Tensor) {
    let (n, l, d) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let k = w.shape()[1];
    let pad = (k - 1) / 2;
    let (xd, g) = (x.data(), gout.data());
    let mut dx = vec![0.0; if need_dx { x.len() } else { 0 }];
    let mut dw = vec![0.0; d * k];
    let mut db = vec![0.0; d];
    for s in 0..n {
        for t in 0..l {
            let go = &g[(s * l + t) * d..(s * l + t + 1) * d];
            for c in 0..d {
                db[c] += go[c];
            }
            for j in 0..k {
                let tt = t as isize + j as isize - pad as isize;
                if tt < 0 || tt >= l as isize {
                    continue;
                }
                let off = (s * l + tt as usize) * d;
                for c in 0..d {
                    dw[c * k + j] += go[c] * xd[off + c];
                    if need_dx {
                        dx[off + c] += go[c] * w.data()[c * k + j];
                    }
                }
            }
        }
    }
    (
        need_dx.then(|| Tensor::new(x.shape().to_vec(), dx).expect("shape preserved")),
        Tensor::new(vec![d, k], dw).expect("shape preserved"),
        Tensor::new(vec![d], db).expect("shape preserved"),
    )
}

// ---------------------------------------------------------------------------
// Pooling used by the two-dimensions attention module

/// Max and mean over every `(t, f)` position of each channel: two `[C]` vectors
/// plus the flat argmax index per channel.
pub fn global_pool(x: &Tensor) -> Result<(Tensor, Tensor, Vec<usize>)> {
    let (c, t, f) = x.dims3()?;
    let p = t * f;
    let mut mx = Vec::with_capacity(c);
    let mut av = Vec::with_capacity(c);
    let mut arg = Vec::with_capacity(c);
    for row in x.data().chunks(p) {
        let (mut best, mut bi) = (f64::NEG_INFINITY, 0);
        for (i, &v) in row.iter().enumerate() {
            if v > best {
                best = v;
                bi = i;
            }
        }
        mx.push(best);
        arg.push(bi);
        av.push(row.iter().sum::<f64>() / p as f64);
    }
    Ok((Tensor::new(vec![c], mx)?, Tensor::new(vec![c], av)?, arg))
}

/// Max and mean across channels at each position: two `[1, T, F]` maps plus
/// the argmax channel per position.
pub fn channel_pool(x: &Tensor) -> Result<(Tensor, Tensor, Vec<usize>)> {
    let (c, t, f) = x.dims3()?;
    let p = t * f;
    let xd = x.data();
    let mut mx = xd[..p].to_vec();
    let mut arg = vec![0usize; p];
    let mut sum = xd[..p].to_vec();
    for ch in 1..c {
        let row = &xd[ch * p..(ch + 1) * p];
        for i in 0..p {
            if row[i] > mx[i] {
                mx[i] = row[i];
                arg[i] = ch;
            }
            sum[i] += row[i];
        }
    }
    let inv = 1.0 / c as f64;
    sum.iter_mut().for_each(|s| *s *= inv);
    Ok((
        Tensor::new(vec![1, t, f], mx)?,
        Tensor::new(vec![1, t, f], sum)?,
        arg,
    ))
}

// ---------------------------------------------------------------------------
// Layout

/// Permutes the axes of a rank-3 tensor: output axis `i` is input axis `perm[i]`.
pub fn permute3(x: &Tensor, perm: [usize; 3]) -> Result<Tensor> {
    let dims = {
        let (a, b, c) = x.dims3()?;
        [a, b, c]
    };
    let mut seen = [false; 3];
    for &p in &perm {
        if p > 2 || seen[p] {
            return Err(Error::Shape(format!("invalid permutation {perm:?}")));
        }
        seen[p] = true;
    }
    let strides_in = [dims[1] * dims[2], dims[2], 1];
    let od = [dims[perm[0]], dims[perm[1]], dims[perm[2]]];
    let st = [strides_in[perm[0]], strides_in[perm[1]], strides_in[perm[2]]];
    let xd = x.data();
    let mut out = Vec::with_capacity(x.len());
    for i in 0..od[0] {
        for j in 0..od[1] {
            let base = i * st[0] + j * st[1];
            if st[2] == 1 {
                out.extend_from_slice(&xd[base..base + od[2]]);
            } else {
                out.extend((0..od[2]).map(|k| xd[base + k * st[2]]));
            }
        }
    }
    Tensor::new(od.to_vec(), out)
}

pub(crate) fn inverse_perm(perm: [usize; 3]) -> [usize; 3] {
    let mut inv = [0; 3];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}
