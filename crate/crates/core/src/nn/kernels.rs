//! Forward and backward kernels over batched tensors.
//!
//! Spatial activations are `N×H×W×C`; every kernel fans out over the batch
//! with rayon and reduces weight gradients in batch order, so results do not
//! depend on the thread count.

use rand::Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Padding {
    /// Zero padding so that `out = ceil(in / stride)`.
    Same,
    Valid,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ConvGeometry {
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub padding: Padding,
}

/// Output extent and leading pad along one spatial axis.
fn axis_geometry(len: usize, k: usize, stride: usize, padding: Padding) -> Result<(usize, usize)> {
    if k == 0 || stride == 0 {
        return Err(Error::shape(0, "kernel and stride must be positive"));
    }
    match padding {
        Padding::Same => {
            let out = len.div_ceil(stride);
            let total = ((out.max(1) - 1) * stride + k).saturating_sub(len);
            Ok((out, total / 2))
        }
        Padding::Valid => {
            if len < k {
                return Err(Error::shape(
                    0,
                    format!("input extent {len} smaller than kernel {k}"),
                ));
            }
            Ok(((len - k) / stride + 1, 0))
        }
    }
}

impl ConvGeometry {
    pub fn same(kh: usize, kw: usize) -> Self {
        Self {
            kh,
            kw,
            stride: 1,
            padding: Padding::Same,
        }
    }

    /// `(out_h, out_w, pad_top, pad_left)`.
    pub fn output(&self, h: usize, w: usize) -> Result<(usize, usize, usize, usize)> {
        let (oh, pt) = axis_geometry(h, self.kh, self.stride, self.padding)?;
        let (ow, pl) = axis_geometry(w, self.kw, self.stride, self.padding)?;
        Ok((oh, ow, pt, pl))
    }

    #[inline]
    fn input_coord(&self, out: usize, k: usize, pad: usize, len: usize) -> Option<usize> {
        let i = (out * self.stride + k) as isize - pad as isize;
        (i >= 0 && (i as usize) < len).then_some(i as usize)
    }
}

fn dims4<T: Scalar>(x: &Tensor<T>, what: &str) -> Result<(usize, usize, usize, usize)> {
    match *x.shape() {
        [n, h, w, c] => Ok((n, h, w, c)),
        ref s => Err(Error::shape(0, format!("{what} expects N×H×W×C, got {s:?}"))),
    }
}

fn dims2<T: Scalar>(x: &Tensor<T>, what: &str) -> Result<(usize, usize)> {
    match *x.shape() {
        [n, c] => Ok((n, c)),
        ref s => Err(Error::shape(0, format!("{what} expects N×C, got {s:?}"))),
    }
}

fn check_bias<T: Scalar>(b: Option<&Tensor<T>>, len: usize) -> Result<()> {
    match b {
        Some(b) if b.len() != len => Err(Error::shape(
            0,
            format!("bias has {} entries, expected {len}", b.len()),
        )),
        _ => Ok(()),
    }
}

/// Sums per-example partial gradients in batch order.
fn ordered_sum<T: Scalar>(parts: Vec<Vec<T>>, len: usize) -> Vec<T> {
    let mut acc = vec![T::zero(); len];
    for p in parts {
        for (a, v) in acc.iter_mut().zip(p) {
            *a += v;
        }
    }
    acc
}

// ---------------------------------------------------------------- conv2d

/// Cross-correlation with `w: Kh×Kw×Cin×Cout` plus optional bias.
pub fn conv2d<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: Option<&Tensor<T>>,
    geom: ConvGeometry,
) -> Result<Tensor<T>> {
    let (n, h, wd, cin) = dims4(x, "conv2d")?;
    let [kh, kw, wcin, cout] = *w.shape() else {
        return Err(Error::shape(0, format!("conv2d weight must be rank 4, got {:?}", w.shape())));
    };
    if (kh, kw) != (geom.kh, geom.kw) || wcin != cin {
        return Err(Error::shape(
            0,
            format!("conv2d weight {:?} incompatible with input {:?}", w.shape(), x.shape()),
        ));
    }
    check_bias(b, cout)?;
    let (oh, ow, pt, pl) = geom.output(h, wd)?;
    let mut out = Tensor::zeros(vec![n, oh, ow, cout]);
    let (xs, ws) = (x.data(), w.data());
    out.data_mut()
        .par_chunks_mut((oh * ow * cout).max(1))
        .enumerate()
        .for_each(|(ni, out_n)| {
            let x_n = &xs[ni * h * wd * cin..(ni + 1) * h * wd * cin];
            for oy in 0..oh {
                for ox in 0..ow {
                    let px = &mut out_n[(oy * ow + ox) * cout..(oy * ow + ox + 1) * cout];
                    if let Some(b) = b {
                        px.copy_from_slice(b.data());
                    }
                    for ky in 0..kh {
                        let Some(iy) = geom.input_coord(oy, ky, pt, h) else { continue };
                        for kx in 0..kw {
                            let Some(ix) = geom.input_coord(ox, kx, pl, wd) else { continue };
                            let xin = &x_n[(iy * wd + ix) * cin..(iy * wd + ix + 1) * cin];
                            for (ci, &xv) in xin.iter().enumerate() {
                                let wrow = &ws[((ky * kw + kx) * cin + ci) * cout..][..cout];
                                for (o, &wv) in px.iter_mut().zip(wrow) {
                                    *o += xv * wv;
                                }
                            }
                        }
                    }
                }
            }
        });
    Ok(out)
}

/// Returns `(dx, dw, db)`.
pub fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    dy: &Tensor<T>,
    geom: ConvGeometry,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let (n, h, wd, cin) = dims4(x, "conv2d backward")?;
    let [kh, kw, _, cout] = *w.shape() else {
        return Err(Error::shape(0, "conv2d weight must be rank 4"));
    };
    let (oh, ow, pt, pl) = geom.output(h, wd)?;
    if dy.shape() != [n, oh, ow, cout] {
        return Err(Error::shape(0, format!("conv2d upstream gradient {:?}", dy.shape())));
    }
    let (xs, ws, dys) = (x.data(), w.data(), dy.data());
    let per_example: Vec<(Vec<T>, Vec<T>, Vec<T>)> = (0..n)
        .into_par_iter()
        .map(|ni| {
            let x_n = &xs[ni * h * wd * cin..(ni + 1) * h * wd * cin];
            let dy_n = &dys[ni * oh * ow * cout..(ni + 1) * oh * ow * cout];
            let mut dx = vec![T::zero(); h * wd * cin];
            let mut dw = vec![T::zero(); w.len()];
            let mut db = vec![T::zero(); cout];
            for oy in 0..oh {
                for ox in 0..ow {
                    let g = &dy_n[(oy * ow + ox) * cout..(oy * ow + ox + 1) * cout];
                    for (d, &gv) in db.iter_mut().zip(g) {
                        *d += gv;
                    }
                    for ky in 0..kh {
                        let Some(iy) = geom.input_coord(oy, ky, pt, h) else { continue };
                        for kx in 0..kw {
                            let Some(ix) = geom.input_coord(ox, kx, pl, wd) else { continue };
                            let base = (iy * wd + ix) * cin;
                            for ci in 0..cin {
                                let off = ((ky * kw + kx) * cin + ci) * cout;
                                let wrow = &ws[off..off + cout];
                                let mut acc = T::zero();
                                for (&gv, &wv) in g.iter().zip(wrow) {
                                    acc += gv * wv;
                                }
                                dx[base + ci] += acc;
                                let xv = x_n[base + ci];
                                for (d, &gv) in dw[off..off + cout].iter_mut().zip(g) {
                                    *d += xv * gv;
                                }
                            }
                        }
                    }
                }
            }
            (dx, dw, db)
        })
        .collect();
    let mut dx = Vec::with_capacity(x.len());
    let mut dws = Vec::with_capacity(n);
    let mut dbs = Vec::with_capacity(n);
    for (dxn, dwn, dbn) in per_example {
        dx.extend(dxn);
        dws.push(dwn);
        dbs.push(dbn);
    }
    Ok((
        Tensor::new(x.shape().to_vec(), dx)?,
        Tensor::new(w.shape().to_vec(), ordered_sum(dws, w.len()))?,
        Tensor::new(vec![cout], ordered_sum(dbs, cout))?,
    ))
}

// ------------------------------------------------------------- depthwise

/// Per-channel spatial convolution with `w: Kh×Kw×C`, stride 1, same padding.
pub fn depthwise_conv2d<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: Option<&Tensor<T>>,
) -> Result<Tensor<T>> {
    let (n, h, wd, c) = dims4(x, "depthwise_conv2d")?;
    let [kh, kw, wc] = *w.shape() else {
        return Err(Error::shape(0, format!("depthwise weight must be rank 3, got {:?}", w.shape())));
    };
    if wc != c {
        return Err(Error::shape(
            0,
            format!("depthwise weight has {wc} channels, input has {c}"),
        ));
    }
    check_bias(b, c)?;
    let geom = ConvGeometry::same(kh, kw);
    let (oh, ow, pt, pl) = geom.output(h, wd)?;
    let mut out = Tensor::zeros(vec![n, oh, ow, c]);
    let (xs, ws) = (x.data(), w.data());
    out.data_mut()
        .par_chunks_mut((oh * ow * c).max(1))
        .enumerate()
        .for_each(|(ni, out_n)| {
            let x_n = &xs[ni * h * wd * c..(ni + 1) * h * wd * c];
            for oy in 0..oh {
                for ox in 0..ow {
                    let px = &mut out_n[(oy * ow + ox) * c..(oy * ow + ox + 1) * c];
                    if let Some(b) = b {
                        px.copy_from_slice(b.data());
                    }
                    for ky in 0..kh {
                        let Some(iy) = geom.input_coord(oy, ky, pt, h) else { continue };
                        for kx in 0..kw {
                            let Some(ix) = geom.input_coord(ox, kx, pl, wd) else { continue };
                            let xin = &x_n[(iy * wd + ix) * c..(iy * wd + ix + 1) * c];
                            let wk = &ws[(ky * kw + kx) * c..(ky * kw + kx + 1) * c];
                            for ((o, &xv), &wv) in px.iter_mut().zip(xin).zip(wk) {
                                *o += xv * wv;
                            }
                        }
                    }
                }
            }
        });
    Ok(out)
}

pub fn depthwise_conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    dy: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let (n, h, wd, c) = dims4(x, "depthwise backward")?;
    let [kh, kw, _] = *w.shape() else {
        return Err(Error::shape(0, "depthwise weight must be rank 3"));
    };
    let geom = ConvGeometry::same(kh, kw);
    let (oh, ow, pt, pl) = geom.output(h, wd)?;
    if dy.shape() != [n, oh, ow, c] {
        return Err(Error::shape(0, format!("depthwise upstream gradient {:?}", dy.shape())));
    }
    let (xs, ws, dys) = (x.data(), w.data(), dy.data());
    let per_example: Vec<(Vec<T>, Vec<T>, Vec<T>)> = (0..n)
        .into_par_iter()
        .map(|ni| {
            let x_n = &xs[ni * h * wd * c..(ni + 1) * h * wd * c];
            let dy_n = &dys[ni * oh * ow * c..(ni + 1) * oh * ow * c];
            let mut dx = vec![T::zero(); h * wd * c];
            let mut dw = vec![T::zero(); w.len()];
            let mut db = vec![T::zero(); c];
            for oy in 0..oh {
                for ox in 0..ow {
                    let g = &dy_n[(oy * ow + ox) * c..(oy * ow + ox + 1) * c];
                    for (d, &gv) in db.iter_mut().zip(g) {
                        *d += gv;
                    }
                    for ky in 0..kh {
                        let Some(iy) = geom.input_coord(oy, ky, pt, h) else { continue };
                        for kx in 0..kw {
                            let Some(ix) = geom.input_coord(ox, kx, pl, wd) else { continue };
                            let base = (iy * wd + ix) * c;
                            let woff = (ky * kw + kx) * c;
                            for ch in 0..c {
                                dx[base + ch] += g[ch] * ws[woff + ch];
                                dw[woff + ch] += g[ch] * x_n[base + ch];
                            }
                        }
                    }
                }
            }
            (dx, dw, db)
        })
        .collect();
    let mut dx = Vec::with_capacity(x.len());
    let mut dws = Vec::with_capacity(n);
    let mut dbs = Vec::with_capacity(n);
    for (a, b, cc) in per_example {
        dx.extend(a);
        dws.push(b);
        dbs.push(cc);
    }
    Ok((
        Tensor::new(x.shape().to_vec(), dx)?,
        Tensor::new(w.shape().to_vec(), ordered_sum(dws, w.len()))?,
        Tensor::new(vec![c], ordered_sum(dbs, c))?,
    ))
}

// ------------------------------------------------- pointwise and dense

/// Row-wise affine map `y = x·W + b` over the last axis, for any leading
/// shape. Shared by pointwise convolution and dense layers.
fn rowwise_affine<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: Option<&Tensor<T>>,
    what: &str,
) -> Result<Tensor<T>> {
    let [cin, cout] = *w.shape() else {
        return Err(Error::shape(0, format!("{what} weight must be Cin×Cout, got {:?}", w.shape())));
    };
    let last = *x.shape().last().unwrap_or(&0);
    if last != cin {
        return Err(Error::shape(
            0,
            format!("{what} expects {cin} input features, got {:?}", x.shape()),
        ));
    }
    check_bias(b, cout)?;
    let rows = x.len() / cin.max(1);
    let mut shape = x.shape().to_vec();
    *shape.last_mut().unwrap() = cout;
    let mut out = Tensor::zeros(shape);
    let (xs, ws) = (x.data(), w.data());
    out.data_mut()
        .par_chunks_mut(cout.max(1))
        .enumerate()
        .take(rows)
        .for_each(|(r, o)| {
            if let Some(b) = b {
                o.copy_from_slice(b.data());
            }
            for (ci, &xv) in xs[r * cin..(r + 1) * cin].iter().enumerate() {
                for (ov, &wv) in o.iter_mut().zip(&ws[ci * cout..(ci + 1) * cout]) {
                    *ov += xv * wv;
                }
            }
        });
    Ok(out)
}

/// Returns `(dx, dw, db)`; `dw` sums rows in order.
fn rowwise_affine_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    dy: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let [cin, cout] = *w.shape() else {
        return Err(Error::shape(0, "weight must be Cin×Cout"));
    };
    let rows = x.len() / cin.max(1);
    if dy.len() != rows * cout {
        return Err(Error::shape(0, format!("upstream gradient {:?}", dy.shape())));
    }
    let (xs, ws, dys) = (x.data(), w.data(), dy.data());
    let mut dx = Tensor::zeros(x.shape().to_vec());
    dx.data_mut()
        .par_chunks_mut(cin.max(1))
        .enumerate()
        .for_each(|(r, d)| {
            let g = &dys[r * cout..(r + 1) * cout];
            for (ci, dv) in d.iter_mut().enumerate() {
                let mut acc = T::zero();
                for (&gv, &wv) in g.iter().zip(&ws[ci * cout..(ci + 1) * cout]) {
                    acc += gv * wv;
                }
                *dv = acc;
            }
        });
    // dW[ci, :] = Σ_r x[r, ci] · dy[r, :], parallel over ci, rows in order.
    let mut dw = Tensor::zeros(vec![cin, cout]);
    dw.data_mut()
        .par_chunks_mut(cout.max(1))
        .enumerate()
        .for_each(|(ci, d)| {
            for r in 0..rows {
                let xv = xs[r * cin + ci];
                for (dv, &gv) in d.iter_mut().zip(&dys[r * cout..(r + 1) * cout]) {
                    *dv += xv * gv;
                }
            }
        });
    let mut db = vec![T::zero(); cout];
    for r in 0..rows {
        for (d, &gv) in db.iter_mut().zip(&dys[r * cout..(r + 1) * cout]) {
            *d += gv;
        }
    }
    Ok((dx, dw, Tensor::new(vec![cout], db)?))
}

/// 1×1 convolution with `w: Cin×Cout`.
pub fn pointwise_conv2d<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: Option<&Tensor<T>>,
) -> Result<Tensor<T>> {
    dims4(x, "pointwise_conv2d")?;
    rowwise_affine(x, w, b, "pointwise_conv2d")
}

pub fn pointwise_conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    dy: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    rowwise_affine_backward(x, w, dy)
}

/// Depthwise (no bias) followed by pointwise (with bias).
pub fn separable_conv2d<T: Scalar>(
    x: &Tensor<T>,
    w_depthwise: &Tensor<T>,
    w_pointwise: &Tensor<T>,
    b: Option<&Tensor<T>>,
) -> Result<Tensor<T>> {
    let mid = depthwise_conv2d(x, w_depthwise, None)?;
    pointwise_conv2d(&mid, w_pointwise, b)
}

/// `x: N×n`, `w: n×m`.
pub fn dense<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, b: Option<&Tensor<T>>) -> Result<Tensor<T>> {
    dims2(x, "dense")?;
    rowwise_affine(x, w, b, "dense")
}

pub fn dense_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    dy: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    rowwise_affine_backward(x, w, dy)
}

// ------------------------------------------------------------ batch norm

/// Per-channel `(x - mean) / sqrt(var + eps) * gamma + beta` over the last axis.
pub fn batch_norm_infer<T: Scalar>(
    x: &Tensor<T>,
    gamma: &[T],
    beta: &[T],
    mean: &[T],
    var: &[T],
    eps: T,
) -> Result<Tensor<T>> {
    let c = gamma.len();
    if x.shape().last() != Some(&c) {
        return Err(Error::shape(0, format!("batch norm over {c} channels, input {:?}", x.shape())));
    }
    let mut scale = Vec::with_capacity(c);
    for ch in 0..c {
        let denom = var[ch] + eps;
        if !(denom > T::zero()) {
            return Err(Error::NonPositiveVariance { channel: ch });
        }
        scale.push(gamma[ch] / denom.sqrt());
    }
    let mut out = x.clone();
    for px in out.data_mut().chunks_mut(c) {
        for ch in 0..c {
            px[ch] = (px[ch] - mean[ch]) * scale[ch] + beta[ch];
        }
    }
    Ok(out)
}

/// Batch statistics used by a training-mode forward pass.
#[derive(Debug, Clone)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
    pub xhat: Tensor<T>,
    pub inv_std: Vec<T>,
}

/// Normalizes with the (biased) batch statistics of each channel.
pub fn batch_norm_train<T: Scalar>(
    x: &Tensor<T>,
    gamma: &[T],
    beta: &[T],
    eps: T,
) -> Result<(Tensor<T>, BatchStats<T>)> {
    let c = gamma.len();
    if x.shape().last() != Some(&c) || x.is_empty() {
        return Err(Error::shape(0, format!("batch norm over {c} channels, input {:?}", x.shape())));
    }
    let count = T::from_usize(x.len() / c).unwrap();
    let mut mean = vec![T::zero(); c];
    for px in x.data().chunks(c) {
        for (m, &v) in mean.iter_mut().zip(px) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= count);
    let mut var = vec![T::zero(); c];
    for px in x.data().chunks(c) {
        for ch in 0..c {
            let d = px[ch] - mean[ch];
            var[ch] += d * d;
        }
    }
    var.iter_mut().for_each(|v| *v /= count);
    let mut inv_std = Vec::with_capacity(c);
    for (ch, &v) in var.iter().enumerate() {
        let denom = v + eps;
        if !(denom > T::zero()) {
            return Err(Error::NonPositiveVariance { channel: ch });
        }
        inv_std.push(T::one() / denom.sqrt());
    }
    let mut xhat = x.clone();
    for px in xhat.data_mut().chunks_mut(c) {
        for ch in 0..c {
            px[ch] = (px[ch] - mean[ch]) * inv_std[ch];
        }
    }
    let mut y = xhat.clone();
    for px in y.data_mut().chunks_mut(c) {
        for ch in 0..c {
            px[ch] = px[ch] * gamma[ch] + beta[ch];
        }
    }
    Ok((
        y,
        BatchStats {
            mean,
            var,
            xhat,
            inv_std,
        },
    ))
}

/// Backward through training-mode batch norm. Returns `(dx, dgamma, dbeta)`.
pub fn batch_norm_train_backward<T: Scalar>(
    dy: &Tensor<T>,
    gamma: &[T],
    stats: &BatchStats<T>,
) -> Result<(Tensor<T>, Vec<T>, Vec<T>)> {
    let c = gamma.len();
    if dy.shape() != stats.xhat.shape() {
        return Err(Error::shape(0, "batch norm upstream gradient shape"));
    }
    let count = T::from_usize(dy.len() / c).unwrap();
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for (g, xh) in dy.data().chunks(c).zip(stats.xhat.data().chunks(c)) {
        for ch in 0..c {
            dgamma[ch] += g[ch] * xh[ch];
            dbeta[ch] += g[ch];
        }
    }
    let mut dx = dy.clone();
    for (d, xh) in dx.data_mut().chunks_mut(c).zip(stats.xhat.data().chunks(c)) {
        for ch in 0..c {
            // dxhat = dy * gamma; dx = inv_std/N * (N dxhat - Σdxhat - xhat Σ dxhat·xhat)
            let dxhat = d[ch] * gamma[ch];
            d[ch] = stats.inv_std[ch] / count
                * (count * dxhat - dbeta[ch] * gamma[ch] - xh[ch] * dgamma[ch] * gamma[ch]);
        }
    }
    Ok((dx, dgamma, dbeta))
}

// ------------------------------------------------------------ activations

pub fn elu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(elu_scalar)
}

#[inline]
pub fn elu_scalar<T: Scalar>(v: T) -> T {
    if v > T::zero() {
        v
    } else {
        v.exp_m1()
    }
}

pub fn elu_backward<T: Scalar>(x: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
    x.zip_map(dy, |v, g| if v > T::zero() { g } else { g * v.exp() })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum GeluMode {
    /// `0.5 x (1 + tanh(sqrt(2/π) (x + 0.044715 x³)))`
    #[default]
    Tanh,
    /// `x Φ(x)` with the error function.
    Erf,
}

const GELU_C: f64 = 0.044_715;

#[inline]
pub fn gelu_scalar<T: Scalar>(v: T, mode: GeluMode) -> T {
    let x = v.to_f64c();
    let y = match mode {
        GeluMode::Tanh => {
            let k = (2.0 / std::f64::consts::PI).sqrt();
            0.5 * x * (1.0 + (k * (x + GELU_C * x * x * x)).tanh())
        }
        GeluMode::Erf => 0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2)),
    };
    T::from_f64c(y)
}

#[inline]
fn gelu_derivative(x: f64, mode: GeluMode) -> f64 {
    match mode {
        GeluMode::Tanh => {
            let k = (2.0 / std::f64::consts::PI).sqrt();
            let t = (k * (x + GELU_C * x * x * x)).tanh();
            0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * k * (1.0 + 3.0 * GELU_C * x * x)
        }
        GeluMode::Erf => {
            let cdf = 0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2));
            let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
            cdf + x * pdf
        }
    }
}

pub fn gelu<T: Scalar>(x: &Tensor<T>, mode: GeluMode) -> Tensor<T> {
    x.map(|v| gelu_scalar(v, mode))
}

pub fn gelu_backward<T: Scalar>(x: &Tensor<T>, dy: &Tensor<T>, mode: GeluMode) -> Tensor<T> {
    x.zip_map(dy, |v, g| g * T::from_f64c(gelu_derivative(v.to_f64c(), mode)))
}

// ------------------------------------------------------------------ pools

/// Non-overlapping max pooling; trailing rows/columns that do not fill a
/// window are dropped. Returns the output and, per output cell, the flat
/// input index of its maximum (first index wins ties).
pub fn max_pool<T: Scalar>(x: &Tensor<T>, pool: (usize, usize)) -> Result<(Tensor<T>, Vec<usize>)> {
    let (n, h, w, c) = dims4(x, "max_pool")?;
    let (ph, pw) = pool;
    if ph == 0 || pw == 0 {
        return Err(Error::shape(0, "pool extents must be at least 1"));
    }
    let (oh, ow) = (h / ph, w / pw);
    if oh == 0 || ow == 0 {
        return Err(Error::shape(
            0,
            format!("pool {pool:?} larger than input {h}×{w}"),
        ));
    }
    let xs = x.data();
    let mut out = Vec::with_capacity(n * oh * ow * c);
    let mut arg = Vec::with_capacity(n * oh * ow * c);
    for ni in 0..n {
        for oy in 0..oh {
            for ox in 0..ow {
                for ch in 0..c {
                    let mut best = usize::MAX;
                    let mut best_v = T::neg_infinity();
                    for dy in 0..ph {
                        for dx in 0..pw {
                            let idx = ((ni * h + oy * ph + dy) * w + ox * pw + dx) * c + ch;
                            if best == usize::MAX || xs[idx] > best_v {
                                best = idx;
                                best_v = xs[idx];
                            }
                        }
                    }
                    out.push(best_v);
                    arg.push(best);
                }
            }
        }
    }
    Ok((Tensor::new(vec![n, oh, ow, c], out)?, arg))
}

pub fn max_pool_backward<T: Scalar>(
    input_shape: &[usize],
    argmax: &[usize],
    dy: &Tensor<T>,
) -> Result<Tensor<T>> {
    if argmax.len() != dy.len() {
        return Err(Error::shape(0, "max pool upstream gradient shape"));
    }
    let mut dx = Tensor::zeros(input_shape.to_vec());
    let d = dx.data_mut();
    for (&i, &g) in argmax.iter().zip(dy.data()) {
        d[i] += g;
    }
    Ok(dx)
}

/// `N×H×W×C → N×C` spatial mean.
pub fn global_avg_pool<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, h, w, c) = dims4(x, "global_avg_pool")?;
    let area = T::from_usize(h * w).unwrap();
    let mut out = vec![T::zero(); n * c];
    for (ni, o) in out.chunks_mut(c).enumerate() {
        for px in x.data()[ni * h * w * c..(ni + 1) * h * w * c].chunks(c) {
            for (ov, &v) in o.iter_mut().zip(px) {
                *ov += v;
            }
        }
        o.iter_mut().for_each(|v| *v /= area);
    }
    Tensor::new(vec![n, c], out)
}

pub fn global_avg_pool_backward<T: Scalar>(input_shape: &[usize], dy: &Tensor<T>) -> Result<Tensor<T>> {
    let [n, h, w, c] = *input_shape else {
        return Err(Error::shape(0, "global average pool input must be rank 4"));
    };
    if dy.shape() != [n, c] {
        return Err(Error::shape(0, "global average pool upstream gradient shape"));
    }
    let area = T::from_usize(h * w).unwrap();
    let mut dx = Vec::with_capacity(n * h * w * c);
    for ni in 0..n {
        let g = &dy.data()[ni * c..(ni + 1) * c];
        for _ in 0..h * w {
            dx.extend(g.iter().map(|&v| v / area));
        }
    }
    Tensor::new(input_shape.to_vec(), dx)
}

// ---------------------------------------------------------- dropout/softmax

/// Inverted dropout: zero each entry with probability `rate`, scale the
/// survivors by `1 / (1 - rate)`. Returns the output and the multiplier mask.
pub fn dropout_train<T: Scalar, R: Rng + ?Sized>(
    x: &Tensor<T>,
    rate: f64,
    rng: &mut R,
) -> (Tensor<T>, Vec<T>) {
    if rate <= 0.0 {
        return (x.clone(), vec![T::one(); x.len()]);
    }
    let keep = T::from_f64c(1.0 / (1.0 - rate));
    let mask: Vec<T> = (0..x.len())
        .map(|_| if rng.random::<f64>() < rate { T::zero() } else { keep })
        .collect();
    let data = x.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
    (Tensor::new(x.shape().to_vec(), data).unwrap(), mask)
}

/// Row-wise softmax over the last axis with max subtraction.
pub fn softmax<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let k = *x.shape().last().unwrap_or(&1);
    let mut out = x.clone();
    for row in out.data_mut().chunks_mut(k.max(1)) {
        let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
        let mut sum = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        row.iter_mut().for_each(|v| *v /= sum);
    }
    out
}

/// `dx = y ⊙ (dy - Σ dy·y)` per row.
pub fn softmax_backward<T: Scalar>(y: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
    let k = *y.shape().last().unwrap_or(&1);
    let mut dx = dy.clone();
    for (d, yr) in dx.data_mut().chunks_mut(k.max(1)).zip(y.data().chunks(k.max(1))) {
        let dot: T = d.iter().zip(yr).map(|(&a, &b)| a * b).sum();
        for (dv, &yv) in d.iter_mut().zip(yr) {
            *dv = yv * (*dv - dot);
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::naive;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random(shape: Vec<usize>, seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    fn assert_close(a: &Tensor<f64>, b: &Tensor<f64>, tol: f64) {
        assert_eq!(a.shape(), b.shape());
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() <= tol * x.abs().max(y.abs()).max(1.0), "{x} vs {y}");
        }
    }

    #[test]
    fn identity_1x1_conv() {
        let x = random(vec![1, 4, 5, 1], 1);
        let w = Tensor::full(vec![1, 1, 1, 1], 1.0);
        let y = conv2d(&x, &w, None, ConvGeometry::same(1, 1)).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn all_ones_3x3_receptive_field_counts() {
        let x = Tensor::full(vec![1, 3, 3, 1], 1.0f64);
        let w = Tensor::full(vec![3, 3, 1, 1], 1.0);
        let y = conv2d(&x, &w, None, ConvGeometry::same(3, 3)).unwrap();
        assert_eq!(y.data()[4], 9.0);
        for corner in [0, 2, 6, 8] {
            assert_eq!(y.data()[corner], 4.0);
        }
        assert_eq!(y.data()[1], 6.0);
    }

    #[test]
    fn conv_is_linear_without_bias() {
        let x = random(vec![2, 6, 7, 3], 2);
        let w = random(vec![3, 3, 3, 4], 3);
        let g = ConvGeometry::same(3, 3);
        let y = conv2d(&x, &w, None, g).unwrap();
        let y2 = conv2d(&x.scale(2.5), &w, None, g).unwrap();
        assert_close(&y2, &y.scale(2.5), 1e-12);
    }

    #[test]
    fn conv_matches_naive_oracle() {
        for seed in 0..3 {
            let x = random(vec![2, 8, 8, 3], 10 + seed);
            let w = random(vec![3, 3, 3, 4], 20 + seed);
            let b = random(vec![4], 30 + seed);
            let g = ConvGeometry::same(3, 3);
            let fast = conv2d(&x, &w, Some(&b), g).unwrap();
            let slow = naive::conv2d(&x, &w, Some(&b), g, &naive::MacCounter::default()).unwrap();
            assert_close(&fast, &slow, 1e-12);
        }
    }

    #[test]
    fn strided_valid_conv_matches_naive_oracle() {
        let x = random(vec![1, 9, 10, 2], 4);
        let w = random(vec![2, 2, 2, 3], 5);
        let g = ConvGeometry {
            kh: 2,
            kw: 2,
            stride: 2,
            padding: Padding::Valid,
        };
        let fast = conv2d(&x, &w, None, g).unwrap();
        assert_eq!(fast.shape(), &[1, 4, 5, 3]);
        let slow = naive::conv2d(&x, &w, None, g, &naive::MacCounter::default()).unwrap();
        assert_close(&fast, &slow, 1e-12);
    }

    #[test]
    fn conv_shape_mismatch_is_reported() {
        let x = random(vec![1, 4, 4, 2], 1);
        let w = random(vec![3, 3, 3, 4], 1);
        assert!(matches!(
            conv2d(&x, &w, None, ConvGeometry::same(3, 3)),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn depthwise_identity_and_channel_independence() {
        let x = random(vec![1, 4, 4, 3], 6);
        let ones = Tensor::full(vec![1, 1, 3], 1.0);
        assert_eq!(depthwise_conv2d(&x, &ones, None).unwrap(), x);

        let w = random(vec![3, 3, 3], 7);
        let base = depthwise_conv2d(&x, &w, None).unwrap();
        let mut bumped = x.clone();
        for px in bumped.data_mut().chunks_mut(3) {
            px[1] += 0.5;
        }
        let out = depthwise_conv2d(&bumped, &w, None).unwrap();
        for (a, b) in base.data().chunks(3).zip(out.data().chunks(3)) {
            assert_eq!(a[0], b[0]);
            assert_eq!(a[2], b[2]);
        }
        assert_ne!(base, out);
    }

    #[test]
    fn depthwise_equals_channel_masked_conv() {
        let x = random(vec![1, 4, 4, 2], 8);
        let w = random(vec![3, 3, 2], 9);
        let b = random(vec![2], 10);
        let mut full = Tensor::zeros(vec![3, 3, 2, 2]);
        for k in 0..9 {
            for c in 0..2 {
                full.data_mut()[(k * 2 + c) * 2 + c] = w.data()[k * 2 + c];
            }
        }
        let dw = depthwise_conv2d(&x, &w, Some(&b)).unwrap();
        let cv = conv2d(&x, &full, Some(&b), ConvGeometry::same(3, 3)).unwrap();
        assert_close(&dw, &cv, 1e-12);
    }

    #[test]
    fn pointwise_agrees_with_1x1_conv() {
        let x = random(vec![1, 5, 5, 3], 11);
        let w = random(vec![3, 4], 12);
        let b = random(vec![4], 13);
        let pw = pointwise_conv2d(&x, &w, Some(&b)).unwrap();
        let w4 = w.clone().reshape(vec![1, 1, 3, 4]).unwrap();
        let cv = conv2d(&x, &w4, Some(&b), ConvGeometry::same(1, 1)).unwrap();
        assert_close(&pw, &cv, 1e-12);
    }

    #[test]
    fn pointwise_identity_and_single_pixel_matvec() {
        let x = random(vec![1, 3, 3, 3], 14);
        let eye = Tensor::from_fn(vec![3, 3], |i| if i / 3 == i % 3 { 1.0 } else { 0.0 });
        assert_eq!(pointwise_conv2d(&x, &eye, None).unwrap(), x);

        let px = Tensor::new(vec![1, 1, 1, 3], vec![1.0, 2.0, 3.0]).unwrap();
        let w = Tensor::new(vec![3, 2], vec![1.0, 4.0, 2.0, 5.0, 3.0, 6.0]).unwrap();
        let y = pointwise_conv2d(&px, &w, None).unwrap();
        assert_eq!(y.data(), &[14.0, 32.0]);
    }

    #[test]
    fn separable_is_the_two_stage_composition() {
        let x = random(vec![2, 5, 6, 3], 15);
        let wd = random(vec![3, 3, 3], 16);
        let wp = random(vec![3, 4], 17);
        let b = random(vec![4], 18);
        let sep = separable_conv2d(&x, &wd, &wp, Some(&b)).unwrap();
        let staged =
            pointwise_conv2d(&depthwise_conv2d(&x, &wd, None).unwrap(), &wp, Some(&b)).unwrap();
        assert_eq!(sep, staged);
        assert_eq!(sep.shape(), &[2, 5, 6, 4]);
    }

    #[test]
    fn batch_norm_identity_and_batch_statistics() {
        let x = random(vec![4, 16, 16, 1], 19);
        let y = batch_norm_infer(&x, &[1.0], &[0.0], &[0.0], &[1.0], 1e-12).unwrap();
        assert_close(&y, &x, 1e-9);

        let (gamma, beta) = (1.7, -0.4);
        let (y, _) = batch_norm_train(&x, &[gamma], &[beta], 0.0).unwrap();
        let n = y.len() as f64;
        let mean = y.data().iter().sum::<f64>() / n;
        let var = y.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        assert!((mean - beta).abs() < 1e-6);
        assert!((var - gamma * gamma).abs() < 1e-6);
    }

    #[test]
    fn batch_norm_constant_channel_maps_to_beta() {
        let x = Tensor::full(vec![2, 3, 3, 1], 4.2f64);
        let (y, _) = batch_norm_train(&x, &[2.0], &[0.3], 1e-3).unwrap();
        assert!(y.data().iter().all(|&v| (v - 0.3).abs() < 1e-12));
    }

    #[test]
    fn batch_norm_rejects_non_positive_variance() {
        let x = Tensor::full(vec![1, 1, 1, 1], 1.0f64);
        assert!(matches!(
            batch_norm_infer(&x, &[1.0], &[0.0], &[0.0], &[-1.0], 1e-3),
            Err(Error::NonPositiveVariance { channel: 0 })
        ));
    }

    #[test]
    fn activation_values() {
        assert_eq!(elu_scalar(0.0f64), 0.0);
        let e = elu_scalar(-20.0f64);
        assert!(e > -1.0 && e < -0.999);
        assert_eq!(gelu_scalar(0.0f64, GeluMode::Tanh), 0.0);
        assert!((gelu_scalar(3.0f64, GeluMode::Tanh) - 2.9964).abs() < 5e-5);
        assert!((gelu_scalar(3.0f64, GeluMode::Erf) - 2.9960).abs() < 5e-5);
        for x in [-3.0f64, -1.0, -0.2, 0.5, 2.0] {
            let d = gelu_scalar(x, GeluMode::Tanh) - gelu_scalar(x, GeluMode::Erf);
            assert!(d.abs() < 1e-3);
        }
    }

    #[test]
    fn max_pool_shapes_and_values() {
        let x = random(vec![1, 64, 51, 2], 20);
        let (y, _) = max_pool(&x, (1, 4)).unwrap();
        assert_eq!(y.shape(), &[1, 64, 12, 2]);
        let (y, _) = max_pool(&x, (1, 1)).unwrap();
        assert_eq!(y, x);
        let c = Tensor::full(vec![1, 4, 8, 1], 3.0f64);
        let (y, _) = max_pool(&c, (2, 4)).unwrap();
        assert!(y.data().iter().all(|&v| v == 3.0));
    }

    #[test]
    fn max_pool_tie_routes_to_first_index() {
        let x = Tensor::full(vec![1, 1, 4, 1], 1.0f64);
        let (_, arg) = max_pool(&x, (1, 4)).unwrap();
        assert_eq!(arg, vec![0]);
        let dx = max_pool_backward(x.shape(), &arg, &Tensor::full(vec![1, 1, 1, 1], 1.0)).unwrap();
        assert_eq!(dx.data(), &[1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn global_average() {
        let x = Tensor::new(vec![1, 2, 2, 1], vec![1.0, 2.0, 3.0, 4.0f64]).unwrap();
        assert_eq!(global_avg_pool(&x).unwrap().data(), &[2.5]);
        let c = Tensor::full(vec![2, 3, 5, 4], -1.5f64);
        assert!(global_avg_pool(&c).unwrap().data().iter().all(|&v| v == -1.5));
        let perm = Tensor::new(vec![1, 2, 2, 1], vec![4.0, 1.0, 3.0, 2.0f64]).unwrap();
        assert_eq!(global_avg_pool(&perm).unwrap(), global_avg_pool(&x).unwrap());
    }

    #[test]
    fn gap_backward_spreads_evenly() {
        let shape = [1, 4, 5, 2];
        let dx = global_avg_pool_backward(&shape, &Tensor::full(vec![1, 2], 1.0f64)).unwrap();
        assert!(dx.data().iter().all(|&v| (v - 1.0 / 20.0).abs() < 1e-15));
    }

    #[test]
    fn softmax_normalizes() {
        let u = Tensor::full(vec![1, 10], 0.7f64);
        assert!(softmax(&u).data().iter().all(|&p| (p - 0.1).abs() < 1e-15));
        let logits = random(vec![50, 10], 21).scale(50.0);
        for row in softmax(&logits).data().chunks(10) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn dense_identity_passthrough() {
        let x = random(vec![3, 4], 22);
        let eye = Tensor::from_fn(vec![4, 4], |i| if i / 4 == i % 4 { 1.0 } else { 0.0 });
        assert_eq!(dense(&x, &eye, Some(&Tensor::zeros(vec![4]))).unwrap(), x);
    }

    #[test]
    fn dropout_modes() {
        let x = random(vec![1, 100], 23);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (y, _) = dropout_train(&x, 0.0, &mut rng);
        assert_eq!(y, x);

        let big = Tensor::full(vec![1_000_000], 1.0f32);
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let (y, mask) = dropout_train(&big, 0.3, &mut rng);
        let zeros = y.data().iter().filter(|&&v| v == 0.0).count() as f64 / 1e6;
        assert!((zeros - 0.3).abs() < 0.005, "zero fraction {zeros}");
        assert!(mask.iter().all(|&m| m == 0.0 || (m - 1.0 / 0.7).abs() < 1e-6));
    }
}
