//! Straight-line reference kernels.
//!
//! Each kernel materializes its zero-padded input and walks every tap of
//! every output element, ticking a [`MacCounter`] once per multiplication.
//! They share no code with [`super::kernels`] and serve as the independent
//! side of the convolution tests and of the brute-force complexity count.

use std::cell::Cell;

use crate::error::{Error, Result};
use crate::nn::kernels::{ConvGeometry, Padding};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Default)]
pub struct MacCounter(Cell<u64>);

impl MacCounter {
    #[inline]
    pub fn tick(&self) {
        self.0.set(self.0.get() + 1);
    }

    pub fn get(&self) -> u64 {
        self.0.get()
    }
}

/// Zero-pads `x` (N×H×W×C) and returns the padded buffer, its extents and
/// the output extents.
fn pad_input<T: Scalar>(
    x: &Tensor<T>,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: Padding,
) -> Result<(Vec<T>, usize, usize, usize, usize)> {
    let [n, h, w, c] = *x.shape() else {
        return Err(Error::shape(0, "naive kernels take N×H×W×C input"));
    };
    let (oh, ow, top, left, bottom, right) = match padding {
        Padding::Valid => {
            if h < kh || w < kw {
                return Err(Error::shape(0, "input smaller than kernel"));
            }
            ((h - kh) / stride + 1, (w - kw) / stride + 1, 0, 0, 0, 0)
        }
        Padding::Same => {
            let oh = (h + stride - 1) / stride;
            let ow = (w + stride - 1) / stride;
            let th = ((oh - 1) * stride + kh).saturating_sub(h);
            let tw = ((ow - 1) * stride + kw).saturating_sub(w);
            (oh, ow, th / 2, tw / 2, th - th / 2, tw - tw / 2)
        }
    };
    let (ph, pw) = (h + top + bottom, w + left + right);
    let mut padded = vec![T::zero(); n * ph * pw * c];
    for b in 0..n {
        for i in 0..h {
            for j in 0..w {
                for ch in 0..c {
                    padded[((b * ph + i + top) * pw + j + left) * c + ch] =
                        x.data()[((b * h + i) * w + j) * c + ch];
                }
            }
        }
    }
    Ok((padded, ph, pw, oh, ow))
}

pub fn conv2d<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: Option<&Tensor<T>>,
    geom: ConvGeometry,
    counter: &MacCounter,
) -> Result<Tensor<T>> {
    let [n, _, _, cin] = *x.shape() else {
        return Err(Error::shape(0, "conv input rank"));
    };
    let [kh, kw, _, cout] = *w.shape() else {
        return Err(Error::shape(0, "conv weight rank"));
    };
    let s = geom.stride;
    let (padded, ph, pw, oh, ow) = pad_input(x, kh, kw, s, geom.padding)?;
    let mut out = vec![T::zero(); n * oh * ow * cout];
    for bi in 0..n {
        for oy in 0..oh {
            for ox in 0..ow {
                for co in 0..cout {
                    let mut acc = b.map_or(T::zero(), |b| b.data()[co]);
                    for ky in 0..kh {
                        for kx in 0..kw {
                            for ci in 0..cin {
                                let xv = padded[((bi * ph + oy * s + ky) * pw + ox * s + kx) * cin + ci];
                                let wv = w.data()[((ky * kw + kx) * cin + ci) * cout + co];
                                acc += xv * wv;
                                counter.tick();
                            }
                        }
                    }
                    out[((bi * oh + oy) * ow + ox) * cout + co] = acc;
                }
            }
        }
    }
    Tensor::new(vec![n, oh, ow, cout], out)
}

pub fn depthwise_conv2d<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: Option<&Tensor<T>>,
    counter: &MacCounter,
) -> Result<Tensor<T>> {
    let [n, _, _, c] = *x.shape() else {
        return Err(Error::shape(0, "depthwise input rank"));
    };
    let [kh, kw, _] = *w.shape() else {
        return Err(Error::shape(0, "depthwise weight rank"));
    };
    let (padded, ph, pw, oh, ow) = pad_input(x, kh, kw, 1, Padding::Same)?;
    let mut out = vec![T::zero(); n * oh * ow * c];
    for bi in 0..n {
        for oy in 0..oh {
            for ox in 0..ow {
                for ch in 0..c {
                    let mut acc = b.map_or(T::zero(), |b| b.data()[ch]);
                    for ky in 0..kh {
                        for kx in 0..kw {
                            acc += padded[((bi * ph + oy + ky) * pw + ox + kx) * c + ch]
                                * w.data()[(ky * kw + kx) * c + ch];
                            counter.tick();
                        }
                    }
                    out[((bi * oh + oy) * ow + ox) * c + ch] = acc;
                }
            }
        }
    }
    Tensor::new(vec![n, oh, ow, c], out)
}

/// Pointwise convolution and dense layers: `y[r, o] = b[o] + Σ_i x[r, i] W[i, o]`.
pub fn matmul_rows<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: Option<&Tensor<T>>,
    counter: &MacCounter,
) -> Result<Tensor<T>> {
    let [cin, cout] = *w.shape() else {
        return Err(Error::shape(0, "matmul weight rank"));
    };
    if x.shape().last() != Some(&cin) {
        return Err(Error::shape(0, "matmul inner dimension"));
    }
    let rows = x.len() / cin;
    let mut out = vec![T::zero(); rows * cout];
    for r in 0..rows {
        for o in 0..cout {
            let mut acc = b.map_or(T::zero(), |b| b.data()[o]);
            for i in 0..cin {
                acc += x.data()[r * cin + i] * w.data()[i * cout + o];
                counter.tick();
            }
            out[r * cout + o] = acc;
        }
    }
    let mut shape = x.shape().to_vec();
    *shape.last_mut().unwrap() = cout;
    Tensor::new(shape, out)
}

/// Inference batch norm in folded form `x * a + b`; ticks twice per element
/// (one multiply, one add).
pub fn batch_norm_affine<T: Scalar>(
    x: &Tensor<T>,
    scale: &[T],
    shift: &[T],
    counter: &MacCounter,
) -> Tensor<T> {
    let c = scale.len();
    let mut out = x.clone();
    for px in out.data_mut().chunks_mut(c) {
        for ch in 0..c {
            px[ch] = px[ch] * scale[ch];
            counter.tick();
            px[ch] = px[ch] + shift[ch];
            counter.tick();
        }
    }
    out
}
