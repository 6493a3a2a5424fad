use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::kernels::{self, BatchStats, ConvGeometry, GeluMode, Padding};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LayerKind {
    Conv2d,
    DepthwiseConv2d,
    PointwiseConv2d,
    BatchNorm,
    Elu,
    Gelu,
    MaxPool,
    GlobalAvgPool,
    Dense,
    Dropout,
    Softmax,
    ResidualBegin,
    ResidualEnd,
}

impl LayerKind {
    pub const ALL: [LayerKind; 13] = [
        LayerKind::Conv2d,
        LayerKind::DepthwiseConv2d,
        LayerKind::PointwiseConv2d,
        LayerKind::BatchNorm,
        LayerKind::Elu,
        LayerKind::Gelu,
        LayerKind::MaxPool,
        LayerKind::GlobalAvgPool,
        LayerKind::Dense,
        LayerKind::Dropout,
        LayerKind::Softmax,
        LayerKind::ResidualBegin,
        LayerKind::ResidualEnd,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            LayerKind::Conv2d => "conv2d",
            LayerKind::DepthwiseConv2d => "depthwise_conv2d",
            LayerKind::PointwiseConv2d => "pointwise_conv2d",
            LayerKind::BatchNorm => "batch_norm",
            LayerKind::Elu => "elu",
            LayerKind::Gelu => "gelu",
            LayerKind::MaxPool => "max_pool",
            LayerKind::GlobalAvgPool => "global_avg_pool",
            LayerKind::Dense => "dense",
            LayerKind::Dropout => "dropout",
            LayerKind::Softmax => "softmax",
            LayerKind::ResidualBegin => "residual_add_begin",
            LayerKind::ResidualEnd => "residual_add_end",
        }
    }

    pub fn code(self) -> u8 {
        LayerKind::ALL.iter().position(|&k| k == self).unwrap() as u8
    }

    pub fn from_code(code: u8) -> Result<Self> {
        LayerKind::ALL
            .get(usize::from(code))
            .copied()
            .ok_or_else(|| Error::UnknownLayerKind(format!("code {code}")))
    }
}

impl std::fmt::Display for LayerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormParams<T> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub moving_mean: Tensor<T>,
    pub moving_var: Tensor<T>,
    pub eps: f64,
    pub momentum: f64,
}

impl<T: Scalar> BatchNormParams<T> {
    pub const DEFAULT_EPS: f64 = 1e-3;
    pub const DEFAULT_MOMENTUM: f64 = 0.99;

    pub fn identity(channels: usize) -> Self {
        Self {
            gamma: Tensor::full(vec![channels], T::one()),
            beta: Tensor::zeros(vec![channels]),
            moving_mean: Tensor::zeros(vec![channels]),
            moving_var: Tensor::full(vec![channels], T::one()),
            eps: Self::DEFAULT_EPS,
            momentum: Self::DEFAULT_MOMENTUM,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    /// Per-channel `(scale, shift)` so that inference is `x * scale + shift`.
    pub fn folded(&self) -> Result<(Vec<T>, Vec<T>)> {
        let eps = T::from_f64c(self.eps);
        let mut scale = Vec::with_capacity(self.channels());
        let mut shift = Vec::with_capacity(self.channels());
        for c in 0..self.channels() {
            let denom = self.moving_var.data()[c] + eps;
            if !(denom > T::zero()) {
                return Err(Error::NonPositiveVariance { channel: c });
            }
            let s = self.gamma.data()[c] / denom.sqrt();
            scale.push(s);
            shift.push(self.beta.data()[c] - self.moving_mean.data()[c] * s);
        }
        Ok((scale, shift))
    }
}

/// The operation a layer performs, together with its weights.
#[derive(Debug, Clone, PartialEq)]
pub enum Op<T> {
    Conv2d {
        geometry: ConvGeometry,
        /// `Kh×Kw×Cin×Cout`
        weight: Tensor<T>,
        bias: Option<Tensor<T>>,
    },
    DepthwiseConv2d {
        /// `Kh×Kw×C`
        weight: Tensor<T>,
        bias: Option<Tensor<T>>,
    },
    PointwiseConv2d {
        /// `Cin×Cout`
        weight: Tensor<T>,
        bias: Option<Tensor<T>>,
    },
    BatchNorm(BatchNormParams<T>),
    Elu,
    Gelu(GeluMode),
    MaxPool {
        pool: (usize, usize),
    },
    GlobalAvgPool,
    Dense {
        /// `n×m`
        weight: Tensor<T>,
        bias: Option<Tensor<T>>,
    },
    Dropout {
        rate: f64,
    },
    Softmax,
    ResidualBegin,
    ResidualEnd,
}

/// One node of a sequential graph.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerSpec<T = f32> {
    pub name: String,
    pub op: Op<T>,
    pub trainable: bool,
}

/// What a training-mode forward pass keeps for the backward pass.
#[derive(Debug, Clone)]
pub enum Cache<T> {
    Input(Tensor<T>),
    BatchNorm(BatchStats<T>),
    MaxPool {
        input_shape: Vec<usize>,
        argmax: Vec<usize>,
    },
    GlobalAvgPool {
        input_shape: Vec<usize>,
    },
    Dropout {
        mask: Vec<T>,
    },
    Softmax {
        output: Tensor<T>,
    },
    Passthrough,
}

impl<T: Scalar> LayerSpec<T> {
    pub fn new(name: impl Into<String>, op: Op<T>) -> Self {
        let mut layer = Self {
            name: name.into(),
            op,
            trainable: false,
        };
        layer.trainable = !layer.params().is_empty();
        layer
    }

    pub fn kind(&self) -> LayerKind {
        match &self.op {
            Op::Conv2d { .. } => LayerKind::Conv2d,
            Op::DepthwiseConv2d { .. } => LayerKind::DepthwiseConv2d,
            Op::PointwiseConv2d { .. } => LayerKind::PointwiseConv2d,
            Op::BatchNorm(_) => LayerKind::BatchNorm,
            Op::Elu => LayerKind::Elu,
            Op::Gelu(_) => LayerKind::Gelu,
            Op::MaxPool { .. } => LayerKind::MaxPool,
            Op::GlobalAvgPool => LayerKind::GlobalAvgPool,
            Op::Dense { .. } => LayerKind::Dense,
            Op::Dropout { .. } => LayerKind::Dropout,
            Op::Softmax => LayerKind::Softmax,
            Op::ResidualBegin => LayerKind::ResidualBegin,
            Op::ResidualEnd => LayerKind::ResidualEnd,
        }
    }

    /// Trainable tensors, in gradient order.
    pub fn params(&self) -> Vec<&Tensor<T>> {
        match &self.op {
            Op::Conv2d { weight, bias, .. }
            | Op::DepthwiseConv2d { weight, bias }
            | Op::PointwiseConv2d { weight, bias }
            | Op::Dense { weight, bias } => std::iter::once(weight).chain(bias.as_ref()).collect(),
            Op::BatchNorm(bn) => vec![&bn.gamma, &bn.beta],
            _ => Vec::new(),
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        match &mut self.op {
            Op::Conv2d { weight, bias, .. }
            | Op::DepthwiseConv2d { weight, bias }
            | Op::PointwiseConv2d { weight, bias }
            | Op::Dense { weight, bias } => std::iter::once(weight).chain(bias.as_mut()).collect(),
            Op::BatchNorm(bn) => vec![&mut bn.gamma, &mut bn.beta],
            _ => Vec::new(),
        }
    }

    /// Every stored tensor, trainable or not (batch norm moving statistics
    /// included), in serialization order.
    pub fn tensors(&self) -> Vec<&Tensor<T>> {
        match &self.op {
            Op::BatchNorm(bn) => vec![&bn.gamma, &bn.beta, &bn.moving_mean, &bn.moving_var],
            _ => self.params(),
        }
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        match &mut self.op {
            Op::BatchNorm(bn) => vec![
                &mut bn.gamma,
                &mut bn.beta,
                &mut bn.moving_mean,
                &mut bn.moving_var,
            ],
            Op::Conv2d { weight, bias, .. }
            | Op::DepthwiseConv2d { weight, bias }
            | Op::PointwiseConv2d { weight, bias }
            | Op::Dense { weight, bias } => std::iter::once(weight).chain(bias.as_mut()).collect(),
            _ => Vec::new(),
        }
    }

    /// Per-example output shape (`[H, W, C]` or `[C]`) for a per-example input.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let spatial = |what: &str| -> Result<(usize, usize, usize)> {
            match *input {
                [h, w, c] => Ok((h, w, c)),
                _ => Err(Error::shape(0, format!("{what} needs an H×W×C input, got {input:?}"))),
            }
        };
        let mismatch = |detail: String| Err(Error::shape(0, detail));
        match &self.op {
            Op::Conv2d {
                geometry, weight, ..
            } => {
                let (h, w, c) = spatial("conv2d")?;
                let s = weight.shape();
                if s[2] != c || (s[0], s[1]) != (geometry.kh, geometry.kw) {
                    return mismatch(format!("conv2d weight {s:?} vs input channels {c}"));
                }
                let (oh, ow, _, _) = geometry.output(h, w)?;
                Ok(vec![oh, ow, s[3]])
            }
            Op::DepthwiseConv2d { weight, .. } => {
                let (h, w, c) = spatial("depthwise_conv2d")?;
                if weight.shape()[2] != c {
                    return mismatch(format!(
                        "depthwise weight has {} channels, input has {c}",
                        weight.shape()[2]
                    ));
                }
                Ok(vec![h, w, c])
            }
            Op::PointwiseConv2d { weight, .. } => {
                let (h, w, c) = spatial("pointwise_conv2d")?;
                if weight.shape()[0] != c {
                    return mismatch(format!(
                        "pointwise weight expects {} channels, input has {c}",
                        weight.shape()[0]
                    ));
                }
                Ok(vec![h, w, weight.shape()[1]])
            }
            Op::BatchNorm(bn) => {
                if input.last() != Some(&bn.channels()) {
                    return mismatch(format!(
                        "batch norm over {} channels, input {input:?}",
                        bn.channels()
                    ));
                }
                Ok(input.to_vec())
            }
            Op::MaxPool { pool } => {
                let (h, w, c) = spatial("max_pool")?;
                let (oh, ow) = (h / pool.0.max(1), w / pool.1.max(1));
                if pool.0 == 0 || pool.1 == 0 || oh == 0 || ow == 0 {
                    return mismatch(format!("pool {pool:?} does not fit input {input:?}"));
                }
                Ok(vec![oh, ow, c])
            }
            Op::GlobalAvgPool => {
                let (_, _, c) = spatial("global_avg_pool")?;
                Ok(vec![c])
            }
            Op::Dense { weight, .. } => match *input {
                [n] if n == weight.shape()[0] => Ok(vec![weight.shape()[1]]),
                _ => mismatch(format!(
                    "dense expects {} features, input {input:?}",
                    weight.shape()[0]
                )),
            },
            Op::Elu
            | Op::Gelu(_)
            | Op::Dropout { .. }
            | Op::Softmax
            | Op::ResidualBegin
            | Op::ResidualEnd => Ok(input.to_vec()),
        }
    }

    /// Inference-mode forward pass. Residual markers are identities here;
    /// the graph executor performs the skip addition.
    pub fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        match &self.op {
            Op::Conv2d {
                geometry,
                weight,
                bias,
            } => kernels::conv2d(x, weight, bias.as_ref(), *geometry),
            Op::DepthwiseConv2d { weight, bias } => {
                kernels::depthwise_conv2d(x, weight, bias.as_ref())
            }
            Op::PointwiseConv2d { weight, bias } => {
                kernels::pointwise_conv2d(x, weight, bias.as_ref())
            }
            Op::BatchNorm(bn) => kernels::batch_norm_infer(
                x,
                bn.gamma.data(),
                bn.beta.data(),
                bn.moving_mean.data(),
                bn.moving_var.data(),
                T::from_f64c(bn.eps),
            ),
            Op::Elu => Ok(kernels::elu(x)),
            Op::Gelu(mode) => Ok(kernels::gelu(x, *mode)),
            Op::MaxPool { pool } => Ok(kernels::max_pool(x, *pool)?.0),
            Op::GlobalAvgPool => kernels::global_avg_pool(x),
            Op::Dense { weight, bias } => kernels::dense(x, weight, bias.as_ref()),
            Op::Softmax => Ok(kernels::softmax(x)),
            Op::Dropout { .. } | Op::ResidualBegin | Op::ResidualEnd => Ok(x.clone()),
        }
    }

    /// Training-mode forward pass: dropout active, batch norm on batch
    /// statistics (moving statistics updated with the layer's momentum).
    pub fn forward_train<R: Rng + ?Sized>(
        &mut self,
        x: &Tensor<T>,
        rng: &mut R,
    ) -> Result<(Tensor<T>, Cache<T>)> {
        match &mut self.op {
            Op::Conv2d { .. }
            | Op::DepthwiseConv2d { .. }
            | Op::PointwiseConv2d { .. }
            | Op::Dense { .. }
            | Op::Elu
            | Op::Gelu(_) => Ok((self.infer(x)?, Cache::Input(x.clone()))),
            Op::BatchNorm(bn) => {
                let (y, stats) = kernels::batch_norm_train(
                    x,
                    bn.gamma.data(),
                    bn.beta.data(),
                    T::from_f64c(bn.eps),
                )?;
                let m = T::from_f64c(bn.momentum);
                let one_m = T::one() - m;
                for (mv, &b) in bn.moving_mean.data_mut().iter_mut().zip(&stats.mean) {
                    *mv = *mv * m + b * one_m;
                }
                for (mv, &b) in bn.moving_var.data_mut().iter_mut().zip(&stats.var) {
                    *mv = *mv * m + b * one_m;
                }
                Ok((y, Cache::BatchNorm(stats)))
            }
            Op::MaxPool { pool } => {
                let (y, argmax) = kernels::max_pool(x, *pool)?;
                Ok((
                    y,
                    Cache::MaxPool {
                        input_shape: x.shape().to_vec(),
                        argmax,
                    },
                ))
            }
            Op::GlobalAvgPool => Ok((
                kernels::global_avg_pool(x)?,
                Cache::GlobalAvgPool {
                    input_shape: x.shape().to_vec(),
                },
            )),
            Op::Dropout { rate } => {
                let (y, mask) = kernels::dropout_train(x, *rate, rng);
                Ok((y, Cache::Dropout { mask }))
            }
            Op::Softmax => {
                let y = kernels::softmax(x);
                Ok((y.clone(), Cache::Softmax { output: y }))
            }
            Op::ResidualBegin | Op::ResidualEnd => Ok((x.clone(), Cache::Passthrough)),
        }
    }

    /// Returns the input gradient and the parameter gradients in
    /// [`LayerSpec::params`] order.
    pub fn backward(
        &self,
        dy: &Tensor<T>,
        cache: Option<&Cache<T>>,
    ) -> Result<(Tensor<T>, Vec<Tensor<T>>)> {
        let cache = cache.ok_or(Error::MissingCache { layer: 0 })?;
        let with_bias = |dw: Tensor<T>, db: Tensor<T>, bias: &Option<Tensor<T>>| {
            if bias.is_some() {
                vec![dw, db]
            } else {
                vec![dw]
            }
        };
        match (&self.op, cache) {
            (
                Op::Conv2d {
                    geometry,
                    weight,
                    bias,
                },
                Cache::Input(x),
            ) => {
                let (dx, dw, db) = kernels::conv2d_backward(x, weight, dy, *geometry)?;
                Ok((dx, with_bias(dw, db, bias)))
            }
            (Op::DepthwiseConv2d { weight, bias }, Cache::Input(x)) => {
                let (dx, dw, db) = kernels::depthwise_conv2d_backward(x, weight, dy)?;
                Ok((dx, with_bias(dw, db, bias)))
            }
            (Op::PointwiseConv2d { weight, bias }, Cache::Input(x)) => {
                let (dx, dw, db) = kernels::pointwise_conv2d_backward(x, weight, dy)?;
                Ok((dx, with_bias(dw, db, bias)))
            }
            (Op::Dense { weight, bias }, Cache::Input(x)) => {
                let (dx, dw, db) = kernels::dense_backward(x, weight, dy)?;
                Ok((dx, with_bias(dw, db, bias)))
            }
            (Op::BatchNorm(bn), Cache::BatchNorm(stats)) => {
                let (dx, dg, dbeta) = kernels::batch_norm_train_backward(dy, bn.gamma.data(), stats)?;
                let c = bn.channels();
                Ok((
                    dx,
                    vec![Tensor::new(vec![c], dg)?, Tensor::new(vec![c], dbeta)?],
                ))
            }
            (Op::Elu, Cache::Input(x)) => Ok((kernels::elu_backward(x, dy), vec![])),
            (Op::Gelu(mode), Cache::Input(x)) => Ok((kernels::gelu_backward(x, dy, *mode), vec![])),
            (Op::MaxPool { .. }, Cache::MaxPool { input_shape, argmax }) => Ok((
                kernels::max_pool_backward(input_shape, argmax, dy)?,
                vec![],
            )),
            (Op::GlobalAvgPool, Cache::GlobalAvgPool { input_shape }) => Ok((
                kernels::global_avg_pool_backward(input_shape, dy)?,
                vec![],
            )),
            (Op::Dropout { .. }, Cache::Dropout { mask }) => {
                let data = dy.data().iter().zip(mask).map(|(&g, &m)| g * m).collect();
                Ok((Tensor::new(dy.shape().to_vec(), data)?, vec![]))
            }
            (Op::Softmax, Cache::Softmax { output }) => {
                Ok((kernels::softmax_backward(output, dy), vec![]))
            }
            (Op::ResidualBegin | Op::ResidualEnd, Cache::Passthrough) => Ok((dy.clone(), vec![])),
            _ => Err(Error::MissingCache { layer: 0 }),
        }
    }
}

/// Convenience constructors used by the model builders and tests.
impl<T: Scalar> LayerSpec<T> {
    pub fn conv2d(name: &str, kernel: usize, cin: usize, cout: usize, bias: bool) -> Self {
        Self::new(
            name,
            Op::Conv2d {
                geometry: ConvGeometry::same(kernel, kernel),
                weight: Tensor::zeros(vec![kernel, kernel, cin, cout]),
                bias: bias.then(|| Tensor::zeros(vec![cout])),
            },
        )
    }

    /// Patch embedding: kernel = stride = `patch`, no padding.
    pub fn patch_embedding(name: &str, patch: usize, cin: usize, cout: usize, bias: bool) -> Self {
        Self::new(
            name,
            Op::Conv2d {
                geometry: ConvGeometry {
                    kh: patch,
                    kw: patch,
                    stride: patch,
                    padding: Padding::Valid,
                },
                weight: Tensor::zeros(vec![patch, patch, cin, cout]),
                bias: bias.then(|| Tensor::zeros(vec![cout])),
            },
        )
    }

    pub fn depthwise(name: &str, kernel: usize, channels: usize, bias: bool) -> Self {
        Self::new(
            name,
            Op::DepthwiseConv2d {
                weight: Tensor::zeros(vec![kernel, kernel, channels]),
                bias: bias.then(|| Tensor::zeros(vec![channels])),
            },
        )
    }

    pub fn pointwise(name: &str, cin: usize, cout: usize, bias: bool) -> Self {
        Self::new(
            name,
            Op::PointwiseConv2d {
                weight: Tensor::zeros(vec![cin, cout]),
                bias: bias.then(|| Tensor::zeros(vec![cout])),
            },
        )
    }

    pub fn batch_norm(name: &str, channels: usize) -> Self {
        Self::new(name, Op::BatchNorm(BatchNormParams::identity(channels)))
    }

    pub fn dense(name: &str, n: usize, m: usize, bias: bool) -> Self {
        Self::new(
            name,
            Op::Dense {
                weight: Tensor::zeros(vec![n, m]),
                bias: bias.then(|| Tensor::zeros(vec![m])),
            },
        )
    }

    pub fn simple(name: &str, op: Op<T>) -> Self {
        Self::new(name, op)
    }
}
