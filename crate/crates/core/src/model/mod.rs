//! The two network families and their shared skeleton.
//!
//! Both stack two convolutional modules, each followed by max pooling over
//! the time axis and dropout, then global average pooling and a 10-way
//! dense classifier:
//!
//! ```text
//! input 64×51×1
//! module(f1)  → MaxPool(1,4) → Dropout(0.3)
//! module(f2)  → MaxPool(1,2) → Dropout(0.3)
//! GlobalAvgPool → Dense(10)
//! ```
//!
//! A Conv-Sep module is `Conv → BN → ELU → SeparableConv → BN → ELU`, the
//! separable convolution being a bias-free depthwise stage followed by a
//! pointwise stage. A Conv-mixer module is a residual depthwise stage
//! (`DW → GELU → BN` plus skip) followed by `PW → GELU → BN`; the network
//! starts with a patch embedding (`Conv(k = stride = patch) → GELU → BN`).
//!
//! Pool tuples are `(frequency, time)`.

pub(crate) mod io;

pub use io::{load_model, read_model, save_model, write_model, MAGIC};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::frontend::Spectrogram;
use crate::nn::{GeluMode, LayerSpec, Op, Sequential};
use crate::tensor::{Scalar, Tensor};

pub const N_CLASSES: usize = 10;
pub const INPUT_SHAPE: [usize; 3] = [64, 51, 1];
pub const DROPOUT_RATE: f64 = 0.3;
pub const FIRST_POOL: (usize, usize) = (1, 4);
pub const SECOND_POOL: (usize, usize) = (1, 2);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Arch {
    ConvSep,
    ConvMixer,
}

impl Arch {
    pub fn tag(self) -> &'static str {
        match self {
            Arch::ConvSep => "conv_sep",
            Arch::ConvMixer => "conv_mixer",
        }
    }
}

impl std::str::FromStr for Arch {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "conv_sep" | "conv-sep" => Ok(Arch::ConvSep),
            "conv_mixer" | "conv-mixer" => Ok(Arch::ConvMixer),
            other => Err(Error::Config(format!("unknown architecture {other:?}"))),
        }
    }
}

impl std::fmt::Display for Arch {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.tag())
    }
}

/// Everything needed to rebuild a network's topology.
#[derive(Debug, Clone, PartialEq)]
pub struct ArchConfig {
    pub arch: Arch,
    pub filters: (usize, usize),
    pub kernel_size: usize,
    /// Conv-mixer only.
    pub patch_size: usize,
    pub use_bias: bool,
    /// Conv-mixer only: batch norm after the patch embedding.
    pub patch_bn: bool,
    pub gelu: GeluMode,
    pub dropout: f64,
    pub input_shape: [usize; 3],
    pub n_classes: usize,
}

impl ArchConfig {
    pub fn conv_sep(f1: usize, f2: usize, kernel_size: usize) -> Self {
        Self {
            arch: Arch::ConvSep,
            filters: (f1, f2),
            kernel_size,
            patch_size: 1,
            use_bias: true,
            patch_bn: false,
            gelu: GeluMode::Tanh,
            dropout: DROPOUT_RATE,
            input_shape: INPUT_SHAPE,
            n_classes: N_CLASSES,
        }
    }

    pub fn conv_mixer(f1: usize, f2: usize, kernel_size: usize, patch_size: usize) -> Self {
        Self {
            arch: Arch::ConvMixer,
            patch_size,
            patch_bn: true,
            ..Self::conv_sep(f1, f2, kernel_size)
        }
    }

    pub fn new(arch: Arch, f1: usize, f2: usize, kernel_size: usize, patch_size: usize) -> Self {
        match arch {
            Arch::ConvSep => Self::conv_sep(f1, f2, kernel_size),
            Arch::ConvMixer => Self::conv_mixer(f1, f2, kernel_size, patch_size),
        }
    }

    pub fn with_input_shape(mut self, shape: [usize; 3]) -> Self {
        self.input_shape = shape;
        self
    }

    fn validate(&self) -> Result<()> {
        let (f1, f2) = self.filters;
        if f1 == 0 || f2 == 0 {
            return Err(Error::Config("filter counts must be at least 1".into()));
        }
        if self.kernel_size == 0 || self.kernel_size % 2 == 0 {
            return Err(Error::Config(format!(
                "kernel size must be odd, got {}",
                self.kernel_size
            )));
        }
        if self.arch == Arch::ConvMixer && self.patch_size == 0 {
            return Err(Error::Config("patch size must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config("dropout rate must lie in [0, 1)".into()));
        }
        if self.n_classes == 0 || self.input_shape.contains(&0) {
            return Err(Error::Config("empty input shape or class count".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub logits: Vec<f32>,
    pub probabilities: Vec<f64>,
    pub top_class: usize,
}

impl Prediction {
    pub fn from_logits(logits: Vec<f32>) -> Self {
        let probabilities = softmax_f64(&logits);
        let top_class = argmax(&probabilities);
        Self {
            logits,
            probabilities,
            top_class,
        }
    }
}

/// Softmax evaluated in double precision with max subtraction.
pub fn softmax_f64(logits: &[f32]) -> Vec<f64> {
    let max = logits.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(f64::from(v)));
    let exps: Vec<f64> = logits.iter().map(|&v| (f64::from(v) - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Index of the largest value; the lowest index wins ties.
pub fn argmax<T: PartialOrd + Copy>(values: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelGraph<T = f32> {
    pub config: ArchConfig,
    pub net: Sequential<T>,
}

fn push_conv_sep_module<T: Scalar>(layers: &mut Vec<LayerSpec<T>>, tag: &str, cin: usize, f: usize, cfg: &ArchConfig) {
    let k = cfg.kernel_size;
    layers.push(LayerSpec::conv2d(&format!("{tag}.conv"), k, cin, f, cfg.use_bias));
    layers.push(LayerSpec::batch_norm(&format!("{tag}.conv_bn"), f));
    layers.push(LayerSpec::simple(&format!("{tag}.conv_elu"), Op::Elu));
    layers.push(LayerSpec::depthwise(&format!("{tag}.sep_depthwise"), k, f, false));
    layers.push(LayerSpec::pointwise(&format!("{tag}.sep_pointwise"), f, f, cfg.use_bias));
    layers.push(LayerSpec::batch_norm(&format!("{tag}.sep_bn"), f));
    layers.push(LayerSpec::simple(&format!("{tag}.sep_elu"), Op::Elu));
}

fn push_mixer_module<T: Scalar>(layers: &mut Vec<LayerSpec<T>>, tag: &str, cin: usize, f: usize, cfg: &ArchConfig) {
    let k = cfg.kernel_size;
    layers.push(LayerSpec::simple(&format!("{tag}.residual_begin"), Op::ResidualBegin));
    layers.push(LayerSpec::depthwise(&format!("{tag}.depthwise"), k, cin, cfg.use_bias));
    layers.push(LayerSpec::simple(&format!("{tag}.depthwise_gelu"), Op::Gelu(cfg.gelu)));
    layers.push(LayerSpec::batch_norm(&format!("{tag}.depthwise_bn"), cin));
    layers.push(LayerSpec::simple(&format!("{tag}.residual_end"), Op::ResidualEnd));
    layers.push(LayerSpec::pointwise(&format!("{tag}.pointwise"), cin, f, cfg.use_bias));
    layers.push(LayerSpec::simple(&format!("{tag}.pointwise_gelu"), Op::Gelu(cfg.gelu)));
    layers.push(LayerSpec::batch_norm(&format!("{tag}.pointwise_bn"), f));
}

impl<T: Scalar> ModelGraph<T> {
    /// Builds the topology with zero weights and identity batch norms; call
    /// [`ModelGraph::init_weights`] before training.
    pub fn build(config: ArchConfig) -> Result<Self> {
        config.validate()?;
        let (f1, f2) = config.filters;
        let cin = config.input_shape[2];
        let mut layers = Vec::new();
        match config.arch {
            Arch::ConvSep => {
                push_conv_sep_module(&mut layers, "block1", cin, f1, &config);
            }
            Arch::ConvMixer => {
                let p = config.patch_size;
                layers.push(LayerSpec::patch_embedding("patch.conv", p, cin, f1, config.use_bias));
                layers.push(LayerSpec::simple("patch.gelu", Op::Gelu(config.gelu)));
                if config.patch_bn {
                    layers.push(LayerSpec::batch_norm("patch.bn", f1));
                }
                push_mixer_module(&mut layers, "mixer1", f1, f1, &config);
            }
        }
        layers.push(LayerSpec::simple("pool1", Op::MaxPool { pool: FIRST_POOL }));
        layers.push(LayerSpec::simple("dropout1", Op::Dropout { rate: config.dropout }));
        match config.arch {
            Arch::ConvSep => push_conv_sep_module(&mut layers, "block2", f1, f2, &config),
            Arch::ConvMixer => push_mixer_module(&mut layers, "mixer2", f1, f2, &config),
        }
        layers.push(LayerSpec::simple("pool2", Op::MaxPool { pool: SECOND_POOL }));
        layers.push(LayerSpec::simple("dropout2", Op::Dropout { rate: config.dropout }));
        layers.push(LayerSpec::simple("gap", Op::GlobalAvgPool));
        layers.push(LayerSpec::dense("dense", f2, config.n_classes, true));
        let model = Self {
            config,
            net: Sequential::new(layers),
        };
        model.validate()?;
        Ok(model)
    }

    /// Shape inference end to end; the last layer must emit `n_classes` logits.
    pub fn validate(&self) -> Result<()> {
        let shapes = self.trace_shapes()?;
        match shapes.last() {
            Some(s) if s.as_slice() == [self.config.n_classes] => Ok(()),
            other => Err(Error::Config(format!(
                "graph ends in {other:?}, expected {} logits",
                self.config.n_classes
            ))),
        }
    }

    pub fn trace_shapes(&self) -> Result<Vec<Vec<usize>>> {
        self.net.trace_shapes(&self.config.input_shape)
    }

    pub fn layers(&self) -> &[LayerSpec<T>] {
        &self.net.layers
    }

    pub fn arch(&self) -> Arch {
        self.config.arch
    }

    pub fn param_count(&self) -> usize {
        self.net.param_count()
    }

    /// Glorot-uniform kernels, zero biases, identity batch norms.
    pub fn init_weights(&mut self, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for layer in &mut self.net.layers {
            let fans = match &layer.op {
                Op::Conv2d { weight, .. } => {
                    let s = weight.shape();
                    let rf = s[0] * s[1];
                    Some((rf * s[2], rf * s[3]))
                }
                Op::DepthwiseConv2d { weight, .. } => {
                    let s = weight.shape();
                    let rf = s[0] * s[1];
                    Some((rf * s[2], rf))
                }
                Op::PointwiseConv2d { weight, .. } | Op::Dense { weight, .. } => {
                    Some((weight.shape()[0], weight.shape()[1]))
                }
                _ => None,
            };
            match &mut layer.op {
                Op::BatchNorm(bn) => {
                    *bn = crate::nn::BatchNormParams {
                        eps: bn.eps,
                        momentum: bn.momentum,
                        ..crate::nn::BatchNormParams::identity(bn.channels())
                    }
                }
                Op::Conv2d { weight, bias, .. }
                | Op::DepthwiseConv2d { weight, bias }
                | Op::PointwiseConv2d { weight, bias }
                | Op::Dense { weight, bias } => {
                    let (fan_in, fan_out) = fans.unwrap();
                    let limit = glorot_limit(fan_in, fan_out);
                    for w in weight.data_mut() {
                        *w = T::from_f64c(rng.random_range(-limit..limit));
                    }
                    if let Some(b) = bias {
                        b.data_mut().iter_mut().for_each(|v| *v = T::zero());
                    }
                }
                _ => {}
            }
        }
    }

    /// Converts spectrograms to an `N×H×W×1` batch, checking each shape.
    pub fn batch_input(&self, inputs: &[&Spectrogram]) -> Result<Tensor<T>> {
        let [h, w, c] = self.config.input_shape;
        let mut data = Vec::with_capacity(inputs.len() * h * w * c);
        for s in inputs {
            if [s.n_mels, s.n_frames, 1] != [h, w, c] {
                return Err(Error::InputShape {
                    expected: vec![h, w, c],
                    actual: vec![s.n_mels, s.n_frames, 1],
                });
            }
            data.extend(s.data.iter().map(|&v| T::from_f64c(f64::from(v))));
        }
        Tensor::new(vec![inputs.len(), h, w, c], data)
    }

    /// Inference-mode logits for a batch (`N×n_classes`).
    pub fn logits(&self, inputs: &[&Spectrogram]) -> Result<Tensor<T>> {
        if inputs.is_empty() {
            return Err(Error::EmptyInput);
        }
        self.net.infer(&self.batch_input(inputs)?)
    }

    pub fn predict_batch(&self, inputs: &[&Spectrogram]) -> Result<Vec<Prediction>> {
        let logits = self.logits(inputs)?;
        let k = self.config.n_classes;
        Ok(logits
            .data()
            .chunks(k)
            .map(|row| Prediction::from_logits(row.iter().map(|v| v.to_f64c() as f32).collect()))
            .collect())
    }

    /// Deterministic single-example inference (dropout off, batch norm on
    /// moving statistics).
    pub fn forward(&self, s: &Spectrogram) -> Result<Prediction> {
        Ok(self.predict_batch(&[s])?.remove(0))
    }
}

pub fn glorot_limit(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

pub fn build_conv_sep(f1: usize, f2: usize, kernel_size: usize) -> Result<ModelGraph> {
    ModelGraph::build(ArchConfig::conv_sep(f1, f2, kernel_size))
}

pub fn build_conv_mixer(f1: usize, f2: usize, kernel_size: usize, patch_size: usize) -> Result<ModelGraph> {
    ModelGraph::build(ArchConfig::conv_mixer(f1, f2, kernel_size, patch_size))
}
