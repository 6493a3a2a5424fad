//! Post-training 8-bit quantization.
//!
//! Weights are quantized per tensor and symmetrically (`zero_point = 0`,
//! codes in `[−127, 127]`); activations per tensor and affinely from
//! min/max calibration. Batch norms that directly follow a convolution,
//! pointwise or dense layer are folded into it first.
//!
//! Convolutions and dense layers run on integers: `(q_x − zp_x) · q_w`
//! accumulated in `i32` together with an `i32` bias at scale `s_x · s_w`,
//! then requantized to the layer's output parameters with a single float
//! multiplier. Every other layer (activations, unfolded batch norms,
//! pooling, residual additions) dequantizes, runs in float and requantizes
//! to its calibrated output range.

use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::frontend::Spectrogram;
use crate::model::io::{
    layer_from_parts, read_header, read_layer_meta, write_header, write_layer_meta, ByteReader, ByteWriter,
    PAYLOAD_INT8,
};
use crate::model::{ArchConfig, ModelGraph, Prediction};
use crate::nn::{BatchNormParams, ConvGeometry, LayerKind, LayerSpec, Op, Sequential};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Scheme {
    SymmetricWeight,
    AffineActivation,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuantParams {
    pub scale: f32,
    pub zero_point: i32,
    pub scheme: Scheme,
}

impl QuantParams {
    pub fn symmetric(max_abs: f32) -> Self {
        let scale = if max_abs > 0.0 { max_abs / 127.0 } else { 1.0 };
        Self {
            scale,
            zero_point: 0,
            scheme: Scheme::SymmetricWeight,
        }
    }

    /// Affine parameters for `[min, max]`, widened to contain 0 so that real
    /// zero is exactly representable. A degenerate range gets scale 1.
    pub fn affine(min: f32, max: f32) -> Self {
        let (lo, hi) = (f64::from(min.min(0.0)), f64::from(max.max(0.0)));
        let mut scale = ((hi - lo) / 255.0) as f32;
        if !(scale > 0.0) || !scale.is_finite() {
            scale = 1.0;
        }
        let zero_point = (-128.0 - lo / f64::from(scale)).round().clamp(-128.0, 127.0) as i32;
        Self {
            scale,
            zero_point,
            scheme: Scheme::AffineActivation,
        }
    }

    fn range(&self) -> (i32, i32) {
        match self.scheme {
            Scheme::SymmetricWeight => (-127, 127),
            Scheme::AffineActivation => (-128, 127),
        }
    }

    #[inline]
    pub fn quantize(&self, x: f32) -> i8 {
        let (lo, hi) = self.range();
        let q = (f64::from(x) / f64::from(self.scale)).round() + f64::from(self.zero_point);
        q.clamp(f64::from(lo), f64::from(hi)) as i8
    }

    #[inline]
    pub fn dequantize(&self, q: i8) -> f32 {
        ((i32::from(q) - self.zero_point) as f64 * f64::from(self.scale)) as f32
    }
}

/// Quantizes a finite tensor. Symmetric parameters come from `max|t|`,
/// affine ones from its min/max.
pub fn quantize_tensor(t: &Tensor, scheme: Scheme) -> Result<(Vec<i8>, QuantParams)> {
    if !t.is_finite() {
        return Err(Error::NonFinite("tensor to quantize".into()));
    }
    let params = match scheme {
        Scheme::SymmetricWeight => QuantParams::symmetric(t.max_abs()),
        Scheme::AffineActivation => {
            let (lo, hi) = t.min_max().unwrap_or((0.0, 0.0));
            QuantParams::affine(lo, hi)
        }
    };
    Ok((t.data().iter().map(|&v| params.quantize(v)).collect(), params))
}

pub fn dequantize(q: &[i8], params: &QuantParams) -> Vec<f32> {
    q.iter().map(|&v| params.dequantize(v)).collect()
}

fn is_foldable(kind: LayerKind) -> bool {
    matches!(
        kind,
        LayerKind::Conv2d | LayerKind::DepthwiseConv2d | LayerKind::PointwiseConv2d | LayerKind::Dense
    )
}

/// Folds `x·a + b` per output channel into a layer's weight and bias.
fn fold_into(op: &mut Op<f32>, bn: &BatchNormParams<f32>) -> Result<()> {
    let (scale, shift) = bn.folded()?;
    let c = scale.len();
    let (weight, bias) = match op {
        Op::Conv2d { weight, bias, .. }
        | Op::DepthwiseConv2d { weight, bias }
        | Op::PointwiseConv2d { weight, bias }
        | Op::Dense { weight, bias } => (weight, bias),
        _ => return Err(Error::Config("batch norm does not follow a foldable layer".into())),
    };
    if weight.shape().last() != Some(&c) {
        return Err(Error::shape(0, "batch norm channels differ from the preceding layer"));
    }
    for (i, w) in weight.data_mut().iter_mut().enumerate() {
        *w *= scale[i % c];
    }
    let b = bias.get_or_insert_with(|| Tensor::zeros(vec![c]));
    for ((b, &s), &t) in b.data_mut().iter_mut().zip(&scale).zip(&shift) {
        *b = *b * s + t;
    }
    Ok(())
}

/// Merges every batch norm that directly follows a conv-family or dense
/// layer into that layer. Batch norms after an activation stay in place.
pub fn fold_batch_norm(model: &ModelGraph) -> Result<ModelGraph> {
    let mut layers: Vec<LayerSpec> = Vec::with_capacity(model.layers().len());
    for layer in model.layers() {
        if let Op::BatchNorm(bn) = &layer.op {
            if let Some(prev) = layers.last_mut().filter(|p| is_foldable(p.kind())) {
                fold_into(&mut prev.op, bn)?;
                continue;
            }
        }
        layers.push(layer.clone());
    }
    let folded = ModelGraph {
        config: model.config.clone(),
        net: Sequential::new(layers),
    };
    folded.validate()?;
    Ok(folded)
}

/// Per-activation min/max observed in float inference.
#[derive(Debug, Clone, PartialEq)]
pub struct Calibration {
    pub input: (f32, f32),
    pub layers: Vec<(f32, f32)>,
    pub n_inputs: usize,
}

impl Calibration {
    pub fn params(&self) -> (QuantParams, Vec<QuantParams>) {
        (
            QuantParams::affine(self.input.0, self.input.1),
            self.layers.iter().map(|&(lo, hi)| QuantParams::affine(lo, hi)).collect(),
        )
    }
}

fn widen(range: &mut (f32, f32), t: &Tensor) {
    if let Some((lo, hi)) = t.min_max() {
        range.0 = range.0.min(lo);
        range.1 = range.1.max(hi);
    }
}

/// Runs `model` (normally already folded) over the calibration inputs and
/// records each layer's output range.
pub fn calibrate(model: &ModelGraph, inputs: &[&Spectrogram]) -> Result<Calibration> {
    if inputs.is_empty() {
        return Err(Error::EmptyInput);
    }
    let empty = (f32::INFINITY, f32::NEG_INFINITY);
    let mut cal = Calibration {
        input: empty,
        layers: vec![empty; model.layers().len()],
        n_inputs: 0,
    };
    for chunk in inputs.chunks(64) {
        let x = model.batch_input(chunk)?;
        widen(&mut cal.input, &x);
        model.net.infer_observed(&x, |i, t| widen(&mut cal.layers[i], t))?;
        cal.n_inputs += chunk.len();
    }
    Ok(cal)
}

#[derive(Debug, Clone, PartialEq)]
pub struct IntWeights {
    pub weight: Vec<i8>,
    pub shape: Vec<usize>,
    pub params: QuantParams,
    /// At scale `s_in · s_w`.
    pub bias: Option<Vec<i32>>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum QKernel {
    Conv2d(ConvGeometry),
    Depthwise,
    Pointwise,
    Dense,
}

#[derive(Debug, Clone, PartialEq)]
pub enum QLayerOp {
    Int { kernel: QKernel, weights: IntWeights },
    Float(LayerSpec<f32>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct QLayer {
    pub name: String,
    pub op: QLayerOp,
    pub output: Option<QuantParams>,
}

impl QLayer {
    pub fn kind(&self) -> LayerKind {
        match &self.op {
            QLayerOp::Int { kernel, .. } => match kernel {
                QKernel::Conv2d(_) => LayerKind::Conv2d,
                QKernel::Depthwise => LayerKind::DepthwiseConv2d,
                QKernel::Pointwise => LayerKind::PointwiseConv2d,
                QKernel::Dense => LayerKind::Dense,
            },
            QLayerOp::Float(l) => l.kind(),
        }
    }

    /// Stored values: int8 weights, i32 biases and float tensors of layers
    /// kept in float.
    pub fn param_count(&self) -> usize {
        match &self.op {
            QLayerOp::Int { weights, .. } => weights.weight.len() + weights.bias.as_ref().map_or(0, Vec::len),
            QLayerOp::Float(l) => l.tensors().iter().map(|t| t.len()).sum(),
        }
    }

    /// Float layer carrying this layer's hyperparameters with empty
    /// weights, for the shared file encoding.
    fn template(&self) -> LayerSpec<f32> {
        match &self.op {
            QLayerOp::Float(l) => l.clone(),
            QLayerOp::Int { kernel, weights } => {
                let weight = Tensor::zeros(vec![0]);
                let bias = weights.bias.as_ref().map(|_| Tensor::zeros(vec![0]));
                let op = match kernel {
                    QKernel::Conv2d(geometry) => Op::Conv2d {
                        geometry: *geometry,
                        weight,
                        bias,
                    },
                    QKernel::Depthwise => Op::DepthwiseConv2d { weight, bias },
                    QKernel::Pointwise => Op::PointwiseConv2d { weight, bias },
                    QKernel::Dense => Op::Dense { weight, bias },
                };
                LayerSpec::new(self.name.clone(), op)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedModel {
    pub config: ArchConfig,
    pub input: Option<QuantParams>,
    pub layers: Vec<QLayer>,
}

impl QuantizedModel {
    /// Quantizes the weights of an already folded model using the given
    /// activation calibration.
    pub fn from_folded(model: &ModelGraph, cal: &Calibration) -> Result<Self> {
        if cal.layers.len() != model.layers().len() {
            return Err(Error::MissingCalibration(format!(
                "{} layers calibrated, model has {}",
                cal.layers.len(),
                model.layers().len()
            )));
        }
        let (input, outputs) = cal.params();
        let mut layers = Vec::with_capacity(outputs.len());
        let mut in_params = input;
        for (layer, out) in model.layers().iter().zip(outputs) {
            let kernel = match &layer.op {
                Op::Conv2d { geometry, .. } => Some(QKernel::Conv2d(*geometry)),
                Op::DepthwiseConv2d { .. } => Some(QKernel::Depthwise),
                Op::PointwiseConv2d { .. } => Some(QKernel::Pointwise),
                Op::Dense { .. } => Some(QKernel::Dense),
                _ => None,
            };
            let op = match kernel {
                Some(kernel) => {
                    let params = layer.params();
                    let (weight, params_w) = quantize_tensor(params[0], Scheme::SymmetricWeight)?;
                    let bias_scale = f64::from(in_params.scale) * f64::from(params_w.scale);
                    let bias = params.get(1).map(|b| {
                        b.data()
                            .iter()
                            .map(|&v| (f64::from(v) / bias_scale).round().clamp(i32::MIN as f64, i32::MAX as f64) as i32)
                            .collect()
                    });
                    QLayerOp::Int {
                        kernel,
                        weights: IntWeights {
                            weight,
                            shape: params[0].shape().to_vec(),
                            params: params_w,
                            bias,
                        },
                    }
                }
                None => QLayerOp::Float(layer.clone()),
            };
            layers.push(QLayer {
                name: layer.name.clone(),
                op,
                output: Some(out),
            });
            in_params = out;
        }
        Ok(Self {
            config: model.config.clone(),
            input: Some(input),
            layers,
        })
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(QLayer::param_count).sum()
    }
}

/// Folds batch norms, calibrates on `calibration` and quantizes.
pub fn quantize_model(model: &ModelGraph, calibration: &[&Spectrogram]) -> Result<QuantizedModel> {
    let folded = fold_batch_norm(model)?;
    let cal = calibrate(&folded, calibration)?;
    QuantizedModel::from_folded(&folded, &cal)
}

/// An int8 activation tensor (`H×W×C` or `C`).
#[derive(Debug, Clone, PartialEq)]
struct QTensor {
    shape: Vec<usize>,
    data: Vec<i8>,
    params: QuantParams,
}

impl QTensor {
    fn quantize(t: &Tensor, params: QuantParams) -> Self {
        Self {
            shape: t.shape().to_vec(),
            data: t.data().iter().map(|&v| params.quantize(v)).collect(),
            params,
        }
    }

    fn dequantize(&self) -> Tensor {
        Tensor::new(self.shape.clone(), dequantize(&self.data, &self.params)).unwrap()
    }

    fn centered(&self) -> Vec<i32> {
        self.data.iter().map(|&q| i32::from(q) - self.params.zero_point).collect()
    }
}

fn requantize(acc: &[i32], multiplier: f32, out: &QuantParams) -> Vec<i8> {
    acc.iter()
        .map(|&a| {
            let v = (a as f32 * multiplier).round() as i32 + out.zero_point;
            v.clamp(-128, 127) as i8
        })
        .collect()
}

/// Integer convolution of a centered `H×W×Cin` input with `Kh×Kw×Cin×Cout`
/// weights; zero padding is exact because real 0 maps to a centered 0.
fn conv_i32(x: &[i32], shape: &[usize], w: &IntWeights, geom: ConvGeometry) -> Result<(Vec<i32>, Vec<usize>)> {
    let [h, wd, cin] = *shape else {
        return Err(Error::shape(0, "integer conv expects H×W×C"));
    };
    let [kh, kw, wcin, cout] = *w.shape.as_slice() else {
        return Err(Error::shape(0, "integer conv weight rank"));
    };
    if wcin != cin {
        return Err(Error::shape(0, "integer conv channel mismatch"));
    }
    let (oh, ow, pt, pl) = geom.output(h, wd)?;
    let mut acc = vec![0i32; oh * ow * cout];
    for oy in 0..oh {
        for ox in 0..ow {
            let out = &mut acc[(oy * ow + ox) * cout..][..cout];
            if let Some(b) = &w.bias {
                out.copy_from_slice(b);
            }
            for ky in 0..kh {
                let iy = (oy * geom.stride + ky) as isize - pt as isize;
                if iy < 0 || iy as usize >= h {
                    continue;
                }
                for kx in 0..kw {
                    let ix = (ox * geom.stride + kx) as isize - pl as isize;
                    if ix < 0 || ix as usize >= wd {
                        continue;
                    }
                    let px = &x[(iy as usize * wd + ix as usize) * cin..][..cin];
                    let taps = &w.weight[(ky * kw + kx) * cin * cout..][..cin * cout];
                    for (ci, &xv) in px.iter().enumerate() {
                        if xv == 0 {
                            continue;
                        }
                        for (o, &wv) in out.iter_mut().zip(&taps[ci * cout..(ci + 1) * cout]) {
                            *o += xv * i32::from(wv);
                        }
                    }
                }
            }
        }
    }
    Ok((acc, vec![oh, ow, cout]))
}

fn depthwise_i32(x: &[i32], shape: &[usize], w: &IntWeights) -> Result<(Vec<i32>, Vec<usize>)> {
    let [h, wd, c] = *shape else {
        return Err(Error::shape(0, "integer depthwise expects H×W×C"));
    };
    let [kh, kw, wc] = *w.shape.as_slice() else {
        return Err(Error::shape(0, "integer depthwise weight rank"));
    };
    if wc != c {
        return Err(Error::shape(0, "integer depthwise channel mismatch"));
    }
    let (oh, ow, pt, pl) = ConvGeometry::same(kh, kw).output(h, wd)?;
    let mut acc = vec![0i32; oh * ow * c];
    for oy in 0..oh {
        for ox in 0..ow {
            let out = &mut acc[(oy * ow + ox) * c..][..c];
            if let Some(b) = &w.bias {
                out.copy_from_slice(b);
            }
            for ky in 0..kh {
                let iy = (oy + ky) as isize - pt as isize;
                if iy < 0 || iy as usize >= h {
                    continue;
                }
                for kx in 0..kw {
                    let ix = (ox + kx) as isize - pl as isize;
                    if ix < 0 || ix as usize >= wd {
                        continue;
                    }
                    let px = &x[(iy as usize * wd + ix as usize) * c..][..c];
                    let taps = &w.weight[(ky * kw + kx) * c..][..c];
                    for ((o, &xv), &wv) in out.iter_mut().zip(px).zip(taps) {
                        *o += xv * i32::from(wv);
                    }
                }
            }
        }
    }
    Ok((acc, vec![oh, ow, c]))
}

fn matmul_i32(x: &[i32], shape: &[usize], w: &IntWeights) -> Result<(Vec<i32>, Vec<usize>)> {
    let [cin, cout] = *w.shape.as_slice() else {
        return Err(Error::shape(0, "integer matmul weight rank"));
    };
    if shape.last() != Some(&cin) {
        return Err(Error::shape(0, "integer matmul inner dimension"));
    }
    let rows = x.len() / cin;
    let mut acc = vec![0i32; rows * cout];
    for r in 0..rows {
        let out = &mut acc[r * cout..][..cout];
        if let Some(b) = &w.bias {
            out.copy_from_slice(b);
        }
        for (i, &xv) in x[r * cin..][..cin].iter().enumerate() {
            for (o, &wv) in out.iter_mut().zip(&w.weight[i * cout..][..cout]) {
                *o += xv * i32::from(wv);
            }
        }
    }
    let mut out_shape = shape.to_vec();
    *out_shape.last_mut().unwrap() = cout;
    Ok((acc, out_shape))
}

fn missing(name: &str) -> Error {
    Error::MissingCalibration(name.to_string())
}

/// Runs one example (`H×W×C`, float) through the quantized network and
/// returns the dequantized logits.
fn run_example(qm: &QuantizedModel, x: &Tensor) -> Result<Vec<f32>> {
    let input = qm.input.ok_or_else(|| missing("input"))?;
    let mut cur = QTensor::quantize(x, input);
    let mut skips: Vec<QTensor> = Vec::new();
    for (i, layer) in qm.layers.iter().enumerate() {
        let out = layer.output.ok_or_else(|| missing(&layer.name))?;
        cur = match &layer.op {
            QLayerOp::Int { kernel, weights } => {
                let centered = cur.centered();
                let (acc, shape) = match kernel {
                    QKernel::Conv2d(g) => conv_i32(&centered, &cur.shape, weights, *g),
                    QKernel::Depthwise => depthwise_i32(&centered, &cur.shape, weights),
                    QKernel::Pointwise | QKernel::Dense => matmul_i32(&centered, &cur.shape, weights),
                }
                .map_err(|e| e.at_layer(i))?;
                let multiplier = cur.params.scale * weights.params.scale / out.scale;
                QTensor {
                    shape,
                    data: requantize(&acc, multiplier, &out),
                    params: out,
                }
            }
            QLayerOp::Float(spec) => match spec.kind() {
                LayerKind::ResidualBegin => {
                    skips.push(cur.clone());
                    QTensor::quantize(&cur.dequantize(), out)
                }
                LayerKind::ResidualEnd => {
                    let skip = skips.pop().ok_or_else(|| Error::shape(i, "residual end without begin"))?;
                    QTensor::quantize(&cur.dequantize().add(&skip.dequantize()), out)
                }
                LayerKind::Dropout => cur,
                _ => {
                    let mut shape = vec![1];
                    shape.extend(&cur.shape);
                    let y = spec.infer(&cur.dequantize().reshape(shape)?).map_err(|e| e.at_layer(i))?;
                    let per_example = y.shape()[1..].to_vec();
                    QTensor::quantize(&y.reshape(per_example)?, out)
                }
            },
        };
    }
    Ok(cur.dequantize().into_data())
}

fn example_tensor(qm: &QuantizedModel, s: &Spectrogram) -> Result<Tensor> {
    let [h, w, c] = qm.config.input_shape;
    if [s.n_mels, s.n_frames, 1] != [h, w, c] {
        return Err(Error::InputShape {
            expected: vec![h, w, c],
            actual: vec![s.n_mels, s.n_frames, 1],
        });
    }
    Tensor::new(vec![h, w, c], s.data.clone())
}

pub fn quantized_forward(qm: &QuantizedModel, s: &Spectrogram) -> Result<Prediction> {
    Ok(Prediction::from_logits(run_example(qm, &example_tensor(qm, s)?)?))
}

/// Independent examples evaluated in parallel; order follows `inputs`.
pub fn quantized_predict_batch(qm: &QuantizedModel, inputs: &[&Spectrogram]) -> Result<Vec<Prediction>> {
    inputs.par_iter().map(|s| quantized_forward(qm, s)).collect()
}

/// Paired float/int8 execution over the same inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct AgreementReport {
    pub n: usize,
    pub agree: usize,
    pub max_abs_logit_diff: f64,
    pub mean_abs_logit_diff: f64,
    pub float_params: usize,
    pub quantized_params: usize,
}

impl AgreementReport {
    pub fn agreement(&self) -> f64 {
        self.agree as f64 / self.n as f64
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "inputs={}", self.n);
        let _ = writeln!(out, "top1_agree={}", self.agree);
        let _ = writeln!(out, "top1_agreement={:.6}", self.agreement());
        let _ = writeln!(out, "max_abs_logit_diff={:.6e}", self.max_abs_logit_diff);
        let _ = writeln!(out, "mean_abs_logit_diff={:.6e}", self.mean_abs_logit_diff);
        let _ = writeln!(out, "float_params={}", self.float_params);
        let _ = writeln!(out, "quantized_params={}", self.quantized_params);
        out
    }
}

pub fn agreement(model: &ModelGraph, qm: &QuantizedModel, inputs: &[&Spectrogram]) -> Result<AgreementReport> {
    if inputs.is_empty() {
        return Err(Error::EmptyInput);
    }
    let mut float = Vec::with_capacity(inputs.len());
    for chunk in inputs.chunks(64) {
        float.extend(model.predict_batch(chunk)?);
    }
    let quant = quantized_predict_batch(qm, inputs)?;
    let mut agree = 0;
    let mut max_diff = 0.0f64;
    let mut sum_diff = 0.0f64;
    let mut count = 0usize;
    for (f, q) in float.iter().zip(&quant) {
        agree += usize::from(f.top_class == q.top_class);
        for (a, b) in f.logits.iter().zip(&q.logits) {
            let d = f64::from(a - b).abs();
            max_diff = max_diff.max(d);
            sum_diff += d;
            count += 1;
        }
    }
    Ok(AgreementReport {
        n: inputs.len(),
        agree,
        max_abs_logit_diff: max_diff,
        mean_abs_logit_diff: sum_diff / count as f64,
        float_params: model.param_count(),
        quantized_params: qm.param_count(),
    })
}

fn write_params(w: &mut ByteWriter, p: Option<QuantParams>) {
    match p {
        None => w.u8(0),
        Some(p) => {
            w.u8(match p.scheme {
                Scheme::SymmetricWeight => 1,
                Scheme::AffineActivation => 2,
            });
            w.f32(p.scale);
            w.i32(p.zero_point);
        }
    }
}

fn read_params(r: &mut ByteReader) -> Result<Option<QuantParams>> {
    let scheme = match r.u8()? {
        0 => return Ok(None),
        1 => Scheme::SymmetricWeight,
        2 => Scheme::AffineActivation,
        s => return Err(Error::Format(format!("unknown quantization scheme {s}"))),
    };
    let scale = r.f32()?;
    let zero_point = r.i32()?;
    if !(scale > 0.0) || !(-128..=127).contains(&zero_point) {
        return Err(Error::Format("invalid quantization parameters".into()));
    }
    Ok(Some(QuantParams {
        scale,
        zero_point,
        scheme,
    }))
}

/// Model header with the int8 payload flag, the input parameters, then per
/// layer: metadata, output parameters and either
/// `weight params, shape, i8 blob, u8 has_bias, i32 bias…` (integer
/// layers) or float tensors (layers kept in float).
pub fn write_quantized(qm: &QuantizedModel) -> Vec<u8> {
    let mut w = ByteWriter::default();
    write_header(&mut w, &qm.config, PAYLOAD_INT8, qm.layers.len());
    write_params(&mut w, qm.input);
    for layer in &qm.layers {
        let template = layer.template();
        write_layer_meta(&mut w, &template);
        write_params(&mut w, layer.output);
        match &layer.op {
            QLayerOp::Int { weights, .. } => {
                write_params(&mut w, Some(weights.params));
                w.shape(&weights.shape);
                w.buf.extend(weights.weight.iter().map(|&q| q as u8));
                if let Some(b) = &weights.bias {
                    b.iter().for_each(|&v| w.i32(v));
                }
            }
            QLayerOp::Float(l) => l.tensors().into_iter().for_each(|t| w.tensor(t)),
        }
    }
    w.buf
}

pub fn read_quantized(bytes: &[u8]) -> Result<QuantizedModel> {
    let mut r = ByteReader::new(bytes);
    let (config, payload, n_layers) = read_header(&mut r)?;
    if payload != PAYLOAD_INT8 {
        return Err(Error::Format("file holds a float model".into()));
    }
    let input = read_params(&mut r)?;
    let mut layers = Vec::with_capacity(n_layers.min(1024));
    for _ in 0..n_layers {
        let meta = read_layer_meta(&mut r)?;
        let output = read_params(&mut r)?;
        let name = meta.name.clone();
        let op = if is_foldable(meta.kind) {
            let params = read_params(&mut r)?.ok_or_else(|| Error::Format(format!("layer {name} lacks weight scale")))?;
            let shape = r.shape()?;
            let n: usize = shape.iter().product();
            let weight = r.take(n)?.iter().map(|&b| b as i8).collect();
            let bias = if meta.has_bias {
                let c = *shape.last().unwrap_or(&0);
                Some((0..c).map(|_| r.i32()).collect::<Result<_>>()?)
            } else {
                None
            };
            let kernel = match meta.kind {
                LayerKind::Conv2d => QKernel::Conv2d(meta.geometry.unwrap()),
                LayerKind::DepthwiseConv2d => QKernel::Depthwise,
                LayerKind::PointwiseConv2d => QKernel::Pointwise,
                _ => QKernel::Dense,
            };
            QLayerOp::Int {
                kernel,
                weights: IntWeights {
                    weight,
                    shape,
                    params,
                    bias,
                },
            }
        } else {
            let tensors = (0..meta.n_tensors()).map(|_| r.tensor()).collect::<Result<Vec<_>>>()?;
            QLayerOp::Float(layer_from_parts(meta, tensors)?)
        };
        layers.push(QLayer { name, op, output });
    }
    r.finish()?;
    Ok(QuantizedModel { config, input, layers })
}

pub fn save_quantized(qm: &QuantizedModel, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, write_quantized(qm))?;
    Ok(())
}

pub fn load_quantized(path: impl AsRef<Path>) -> Result<QuantizedModel> {
    read_quantized(&std::fs::read(path)?)
}
