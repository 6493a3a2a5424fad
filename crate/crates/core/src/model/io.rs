//! Little-endian binary checkpoint format.
//!
//! ```text
//! "TASC"  u16 version  u8 payload (0 float32, 1 int8)
//! u8 arch  u32 f1  u32 f2  u32 kernel  u32 patch
//! u8 flags (bit0 bias, bit1 patch bn, bit2 erf gelu)  f64 dropout
//! u32 H  u32 W  u32 C  u32 n_classes  u32 n_layers
//! per layer: u8 kind  u16 name_len  name  hyperparameters  payload
//! ```
//!
//! In a float file the layer payload is the layer's tensors in
//! [`LayerSpec::tensors`] order, each as `u8 rank, u32 dims…, f32 data…`.

use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{Arch, ArchConfig, ModelGraph};
use crate::nn::{BatchNormParams, ConvGeometry, GeluMode, LayerKind, LayerSpec, Op, Padding, Sequential};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"TASC";
pub const VERSION: u16 = 1;
pub(crate) const PAYLOAD_FLOAT: u8 = 0;
pub(crate) const PAYLOAD_INT8: u8 = 1;

#[derive(Debug, Default)]
pub(crate) struct ByteWriter {
    pub buf: Vec<u8>,
}

impl ByteWriter {
    pub fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }
    pub fn u16(&mut self, v: u16) {
        self.buf.extend(v.to_le_bytes());
    }
    pub fn u32(&mut self, v: u32) {
        self.buf.extend(v.to_le_bytes());
    }
    pub fn i32(&mut self, v: i32) {
        self.buf.extend(v.to_le_bytes());
    }
    pub fn f32(&mut self, v: f32) {
        self.buf.extend(v.to_le_bytes());
    }
    pub fn f64(&mut self, v: f64) {
        self.buf.extend(v.to_le_bytes());
    }
    pub fn usize(&mut self, v: usize) {
        self.u32(u32::try_from(v).expect("dimension exceeds u32"));
    }
    pub fn str(&mut self, s: &str) {
        self.u16(u16::try_from(s.len()).expect("name too long"));
        self.buf.extend(s.as_bytes());
    }
    pub fn shape(&mut self, shape: &[usize]) {
        self.u8(shape.len() as u8);
        shape.iter().for_each(|&d| self.usize(d));
    }
    pub fn tensor(&mut self, t: &Tensor) {
        self.shape(t.shape());
        t.data().iter().for_each(|&v| self.f32(v));
    }
}

pub(crate) struct ByteReader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Format(format!("truncated at byte {}", self.pos)))?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().unwrap())
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    pub fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.array()?))
    }
    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }
    pub fn i32(&mut self) -> Result<i32> {
        Ok(i32::from_le_bytes(self.array()?))
    }
    pub fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.array()?))
    }
    pub fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.array()?))
    }
    pub fn usize(&mut self) -> Result<usize> {
        Ok(self.u32()? as usize)
    }
    pub fn str(&mut self) -> Result<String> {
        let n = usize::from(self.u16()?);
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Format("layer name is not UTF-8".into()))
    }
    pub fn shape(&mut self) -> Result<Vec<usize>> {
        let rank = self.u8()?;
        (0..rank).map(|_| self.usize()).collect()
    }
    pub fn tensor(&mut self) -> Result<Tensor> {
        let shape = self.shape()?;
        let len: usize = shape.iter().product();
        if len.saturating_mul(4) > self.buf.len() - self.pos {
            return Err(Error::Format(format!("tensor {shape:?} overruns the file")));
        }
        let data = (0..len).map(|_| self.f32()).collect::<Result<Vec<_>>>()?;
        Tensor::new(shape, data)
    }

    pub fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::Format(format!(
                "{} trailing bytes",
                self.buf.len() - self.pos
            )));
        }
        Ok(())
    }
}

pub(crate) fn write_header(w: &mut ByteWriter, cfg: &ArchConfig, payload: u8, n_layers: usize) {
    w.buf.extend(MAGIC);
    w.u16(VERSION);
    w.u8(payload);
    w.u8(match cfg.arch {
        Arch::ConvSep => 0,
        Arch::ConvMixer => 1,
    });
    w.usize(cfg.filters.0);
    w.usize(cfg.filters.1);
    w.usize(cfg.kernel_size);
    w.usize(cfg.patch_size);
    let flags = u8::from(cfg.use_bias) | u8::from(cfg.patch_bn) << 1 | u8::from(cfg.gelu == GeluMode::Erf) << 2;
    w.u8(flags);
    w.f64(cfg.dropout);
    cfg.input_shape.iter().for_each(|&d| w.usize(d));
    w.usize(cfg.n_classes);
    w.usize(n_layers);
}

/// Returns the configuration, payload kind and layer count.
pub(crate) fn read_header(r: &mut ByteReader) -> Result<(ArchConfig, u8, usize)> {
    if r.take(4)? != MAGIC {
        return Err(Error::Format("bad magic".into()));
    }
    let version = r.u16()?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let payload = r.u8()?;
    if payload > PAYLOAD_INT8 {
        return Err(Error::Format(format!("unknown payload kind {payload}")));
    }
    let arch = match r.u8()? {
        0 => Arch::ConvSep,
        1 => Arch::ConvMixer,
        a => return Err(Error::Format(format!("unknown architecture code {a}"))),
    };
    let filters = (r.usize()?, r.usize()?);
    let kernel_size = r.usize()?;
    let patch_size = r.usize()?;
    let flags = r.u8()?;
    let dropout = r.f64()?;
    let input_shape = [r.usize()?, r.usize()?, r.usize()?];
    let n_classes = r.usize()?;
    let n_layers = r.usize()?;
    let cfg = ArchConfig {
        arch,
        filters,
        kernel_size,
        patch_size,
        use_bias: flags & 1 != 0,
        patch_bn: flags & 2 != 0,
        gelu: if flags & 4 != 0 { GeluMode::Erf } else { GeluMode::Tanh },
        dropout,
        input_shape,
        n_classes,
    };
    Ok((cfg, payload, n_layers))
}

/// Layer hyperparameters without tensor contents.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct LayerMeta {
    pub name: String,
    pub kind: LayerKind,
    pub geometry: Option<ConvGeometry>,
    pub has_bias: bool,
    pub bn: (f64, f64),
    pub gelu: GeluMode,
    pub pool: (usize, usize),
    pub rate: f64,
}

impl LayerMeta {
    /// Number of tensors stored for this layer.
    pub fn n_tensors(&self) -> usize {
        match self.kind {
            LayerKind::Conv2d | LayerKind::DepthwiseConv2d | LayerKind::PointwiseConv2d | LayerKind::Dense => {
                1 + usize::from(self.has_bias)
            }
            LayerKind::BatchNorm => 4,
            _ => 0,
        }
    }
}

pub(crate) fn write_layer_meta(w: &mut ByteWriter, layer: &LayerSpec) {
    w.u8(layer.kind().code());
    w.str(&layer.name);
    match &layer.op {
        Op::Conv2d { geometry, bias, .. } => {
            w.usize(geometry.kh);
            w.usize(geometry.kw);
            w.usize(geometry.stride);
            w.u8(match geometry.padding {
                Padding::Same => 0,
                Padding::Valid => 1,
            });
            w.u8(u8::from(bias.is_some()));
        }
        Op::DepthwiseConv2d { bias, .. } | Op::PointwiseConv2d { bias, .. } | Op::Dense { bias, .. } => {
            w.u8(u8::from(bias.is_some()))
        }
        Op::BatchNorm(bn) => {
            w.f64(bn.eps);
            w.f64(bn.momentum);
        }
        Op::Gelu(mode) => w.u8(u8::from(*mode == GeluMode::Erf)),
        Op::MaxPool { pool } => {
            w.usize(pool.0);
            w.usize(pool.1);
        }
        Op::Dropout { rate } => w.f64(*rate),
        Op::Elu | Op::GlobalAvgPool | Op::Softmax | Op::ResidualBegin | Op::ResidualEnd => {}
    }
}

pub(crate) fn read_layer_meta(r: &mut ByteReader) -> Result<LayerMeta> {
    let kind = LayerKind::from_code(r.u8()?)?;
    let name = r.str()?;
    let mut meta = LayerMeta {
        name,
        kind,
        geometry: None,
        has_bias: false,
        bn: (0.0, 0.0),
        gelu: GeluMode::Tanh,
        pool: (1, 1),
        rate: 0.0,
    };
    match kind {
        LayerKind::Conv2d => {
            let (kh, kw, stride) = (r.usize()?, r.usize()?, r.usize()?);
            let padding = match r.u8()? {
                0 => Padding::Same,
                1 => Padding::Valid,
                p => return Err(Error::Format(format!("unknown padding code {p}"))),
            };
            meta.geometry = Some(ConvGeometry {
                kh,
                kw,
                stride,
                padding,
            });
            meta.has_bias = r.u8()? != 0;
        }
        LayerKind::DepthwiseConv2d | LayerKind::PointwiseConv2d | LayerKind::Dense => {
            meta.has_bias = r.u8()? != 0
        }
        LayerKind::BatchNorm => meta.bn = (r.f64()?, r.f64()?),
        LayerKind::Gelu => {
            meta.gelu = if r.u8()? != 0 { GeluMode::Erf } else { GeluMode::Tanh }
        }
        LayerKind::MaxPool => meta.pool = (r.usize()?, r.usize()?),
        LayerKind::Dropout => meta.rate = r.f64()?,
        _ => {}
    }
    Ok(meta)
}

/// Reassembles a float layer from its metadata and stored tensors.
pub(crate) fn layer_from_parts(meta: LayerMeta, tensors: Vec<Tensor>) -> Result<LayerSpec> {
    if tensors.len() != meta.n_tensors() {
        return Err(Error::Format(format!(
            "layer {} carries {} tensors, expected {}",
            meta.name,
            tensors.len(),
            meta.n_tensors()
        )));
    }
    let mut it = tensors.into_iter();
    let mut next = || it.next().unwrap();
    let op = match meta.kind {
        LayerKind::Conv2d => {
            let weight = next();
            let bias = meta.has_bias.then(&mut next);
            Op::Conv2d {
                geometry: meta.geometry.unwrap(),
                weight,
                bias,
            }
        }
        LayerKind::DepthwiseConv2d => {
            let weight = next();
            Op::DepthwiseConv2d {
                weight,
                bias: meta.has_bias.then(next),
            }
        }
        LayerKind::PointwiseConv2d => {
            let weight = next();
            Op::PointwiseConv2d {
                weight,
                bias: meta.has_bias.then(next),
            }
        }
        LayerKind::Dense => {
            let weight = next();
            Op::Dense {
                weight,
                bias: meta.has_bias.then(next),
            }
        }
        LayerKind::BatchNorm => Op::BatchNorm(BatchNormParams {
            gamma: next(),
            beta: next(),
            moving_mean: next(),
            moving_var: next(),
            eps: meta.bn.0,
            momentum: meta.bn.1,
        }),
        LayerKind::Elu => Op::Elu,
        LayerKind::Gelu => Op::Gelu(meta.gelu),
        LayerKind::MaxPool => Op::MaxPool { pool: meta.pool },
        LayerKind::GlobalAvgPool => Op::GlobalAvgPool,
        LayerKind::Dropout => Op::Dropout { rate: meta.rate },
        LayerKind::Softmax => Op::Softmax,
        LayerKind::ResidualBegin => Op::ResidualBegin,
        LayerKind::ResidualEnd => Op::ResidualEnd,
    };
    check_tensor_ranks(&meta.name, &op)?;
    Ok(LayerSpec::new(meta.name, op))
}

fn check_tensor_ranks(name: &str, op: &Op<f32>) -> Result<()> {
    let ok = match op {
        Op::Conv2d { geometry, weight, bias } => {
            let s = weight.shape();
            s.len() == 4 && (s[0], s[1]) == (geometry.kh, geometry.kw) && bias.as_ref().is_none_or(|b| b.shape() == [s[3]])
        }
        Op::DepthwiseConv2d { weight, bias } => {
            let s = weight.shape();
            s.len() == 3 && bias.as_ref().is_none_or(|b| b.shape() == [s[2]])
        }
        Op::PointwiseConv2d { weight, bias } | Op::Dense { weight, bias } => {
            let s = weight.shape();
            s.len() == 2 && bias.as_ref().is_none_or(|b| b.shape() == [s[1]])
        }
        Op::BatchNorm(bn) => {
            let c = bn.gamma.shape();
            c.len() == 1 && [&bn.beta, &bn.moving_mean, &bn.moving_var].iter().all(|t| t.shape() == c)
        }
        _ => true,
    };
    if ok {
        Ok(())
    } else {
        Err(Error::Format(format!("layer {name} has inconsistent tensor shapes")))
    }
}

pub fn write_model(model: &ModelGraph) -> Vec<u8> {
    let mut w = ByteWriter::default();
    write_header(&mut w, &model.config, PAYLOAD_FLOAT, model.layers().len());
    for layer in model.layers() {
        write_layer_meta(&mut w, layer);
        for t in layer.tensors() {
            w.tensor(t);
        }
    }
    w.buf
}

pub fn read_model(bytes: &[u8]) -> Result<ModelGraph> {
    let mut r = ByteReader::new(bytes);
    let (config, payload, n_layers) = read_header(&mut r)?;
    if payload != PAYLOAD_FLOAT {
        return Err(Error::Format("file holds a quantized model".into()));
    }
    let mut layers = Vec::with_capacity(n_layers.min(1024));
    for _ in 0..n_layers {
        let meta = read_layer_meta(&mut r)?;
        let tensors = (0..meta.n_tensors()).map(|_| r.tensor()).collect::<Result<Vec<_>>>()?;
        layers.push(layer_from_parts(meta, tensors)?);
    }
    r.finish()?;
    let model = ModelGraph {
        config,
        net: Sequential::new(layers),
    };
    model.validate()?;
    Ok(model)
}

pub fn save_model(model: &ModelGraph, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, write_model(model))?;
    Ok(())
}

pub fn load_model(path: impl AsRef<Path>) -> Result<ModelGraph> {
    read_model(&std::fs::read(path)?)
}
