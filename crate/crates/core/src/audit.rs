//! Parameter and multiply-accumulate accounting against the 128K / 30M
//! budgets, and the convention sweep that reconciles computed totals with
//! published ones.
//!
//! One MAC is one multiplication paired with one accumulation. Bias
//! additions are excluded unless [`CountingConvention::bias_macs`] is set;
//! batch norm costs `2·C·H·W` at inference when counted and nothing when
//! folded into the preceding convolution.

use std::fmt::Write as _;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::{Arch, ArchConfig, ModelGraph};
use crate::nn::naive::{self, MacCounter};
use crate::nn::{LayerKind, LayerSpec, Op};
use crate::tensor::Tensor;

pub const MAX_PARAMS: u64 = 128_000;
pub const MAX_MACS: u64 = 30_000_000;

/// Counting rules that do not change the network's structure.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct CountingConvention {
    /// 2 counts gamma and beta only, 4 adds the moving statistics.
    pub bn_params_per_channel: u8,
    pub bn_macs: bool,
    pub bias_macs: bool,
}

impl Default for CountingConvention {
    fn default() -> Self {
        Self {
            bn_params_per_channel: 4,
            bn_macs: false,
            bias_macs: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerRow {
    pub name: String,
    pub kind: LayerKind,
    pub out_shape: Vec<usize>,
    pub params: u64,
    pub macs: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Budget {
    pub max_params: u64,
    pub max_macs: u64,
}

impl Default for Budget {
    fn default() -> Self {
        Self {
            max_params: MAX_PARAMS,
            max_macs: MAX_MACS,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Verdict {
    pub params_ok: bool,
    pub macs_ok: bool,
    pub param_headroom: i64,
    pub mac_headroom: i64,
}

impl Verdict {
    pub fn pass(&self) -> bool {
        self.params_ok && self.macs_ok
    }
}

/// Both totals within budget, inclusive. With 8-bit weights the parameter
/// count is also the weight size in bytes.
pub fn check_budget(total_params: u64, total_macs: u64, budget: &Budget) -> Verdict {
    Verdict {
        params_ok: total_params <= budget.max_params,
        macs_ok: total_macs <= budget.max_macs,
        param_headroom: budget.max_params as i64 - total_params as i64,
        mac_headroom: budget.max_macs as i64 - total_macs as i64,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComplexityReport {
    pub rows: Vec<LayerRow>,
    pub total_params: u64,
    pub total_macs: u64,
    pub convention: CountingConvention,
    /// Structural conventions read off the model.
    pub kernel_size: usize,
    pub use_bias: bool,
    pub patch_bn: bool,
    pub budget: Budget,
    pub verdict: Verdict,
}

fn layer_params(layer: &LayerSpec, conv: &CountingConvention) -> u64 {
    match &layer.op {
        Op::BatchNorm(bn) => {
            let per = if conv.bn_params_per_channel == 2 { 2 } else { 4 };
            per * bn.channels() as u64
        }
        _ => layer.params().iter().map(|t| t.len() as u64).sum(),
    }
}

fn layer_macs(layer: &LayerSpec, input: &[usize], output: &[usize], conv: &CountingConvention) -> u64 {
    let area = |s: &[usize]| -> u64 { s[..s.len() - 1].iter().map(|&d| d as u64).product() };
    let out_elems: u64 = output.iter().map(|&d| d as u64).product();
    let bias_adds = |bias: &Option<Tensor>| if conv.bias_macs && bias.is_some() { out_elems } else { 0 };
    match &layer.op {
        Op::Conv2d { weight, bias, .. } => {
            let s = weight.shape();
            (s[0] * s[1] * s[2] * s[3]) as u64 * area(output) + bias_adds(bias)
        }
        Op::DepthwiseConv2d { weight, bias } => {
            let s = weight.shape();
            (s[0] * s[1] * s[2]) as u64 * area(output) + bias_adds(bias)
        }
        Op::PointwiseConv2d { weight, bias } | Op::Dense { weight, bias } => {
            let s = weight.shape();
            (s[0] * s[1]) as u64 * area(input) + bias_adds(bias)
        }
        Op::BatchNorm(_) if conv.bn_macs => 2 * out_elems,
        _ => 0,
    }
}

/// Per-layer parameter counts.
pub fn count_params(model: &ModelGraph, conv: &CountingConvention) -> Result<(Vec<u64>, u64)> {
    model.trace_shapes()?;
    let rows: Vec<u64> = model.layers().iter().map(|l| layer_params(l, conv)).collect();
    let total = rows.iter().sum();
    Ok((rows, total))
}

/// Per-layer MAC counts for a single example of `input_shape` (`H×W×C`).
pub fn count_macs(model: &ModelGraph, input_shape: &[usize], conv: &CountingConvention) -> Result<(Vec<u64>, u64)> {
    let shapes = model.net.trace_shapes(input_shape)?;
    let rows: Vec<u64> = model
        .layers()
        .iter()
        .enumerate()
        .map(|(i, l)| {
            let input = if i == 0 { input_shape } else { &shapes[i - 1] };
            layer_macs(l, input, &shapes[i], conv)
        })
        .collect();
    let total = rows.iter().sum();
    Ok((rows, total))
}

pub fn audit(model: &ModelGraph, conv: &CountingConvention, budget: &Budget) -> Result<ComplexityReport> {
    let shapes = model.trace_shapes()?;
    let (params, total_params) = count_params(model, conv)?;
    let (macs, total_macs) = count_macs(model, &model.config.input_shape, conv)?;
    let rows = model
        .layers()
        .iter()
        .zip(shapes)
        .zip(params.into_iter().zip(macs))
        .map(|((l, out_shape), (params, macs))| LayerRow {
            name: l.name.clone(),
            kind: l.kind(),
            out_shape,
            params,
            macs,
        })
        .collect();
    Ok(ComplexityReport {
        rows,
        total_params,
        total_macs,
        convention: *conv,
        kernel_size: model.config.kernel_size,
        use_bias: model.config.use_bias,
        patch_bn: model.config.patch_bn,
        budget: *budget,
        verdict: check_budget(total_params, total_macs, budget),
    })
}

fn shape_str(s: &[usize]) -> String {
    s.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("x")
}

impl ComplexityReport {
    pub fn table(&self) -> String {
        let name_w = self.rows.iter().map(|r| r.name.len()).max().unwrap_or(4).max(5);
        let kind_w = self.rows.iter().map(|r| r.kind.as_str().len()).max().unwrap_or(4).max(4);
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<name_w$}  {:<kind_w$}  {:>10}  {:>8}  {:>12}",
            "layer", "kind", "out_shape", "params", "macs"
        );
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{:<name_w$}  {:<kind_w$}  {:>10}  {:>8}  {:>12}",
                r.name,
                r.kind.as_str(),
                shape_str(&r.out_shape),
                r.params,
                r.macs
            );
        }
        let _ = writeln!(
            out,
            "{:<name_w$}  {:<kind_w$}  {:>10}  {:>8}  {:>12}",
            "total", "", "", self.total_params, self.total_macs
        );
        out.push_str(&self.footer());
        out
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("layer,kind,out_shape,params,macs\n");
        for r in &self.rows {
            let _ = writeln!(out, "{},{},{},{},{}", r.name, r.kind, shape_str(&r.out_shape), r.params, r.macs);
        }
        out
    }

    /// `key=value` verdict lines.
    pub fn footer(&self) -> String {
        let v = &self.verdict;
        let c = &self.convention;
        let mut out = String::new();
        let _ = writeln!(out, "total_params={}", self.total_params);
        let _ = writeln!(out, "total_macs={}", self.total_macs);
        let _ = writeln!(out, "int8_weight_bytes={}", self.total_params);
        let _ = writeln!(out, "max_params={}", self.budget.max_params);
        let _ = writeln!(out, "max_macs={}", self.budget.max_macs);
        let _ = writeln!(out, "param_headroom={}", v.param_headroom);
        let _ = writeln!(out, "mac_headroom={}", v.mac_headroom);
        let _ = writeln!(out, "kernel_size={}", self.kernel_size);
        let _ = writeln!(out, "bias={}", self.use_bias);
        let _ = writeln!(out, "patch_bn={}", self.patch_bn);
        let _ = writeln!(out, "bn_params_per_channel={}", c.bn_params_per_channel);
        let _ = writeln!(out, "bn_macs={}", if c.bn_macs { "counted" } else { "folded" });
        let _ = writeln!(out, "mac_definition={}", if c.bias_macs { "mul_acc_plus_bias" } else { "mul_acc" });
        let _ = writeln!(out, "params_ok={}", v.params_ok);
        let _ = writeln!(out, "macs_ok={}", v.macs_ok);
        let _ = writeln!(out, "verdict={}", if v.pass() { "pass" } else { "fail" });
        out
    }
}

/// Independent count: parameters by enumerating stored tensors, MACs by
/// running the naive reference kernels on a zero input and counting
/// multiplications.
pub fn brute_force_count(model: &ModelGraph, conv: &CountingConvention) -> Result<(u64, u64)> {
    let mut params = 0u64;
    for layer in model.layers() {
        let tensors = layer.tensors();
        let keep = match layer.kind() {
            LayerKind::BatchNorm if conv.bn_params_per_channel == 2 => 2,
            _ => tensors.len(),
        };
        params += tensors.iter().take(keep).map(|t| t.data().len() as u64).sum::<u64>();
    }

    let counter = MacCounter::default();
    let mut shape = vec![1];
    shape.extend(model.config.input_shape);
    let mut x = Tensor::zeros(shape);
    let mut skips = Vec::new();
    for (i, layer) in model.layers().iter().enumerate() {
        let bias_ticks = |y: &Tensor, bias: &Option<Tensor>| {
            if conv.bias_macs && bias.is_some() {
                (0..y.len()).for_each(|_| counter.tick());
            }
        };
        x = match &layer.op {
            Op::Conv2d { geometry, weight, bias } => {
                let y = naive::conv2d(&x, weight, bias.as_ref(), *geometry, &counter)?;
                bias_ticks(&y, bias);
                y
            }
            Op::DepthwiseConv2d { weight, bias } => {
                let y = naive::depthwise_conv2d(&x, weight, bias.as_ref(), &counter)?;
                bias_ticks(&y, bias);
                y
            }
            Op::PointwiseConv2d { weight, bias } | Op::Dense { weight, bias } => {
                let y = naive::matmul_rows(&x, weight, bias.as_ref(), &counter)?;
                bias_ticks(&y, bias);
                y
            }
            Op::BatchNorm(bn) if conv.bn_macs => {
                let (scale, shift) = bn.folded()?;
                naive::batch_norm_affine(&x, &scale, &shift, &counter)
            }
            Op::ResidualBegin => {
                skips.push(x.clone());
                x
            }
            Op::ResidualEnd => {
                let skip = skips.pop().ok_or_else(|| Error::shape(i, "residual end without begin"))?;
                x.add(&skip)
            }
            _ => layer.infer(&x).map_err(|e| e.at_layer(i))?,
        };
    }
    Ok((params, counter.get()))
}

/// One row of the published complexity table.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PublishedRow {
    pub arch: Arch,
    pub filters: (usize, usize),
    pub params: u64,
    pub macs: u64,
}

pub const PUBLISHED: [PublishedRow; 8] = [
    PublishedRow { arch: Arch::ConvSep, filters: (40, 40), params: 20_088, macs: 20_306_320 },
    PublishedRow { arch: Arch::ConvMixer, filters: (40, 40), params: 10_515, macs: 17_979_280 },
    PublishedRow { arch: Arch::ConvSep, filters: (48, 48), params: 28_320, macs: 28_570_080 },
    PublishedRow { arch: Arch::ConvMixer, filters: (48, 48), params: 14_139, macs: 24_671_712 },
    PublishedRow { arch: Arch::ConvSep, filters: (32, 64), params: 26_544, macs: 23_138_944 },
    PublishedRow { arch: Arch::ConvMixer, filters: (32, 64), params: 12_683, macs: 15_895_168 },
    PublishedRow { arch: Arch::ConvSep, filters: (64, 64), params: 49_008, macs: 49_300_096 },
    PublishedRow { arch: Arch::ConvMixer, filters: (64, 64), params: 22_923, macs: 41_153_152 },
];

/// The challenge baseline's published totals (params, MACs).
pub const BASELINE_TOTALS: (u64, u64) = (46_512, 29_234_920);

/// Structural and counting choices evaluated by the sweep.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct SweepConvention {
    pub kernel_size: usize,
    pub use_bias: bool,
    pub patch_bn: bool,
    pub counting: CountingConvention,
}

impl SweepConvention {
    fn describe(&self) -> String {
        format!(
            "kernel={} bias={} patch_bn={} bn_params={} bn_macs={} bias_macs={}",
            self.kernel_size,
            self.use_bias,
            self.patch_bn,
            self.counting.bn_params_per_channel,
            if self.counting.bn_macs { "counted" } else { "folded" },
            self.counting.bias_macs
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    pub convention: SweepConvention,
    pub params: u64,
    pub macs: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Reconciliation {
    pub row: PublishedRow,
    pub best_params: Candidate,
    pub best_macs: Candidate,
    pub candidates: usize,
}

fn pct(computed: u64, published: u64) -> f64 {
    100.0 * (computed as f64 - published as f64) / published as f64
}

impl Reconciliation {
    pub fn param_deviation_pct(&self) -> f64 {
        pct(self.best_params.params, self.row.params)
    }

    pub fn mac_deviation_pct(&self) -> f64 {
        pct(self.best_macs.macs, self.row.macs)
    }
}

/// The conventions swept by default.
pub fn default_sweep(arch: Arch) -> Vec<SweepConvention> {
    let patch_options: &[bool] = match arch {
        Arch::ConvSep => &[false],
        Arch::ConvMixer => &[true, false],
    };
    let mut out = Vec::new();
    for kernel_size in [3, 5, 7, 9] {
        for use_bias in [true, false] {
            for &patch_bn in patch_options {
                for bn_params_per_channel in [4, 2] {
                    for bn_macs in [false, true] {
                        out.push(SweepConvention {
                            kernel_size,
                            use_bias,
                            patch_bn,
                            counting: CountingConvention {
                                bn_params_per_channel,
                                bn_macs,
                                bias_macs: false,
                            },
                        });
                    }
                }
            }
        }
    }
    out
}

/// Counts one row under every convention in `sweep` and keeps, separately
/// for parameters and MACs, the convention with the smallest absolute
/// deviation. Ties keep the earlier convention, so the result does not
/// depend on evaluation order.
pub fn reconcile_row(row: PublishedRow, sweep: &[SweepConvention]) -> Result<Reconciliation> {
    if sweep.is_empty() {
        return Err(Error::Config("empty convention sweep".into()));
    }
    let candidates: Vec<Candidate> = sweep
        .par_iter()
        .map(|c| {
            let mut cfg = ArchConfig::new(row.arch, row.filters.0, row.filters.1, c.kernel_size, 1);
            cfg.use_bias = c.use_bias;
            cfg.patch_bn = c.patch_bn && row.arch == Arch::ConvMixer;
            let model = ModelGraph::build(cfg)?;
            let (_, params) = count_params(&model, &c.counting)?;
            let (_, macs) = count_macs(&model, &model.config.input_shape, &c.counting)?;
            Ok(Candidate {
                convention: *c,
                params,
                macs,
            })
        })
        .collect::<Result<_>>()?;
    let best_by = |f: &dyn Fn(&Candidate) -> u64, target: u64| {
        candidates
            .iter()
            .min_by_key(|c| f(c).abs_diff(target))
            .cloned()
            .unwrap()
    };
    Ok(Reconciliation {
        row,
        best_params: best_by(&|c| c.params, row.params),
        best_macs: best_by(&|c| c.macs, row.macs),
        candidates: candidates.len(),
    })
}

pub fn reconcile_published(sweep_for: impl Fn(Arch) -> Vec<SweepConvention>) -> Result<Vec<Reconciliation>> {
    PUBLISHED.iter().map(|&row| reconcile_row(row, &sweep_for(row.arch))).collect()
}

pub fn reconciliation_csv(records: &[Reconciliation]) -> String {
    let mut out = String::from(
        "arch,filters,published_params,best_params,param_dev_pct,param_convention,published_macs,best_macs,mac_dev_pct,mac_convention\n",
    );
    for r in records {
        let _ = writeln!(
            out,
            "{},{}-{},{},{},{:.3},{},{},{},{:.3},{}",
            r.row.arch,
            r.row.filters.0,
            r.row.filters.1,
            r.row.params,
            r.best_params.params,
            r.param_deviation_pct(),
            r.best_params.convention.describe(),
            r.row.macs,
            r.best_macs.macs,
            r.mac_deviation_pct(),
            r.best_macs.convention.describe()
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_conv_mixer, build_conv_sep};

    #[test]
    fn layer_formulas() {
        let conv = CountingConvention::default();
        let dense = LayerSpec::dense("d", 40, 10, true);
        assert_eq!(layer_params(&dense, &conv), 410);
        assert_eq!(layer_macs(&dense, &[40], &[10], &conv), 400);
        let dw = LayerSpec::depthwise("dw", 3, 40, false);
        let pw = LayerSpec::pointwise("pw", 40, 40, true);
        assert_eq!(layer_params(&dw, &conv) + layer_params(&pw, &conv), 2000);
        let c = LayerSpec::conv2d("c", 3, 1, 40, true);
        assert_eq!(layer_macs(&c, &[64, 51, 1], &[64, 51, 40], &conv), 1_175_040);
        let bn = LayerSpec::batch_norm("bn", 8);
        assert_eq!(layer_params(&bn, &conv), 32);
        let two = CountingConvention { bn_params_per_channel: 2, bn_macs: true, ..conv };
        assert_eq!(layer_params(&bn, &two), 16);
        assert_eq!(layer_macs(&bn, &[4, 5, 8], &[4, 5, 8], &two), 320);
    }

    #[test]
    fn totals_equal_row_sums() {
        let m = build_conv_sep(48, 48, 3).unwrap();
        let r = audit(&m, &CountingConvention::default(), &Budget::default()).unwrap();
        assert_eq!(r.total_params, r.rows.iter().map(|x| x.params).sum::<u64>());
        assert_eq!(r.total_macs, r.rows.iter().map(|x| x.macs).sum::<u64>());
        assert_eq!(r.total_params, 28_090);
        assert!(r.verdict.pass());
    }

    #[test]
    fn published_verdicts() {
        let b = Budget::default();
        assert!(check_budget(BASELINE_TOTALS.0, BASELINE_TOTALS.1, &b).pass());
        let v = check_budget(49_008, 49_300_096, &b);
        assert!(v.params_ok && !v.macs_ok && !v.pass());
        assert!(check_budget(0, 0, &b).pass());
        assert_eq!(check_budget(0, 0, &b).param_headroom, 128_000);
    }

    #[test]
    fn threshold_is_inclusive() {
        let b = Budget::default();
        assert!(check_budget(MAX_PARAMS, MAX_MACS, &b).pass());
        assert!(!check_budget(MAX_PARAMS + 1, MAX_MACS, &b).pass());
        assert!(!check_budget(MAX_PARAMS, MAX_MACS + 1, &b).pass());
    }

    #[test]
    fn brute_force_matches_under_every_counting_convention() {
        let mut m = build_conv_mixer(8, 12, 3, 1).unwrap();
        m.init_weights(1);
        for bn_params_per_channel in [2, 4] {
            for bn_macs in [false, true] {
                for bias_macs in [false, true] {
                    let c = CountingConvention {
                        bn_params_per_channel,
                        bn_macs,
                        bias_macs,
                    };
                    let (_, p) = count_params(&m, &c).unwrap();
                    let (_, k) = count_macs(&m, &m.config.input_shape, &c).unwrap();
                    assert_eq!(brute_force_count(&m, &c).unwrap(), (p, k), "{c:?}");
                }
            }
        }
    }

    #[test]
    fn degenerate_sweep_is_a_direct_count() {
        let conv = SweepConvention {
            kernel_size: 3,
            use_bias: true,
            patch_bn: false,
            counting: CountingConvention::default(),
        };
        let row = PUBLISHED[2];
        let rec = reconcile_row(row, &[conv]).unwrap();
        let m = build_conv_sep(48, 48, 3).unwrap();
        let (_, p) = count_params(&m, &conv.counting).unwrap();
        let (_, k) = count_macs(&m, &m.config.input_shape, &conv.counting).unwrap();
        assert_eq!((rec.best_params.params, rec.best_macs.macs), (p, k));
        assert_eq!(rec.candidates, 1);
    }

    #[test]
    fn csv_and_footer() {
        let m = build_conv_sep(8, 8, 3).unwrap();
        let r = audit(&m, &CountingConvention::default(), &Budget::default()).unwrap();
        assert_eq!(r.to_csv().lines().count(), m.layers().len() + 1);
        assert!(r.footer().contains("verdict=pass"));
        assert!(r.table().contains("64x51x8"));
    }
}
