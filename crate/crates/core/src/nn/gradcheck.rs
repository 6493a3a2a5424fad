//! Analytic gradients against central finite differences in f64.
//!
//! The objective is `Σ r ⊙ f(x)` for a random projection `r`, evaluated in
//! training mode with a fixed dropout mask. The error is
//! `max|a − n| / max|n|` over the concatenation of the input gradient and
//! every parameter gradient; a per-tensor ratio would be ill-posed for
//! exact zeros such as a bias feeding a training-mode batch norm.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{LayerKind, Sequential};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-6;
const DROPOUT_SEED: u64 = 99;

pub fn random_tensor<R: Rng + ?Sized>(shape: Vec<usize>, rng: &mut R, lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Random weights, with batch norm scales and variances kept away from 0.
pub fn randomize<R: Rng + ?Sized>(net: &mut Sequential<f64>, rng: &mut R) {
    for layer in &mut net.layers {
        let is_bn = layer.kind() == LayerKind::BatchNorm;
        for (i, t) in layer.tensors_mut().into_iter().enumerate() {
            let (lo, hi) = match (is_bn, i) {
                (true, 0) => (0.5, 1.5),
                (true, 3) => (0.5, 2.0),
                _ => (-0.8, 0.8),
            };
            for v in t.data_mut() {
                *v = rng.random_range(lo..hi);
            }
        }
    }
}

fn objective(net: &Sequential<f64>, x: &Tensor<f64>, r: &Tensor<f64>) -> Result<f64> {
    let mut net = net.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(DROPOUT_SEED);
    let (y, _) = net.forward_train(x, &mut rng)?;
    Ok(y.data().iter().zip(r.data()).map(|(a, b)| a * b).sum())
}

pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff = analytic.iter().zip(numeric).map(|(a, n)| (a - n).abs()).fold(0.0, f64::max);
    let scale = numeric.iter().map(|n| n.abs()).fold(0.0, f64::max).max(1e-12);
    diff / scale
}

/// Relative error of the backward pass of `net` at `x`.
pub fn check_gradients(net: &Sequential<f64>, x: &Tensor<f64>, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut work = net.clone();
    let (y, tape) = work.forward_train(x, &mut ChaCha8Rng::seed_from_u64(DROPOUT_SEED))?;
    let r = random_tensor(y.shape().to_vec(), &mut rng, -1.0, 1.0);
    let (dx, grads) = net.backward(&tape, &r)?;

    let central = |f: &dyn Fn(f64) -> Result<f64>| -> Result<f64> { Ok((f(STEP)? - f(-STEP)?) / (2.0 * STEP)) };
    let mut analytic = dx.data().to_vec();
    let mut numeric = Vec::with_capacity(analytic.len());
    for i in 0..x.len() {
        numeric.push(central(&|d| {
            let mut xp = x.clone();
            xp.data_mut()[i] += d;
            objective(net, &xp, &r)
        })?);
    }
    for (li, layer_grads) in grads.iter().enumerate() {
        if layer_grads.len() != net.layers[li].params().len() {
            return Err(Error::shape(li, "one gradient per parameter tensor expected"));
        }
        for (pi, g) in layer_grads.iter().enumerate() {
            analytic.extend(g.data());
            for k in 0..g.len() {
                numeric.push(central(&|d| {
                    let mut p = net.clone();
                    p.layers[li].params_mut()[pi].data_mut()[k] += d;
                    objective(&p, x, &r)
                })?);
            }
        }
    }
    Ok(relative_error(&analytic, &numeric))
}
