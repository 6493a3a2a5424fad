//! Adam, categorical cross-entropy, the plateau learning-rate schedule and
//! early stopping.
//!
//! The monitored value is validation accuracy. "Improvement" means a strict
//! increase over the best value seen so far; the first epoch always
//! improves on the empty history. Two counters run off the same best value:
//! the plateau counter halves the learning rate when it reaches
//! `lr_plateau_patience` and then restarts, the stop counter ends training
//! when it reaches `early_stop_patience`. Only an improvement resets the
//! stop counter.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dataset::{split_indices, Example};
use crate::error::{Error, Result};
use crate::model::{argmax, ModelGraph};
use crate::tensor::{Scalar, Tensor};

pub const PROB_CLAMP: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-7,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingConfig {
    pub max_epochs: usize,
    pub early_stop_patience: usize,
    pub lr_plateau_patience: usize,
    pub lr_factor: f64,
    pub adam: AdamConfig,
    pub batch_size: usize,
    /// Share of the training data held out for monitoring. Zero monitors
    /// training accuracy instead.
    pub val_fraction: f64,
    pub restore_best: bool,
    pub seed: u64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            max_epochs: 500,
            early_stop_patience: 30,
            lr_plateau_patience: 15,
            lr_factor: 0.5,
            adam: AdamConfig::default(),
            batch_size: 64,
            val_fraction: 0.1,
            restore_best: true,
            seed: 0,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if self.max_epochs == 0 {
            return bad("max_epochs must be positive");
        }
        if self.early_stop_patience == 0 || self.lr_plateau_patience == 0 {
            return bad("patience values must be positive");
        }
        if !(self.lr_factor > 0.0 && self.lr_factor < 1.0) {
            return bad("lr_factor must lie in (0, 1)");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return bad("val_fraction must lie in [0, 1)");
        }
        let a = &self.adam;
        if !(a.lr >= 0.0 && a.lr.is_finite()) || !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) || !(a.eps > 0.0)
        {
            return bad("invalid Adam hyperparameters");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_loss: f64,
    pub val_acc: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopReason {
    MaxEpochs,
    EarlyStop,
    /// A non-finite loss or gradient ended training.
    Diverged,
}

impl StopReason {
    pub fn as_str(self) -> &'static str {
        match self {
            StopReason::MaxEpochs => "max_epochs",
            StopReason::EarlyStop => "early_stop",
            StopReason::Diverged => "diverged",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainRun {
    pub epochs: Vec<EpochRecord>,
    pub stop_reason: StopReason,
    pub best_epoch: usize,
    pub diagnostic: Option<String>,
}

impl TrainRun {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,train_acc,val_loss,val_acc,lr\n");
        for e in &self.epochs {
            let _ = writeln!(
                out,
                "{},{:.8},{:.8},{:.8},{:.8},{}",
                e.epoch, e.train_loss, e.train_acc, e.val_loss, e.val_acc, e.lr
            );
        }
        out
    }

    pub fn lr_history(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.lr).collect()
    }

    pub fn monitored(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.val_acc).collect()
    }
}

/// `−ln(clamp(p[target], 1e-12, 1))`.
pub fn categorical_crossentropy(pred: &[f64], target: usize) -> f64 {
    -pred[target].clamp(PROB_CLAMP, 1.0).ln()
}

/// Per-weight Adam moments, laid out in the order of the parameters handed
/// to [`adam_step`].
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AdamState<T = f32> {
    pub step: u64,
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
}

impl<T: Scalar> AdamState<T> {
    pub fn is_finite(&self) -> bool {
        self.m.iter().chain(&self.v).flatten().all(|x| x.is_finite())
    }
}

/// One bias-corrected Adam update at learning rate `lr`.
pub fn adam_step<T: Scalar>(
    params: &mut [&mut Tensor<T>],
    grads: &[&Tensor<T>],
    state: &mut AdamState<T>,
    hyper: &AdamConfig,
    lr: f64,
) -> Result<()> {
    if params.len() != grads.len() {
        return Err(Error::Config(format!("{} parameters, {} gradients", params.len(), grads.len())));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() {
            return Err(Error::shape(i, format!("gradient {:?} for parameter {:?}", g.shape(), p.shape())));
        }
        if !g.is_finite() {
            return Err(Error::NonFinite(format!("gradient of parameter tensor {i}")));
        }
    }
    if state.m.is_empty() {
        state.m = params.iter().map(|p| vec![T::zero(); p.len()]).collect();
        state.v = state.m.clone();
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (T::from_f64c(hyper.beta1), T::from_f64c(hyper.beta2));
    let c1 = T::from_f64c(1.0 - hyper.beta1.powi(t));
    let c2 = T::from_f64c(1.0 - hyper.beta2.powi(t));
    let (lr, eps) = (T::from_f64c(lr), T::from_f64c(hyper.eps));
    for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(state.m.iter_mut().zip(&mut state.v)) {
        for (((w, &g), m), v) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
            *m = b1 * *m + (T::one() - b1) * g;
            *v = b2 * *v + (T::one() - b2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *w -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

/// What one monitored value does to the schedule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct MonitorEvent {
    pub improved: bool,
    pub reduce_lr: bool,
    pub stop: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Monitor {
    pub best: f64,
    pub plateau_wait: usize,
    pub stop_wait: usize,
}

impl Default for Monitor {
    fn default() -> Self {
        Self {
            best: f64::NEG_INFINITY,
            plateau_wait: 0,
            stop_wait: 0,
        }
    }
}

impl Monitor {
    pub fn update(&mut self, value: f64, cfg: &TrainingConfig) -> MonitorEvent {
        let mut ev = MonitorEvent::default();
        if value > self.best {
            self.best = value;
            self.plateau_wait = 0;
            self.stop_wait = 0;
            ev.improved = true;
            return ev;
        }
        self.plateau_wait += 1;
        self.stop_wait += 1;
        if self.plateau_wait >= cfg.lr_plateau_patience {
            self.plateau_wait = 0;
            ev.reduce_lr = true;
        }
        ev.stop = self.stop_wait >= cfg.early_stop_patience;
        ev
    }

    fn replay(history: &[f64], cfg: &TrainingConfig) -> MonitorEvent {
        let mut monitor = Monitor::default();
        let mut last = MonitorEvent::default();
        for &v in history {
            last = monitor.update(v, cfg);
        }
        last
    }
}

/// Learning rate to use after the last entry of `history`.
pub fn lr_schedule_update(history: &[f64], current_lr: f64, cfg: &TrainingConfig) -> f64 {
    if Monitor::replay(history, cfg).reduce_lr {
        current_lr * cfg.lr_factor
    } else {
        current_lr
    }
}

/// Whether training stops after the last entry of `history`.
pub fn early_stop_check(history: &[f64], cfg: &TrainingConfig) -> bool {
    Monitor::replay(history, cfg).stop
}

/// Training-mode loss and accuracy counts for one batch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    pub loss_sum: f64,
    pub correct: usize,
    pub n: usize,
}

fn softmax_rows<T: Scalar>(logits: &Tensor<T>) -> Vec<Vec<f64>> {
    let k = *logits.shape().last().unwrap();
    logits
        .data()
        .chunks(k)
        .map(|row| {
            let row: Vec<f64> = row.iter().map(|v| v.to_f64c()).collect();
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
            let s: f64 = e.iter().sum();
            e.into_iter().map(|v| v / s).collect()
        })
        .collect()
}

fn batch_stats(probs: &[Vec<f64>], labels: &[usize]) -> StepStats {
    StepStats {
        loss_sum: probs.iter().zip(labels).map(|(p, &l)| categorical_crossentropy(p, l)).sum(),
        correct: probs.iter().zip(labels).filter(|(p, &l)| argmax(p) == l).count(),
        n: labels.len(),
    }
}

/// Training-mode loss of a batch without touching the weights' values
/// (batch norm moving statistics still advance).
pub fn train_mode_loss<T: Scalar, R: Rng + ?Sized>(
    model: &mut ModelGraph<T>,
    x: &Tensor<T>,
    labels: &[usize],
    rng: &mut R,
) -> Result<f64> {
    let (logits, _) = model.net.forward_train(x, rng)?;
    let s = batch_stats(&softmax_rows(&logits), labels);
    Ok(s.loss_sum / s.n as f64)
}

/// Forward in training mode, backward through the mean cross-entropy, one
/// Adam update.
pub fn train_step<T: Scalar, R: Rng + ?Sized>(
    model: &mut ModelGraph<T>,
    x: &Tensor<T>,
    labels: &[usize],
    state: &mut AdamState<T>,
    hyper: &AdamConfig,
    lr: f64,
    rng: &mut R,
) -> Result<StepStats> {
    let (logits, tape) = model.net.forward_train(x, rng)?;
    let probs = softmax_rows(&logits);
    let stats = batch_stats(&probs, labels);
    if !stats.loss_sum.is_finite() {
        return Err(Error::NonFinite("training loss".into()));
    }
    let n = labels.len() as f64;
    let k = logits.shape()[1];
    let mut dy = Vec::with_capacity(labels.len() * k);
    for (p, &l) in probs.iter().zip(labels) {
        for (c, &pc) in p.iter().enumerate() {
            let target = if c == l { 1.0 } else { 0.0 };
            dy.push(T::from_f64c((pc - target) / n));
        }
    }
    let dy = Tensor::new(logits.shape().to_vec(), dy)?;
    let (_, grads) = model.net.backward(&tape, &dy)?;
    let mut params = Vec::new();
    let mut flat_grads = Vec::new();
    for (layer, g) in model.net.layers.iter_mut().zip(&grads) {
        if layer.trainable {
            params.extend(layer.params_mut());
            flat_grads.extend(g.iter());
        }
    }
    adam_step(&mut params, &flat_grads, state, hyper, lr)?;
    Ok(stats)
}

/// Stacks the spectrograms of `data[indices]` into an `N×H×W×1` batch.
pub fn gather_batch<T: Scalar>(model: &ModelGraph<T>, data: &[Example], indices: &[usize]) -> Result<(Tensor<T>, Vec<usize>)> {
    let inputs: Vec<_> = indices.iter().map(|&i| &data[i].spectrogram).collect();
    let labels = indices.iter().map(|&i| data[i].label).collect();
    Ok((model.batch_input(&inputs)?, labels))
}

/// Inference-mode mean loss and accuracy over `indices`.
fn evaluate_indices<T: Scalar>(model: &ModelGraph<T>, data: &[Example], indices: &[usize], batch: usize) -> Result<(f64, f64)> {
    let mut total = StepStats {
        loss_sum: 0.0,
        correct: 0,
        n: 0,
    };
    for chunk in indices.chunks(batch) {
        let (x, labels) = gather_batch(model, data, chunk)?;
        let s = batch_stats(&softmax_rows(&model.net.infer(&x)?), &labels);
        total.loss_sum += s.loss_sum;
        total.correct += s.correct;
        total.n += s.n;
    }
    Ok((total.loss_sum / total.n as f64, total.correct as f64 / total.n as f64))
}

/// Runs the full protocol and returns the model with the best monitored
/// weights restored (when configured) plus the epoch history.
pub fn train<T: Scalar>(mut model: ModelGraph<T>, data: &[Example], cfg: &TrainingConfig) -> Result<(ModelGraph<T>, TrainRun)> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let (val_idx, train_idx) = if cfg.val_fraction > 0.0 {
        let (v, t) = split_indices(data.len(), cfg.val_fraction, cfg.seed);
        if v.is_empty() || t.is_empty() {
            return Err(Error::Config(format!(
                "{} examples cannot be split with validation fraction {}",
                data.len(),
                cfg.val_fraction
            )));
        }
        (v, t)
    } else {
        (Vec::new(), (0..data.len()).collect())
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut state = AdamState::default();
    let mut monitor = Monitor::default();
    let mut lr = cfg.adam.lr;
    let mut best = model.clone();
    let mut best_epoch = 0;
    let mut epochs = Vec::new();
    let mut order = train_idx.clone();
    let mut stop_reason = StopReason::MaxEpochs;
    let mut diagnostic = None;

    for epoch in 0..cfg.max_epochs {
        order.shuffle(&mut rng);
        let mut totals = StepStats {
            loss_sum: 0.0,
            correct: 0,
            n: 0,
        };
        let mut failure = None;
        for chunk in order.chunks(cfg.batch_size) {
            let (x, labels) = gather_batch(&model, data, chunk)?;
            match train_step(&mut model, &x, &labels, &mut state, &cfg.adam, lr, &mut rng) {
                Ok(s) => {
                    totals.loss_sum += s.loss_sum;
                    totals.correct += s.correct;
                    totals.n += s.n;
                }
                Err(e @ Error::NonFinite(_)) => {
                    failure = Some(e);
                    break;
                }
                Err(e) => return Err(e),
            }
        }
        if let Some(e) = failure {
            diagnostic = Some(format!("epoch {epoch}: {e}"));
            stop_reason = StopReason::Diverged;
            break;
        }
        let train_loss = totals.loss_sum / totals.n as f64;
        let train_acc = totals.correct as f64 / totals.n as f64;
        let (val_loss, val_acc) = if val_idx.is_empty() {
            (train_loss, train_acc)
        } else {
            evaluate_indices(&model, data, &val_idx, cfg.batch_size)?
        };
        if !val_loss.is_finite() {
            diagnostic = Some(format!("epoch {epoch}: non-finite validation loss"));
            stop_reason = StopReason::Diverged;
            break;
        }
        epochs.push(EpochRecord {
            epoch,
            train_loss,
            train_acc,
            val_loss,
            val_acc,
            lr,
        });
        let ev = monitor.update(val_acc, cfg);
        if ev.improved {
            best = model.clone();
            best_epoch = epoch;
        }
        if ev.stop {
            stop_reason = StopReason::EarlyStop;
            break;
        }
        if ev.reduce_lr {
            lr *= cfg.lr_factor;
        }
    }
    if epochs.is_empty() {
        best = model.clone();
    }
    let model = if cfg.restore_best || stop_reason == StopReason::Diverged {
        best
    } else {
        model
    };
    Ok((
        model,
        TrainRun {
            epochs,
            stop_reason,
            best_epoch,
            diagnostic,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> TrainingConfig {
        TrainingConfig::default()
    }

    #[test]
    fn crossentropy_closed_forms() {
        let mut one_hot = vec![0.0; 10];
        one_hot[3] = 1.0;
        assert_eq!(categorical_crossentropy(&one_hot, 3), 0.0);
        assert!((categorical_crossentropy(&[0.1; 10], 7) - 10f64.ln()).abs() < 1e-12);
        assert!((categorical_crossentropy(&[0.25, 0.75], 0) - 1.386294).abs() < 1e-6);
        assert!(categorical_crossentropy(&[0.0, 1.0], 0).is_finite());
    }

    #[test]
    fn zero_gradient_leaves_weights() {
        let mut w = Tensor::new(vec![3], vec![1.0f64, -2.0, 0.5]).unwrap();
        let g = Tensor::zeros(vec![3]);
        let mut st = AdamState::default();
        adam_step(&mut [&mut w], &[&g], &mut st, &AdamConfig::default(), 1e-3).unwrap();
        assert_eq!(w.data(), &[1.0, -2.0, 0.5]);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn first_step_moves_by_lr_against_the_gradient() {
        let mut w = Tensor::new(vec![3], vec![0.0f64; 3]).unwrap();
        let g = Tensor::new(vec![3], vec![3.0, -0.2, 50.0]).unwrap();
        let mut st = AdamState::default();
        adam_step(&mut [&mut w], &[&g], &mut st, &AdamConfig::default(), 0.01).unwrap();
        for (&wi, &gi) in w.data().iter().zip(g.data()) {
            assert!((wi + 0.01 * gi.signum()).abs() < 1e-6);
        }
    }

    #[test]
    fn adam_minimises_a_parabola() {
        let mut w = Tensor::new(vec![1], vec![5.0f64]).unwrap();
        let mut st = AdamState::default();
        let hyper = AdamConfig::default();
        for _ in 0..200 {
            let g = w.scale(2.0);
            adam_step(&mut [&mut w], &[&g], &mut st, &hyper, 0.1).unwrap();
        }
        assert!(w.data()[0].abs() < 0.5);
        assert!(st.is_finite());
    }

    #[test]
    fn non_finite_gradient_is_rejected() {
        let mut w = Tensor::new(vec![1], vec![1.0f32]).unwrap();
        let g = Tensor::new(vec![1], vec![f32::NAN]).unwrap();
        let mut st = AdamState::default();
        let r = adam_step(&mut [&mut w], &[&g], &mut st, &AdamConfig::default(), 1e-3);
        assert!(matches!(r, Err(Error::NonFinite(_))));
        assert_eq!(w.data(), &[1.0]);
    }

    #[test]
    fn improving_history_keeps_lr() {
        let h: Vec<f64> = (0..100).map(|i| i as f64 / 100.0).collect();
        for n in 1..=h.len() {
            assert_eq!(lr_schedule_update(&h[..n], 1e-3, &cfg()), 1e-3);
            assert!(!early_stop_check(&h[..n], &cfg()));
        }
    }

    fn lr_trajectory(h: &[f64]) -> Vec<f64> {
        let mut lr = 1.0;
        let mut out = Vec::new();
        for n in 1..=h.len() {
            out.push(lr);
            lr = lr_schedule_update(&h[..n], lr, &cfg());
        }
        out
    }

    #[test]
    fn plateau_of_fifteen_halves_once() {
        let h = vec![0.5; 16];
        let lr = lr_trajectory(&h);
        assert!(lr.iter().all(|&v| v == 1.0));
        assert_eq!(lr_schedule_update(&h, 1.0, &cfg()), 0.5);
        assert_eq!(lr_schedule_update(&h[..15], 1.0, &cfg()), 1.0);
        assert!(!early_stop_check(&h, &cfg()));
    }

    #[test]
    fn plateau_of_thirty_halves_twice_and_stops() {
        let h = vec![0.5; 31];
        let halvings: Vec<usize> = (1..=h.len())
            .filter(|&n| lr_schedule_update(&h[..n], 1.0, &cfg()) < 1.0)
            .map(|n| n - 1)
            .collect();
        assert_eq!(halvings, vec![15, 30]);
        assert!(early_stop_check(&h, &cfg()));
        assert!(!early_stop_check(&h[..30], &cfg()));
    }

    #[test]
    fn improvement_resets_the_stop_window() {
        let mut h = vec![0.5; 25];
        h.push(0.6);
        h.extend(vec![0.6; 29]);
        assert!(!early_stop_check(&h, &cfg()));
        h.push(0.6);
        assert!(early_stop_check(&h, &cfg()));
    }

    #[test]
    fn ties_do_not_count_as_improvement() {
        let mut m = Monitor::default();
        assert!(m.update(0.5, &cfg()).improved);
        assert!(!m.update(0.5, &cfg()).improved);
        assert!(!m.update(f64::NAN, &cfg()).improved);
        assert_eq!(m.stop_wait, 2);
    }

    #[test]
    fn config_validation() {
        assert!(cfg().validate().is_ok());
        assert!(TrainingConfig { lr_factor: 1.0, ..cfg() }.validate().is_err());
        assert!(TrainingConfig { early_stop_patience: 0, ..cfg() }.validate().is_err());
        assert!(TrainingConfig { batch_size: 0, ..cfg() }.validate().is_err());
    }
}
