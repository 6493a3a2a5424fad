//! Accuracy, multiclass log loss and confusion matrices.

use std::fmt::Write as _;

use crate::dataset::Example;
use crate::error::{Error, Result};
use crate::model::{argmax, ModelGraph};

pub const LOG_LOSS_CLAMP: f64 = 1e-15;

fn check_lengths<P>(preds: &[P], labels: &[usize]) -> Result<()> {
    if preds.is_empty() {
        return Err(Error::EmptyInput);
    }
    if preds.len() != labels.len() {
        return Err(Error::Config(format!(
            "{} predictions for {} labels",
            preds.len(),
            labels.len()
        )));
    }
    Ok(())
}

/// Fraction of rows whose argmax equals the label; ties go to the lowest index.
pub fn accuracy<P: AsRef<[f64]>>(preds: &[P], labels: &[usize]) -> Result<f64> {
    check_lengths(preds, labels)?;
    let correct = preds
        .iter()
        .zip(labels)
        .filter(|(p, &l)| argmax(p.as_ref()) == l)
        .count();
    Ok(correct as f64 / preds.len() as f64)
}

/// Mean of `−ln(clamp(p[label], 1e-15, 1))`.
pub fn log_loss<P: AsRef<[f64]>>(preds: &[P], labels: &[usize]) -> Result<f64> {
    check_lengths(preds, labels)?;
    let mut total = 0.0;
    for (p, &l) in preds.iter().zip(labels) {
        let p = p.as_ref();
        let v = *p
            .get(l)
            .ok_or_else(|| Error::Config(format!("label {l} outside {} classes", p.len())))?;
        total -= v.clamp(LOG_LOSS_CLAMP, 1.0).ln();
    }
    Ok(total / preds.len() as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalResult {
    pub accuracy: f64,
    pub log_loss: f64,
    pub n_examples: usize,
    /// `confusion[true][predicted]`
    pub confusion: Vec<Vec<u64>>,
}

impl EvalResult {
    pub fn from_predictions<P: AsRef<[f64]>>(preds: &[P], labels: &[usize], n_classes: usize) -> Result<Self> {
        let accuracy = accuracy(preds, labels)?;
        let log_loss = log_loss(preds, labels)?;
        let mut confusion = vec![vec![0u64; n_classes]; n_classes];
        for (p, &l) in preds.iter().zip(labels) {
            let predicted = argmax(p.as_ref());
            if l >= n_classes || predicted >= n_classes {
                return Err(Error::Config(format!("label {l} outside {n_classes} classes")));
            }
            confusion[l][predicted] += 1;
        }
        Ok(Self {
            accuracy,
            log_loss,
            n_examples: preds.len(),
            confusion,
        })
    }

    pub fn trace(&self) -> u64 {
        (0..self.confusion.len()).map(|i| self.confusion[i][i]).sum()
    }

    /// Aligned text report with per-class recall.
    pub fn report(&self, class_names: &[&str]) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "examples  {}", self.n_examples);
        let _ = writeln!(out, "accuracy  {:.4}", self.accuracy);
        let _ = writeln!(out, "log_loss  {:.4}", self.log_loss);
        let width = class_names.iter().map(|n| n.len()).max().unwrap_or(5).max(5);
        let _ = writeln!(out, "{:<width$}  {:>7}  {:>7}", "class", "count", "recall");
        for (i, row) in self.confusion.iter().enumerate() {
            let count: u64 = row.iter().sum();
            let recall = if count == 0 { 0.0 } else { row[i] as f64 / count as f64 };
            let name = class_names.get(i).copied().unwrap_or("?");
            let _ = writeln!(out, "{name:<width$}  {count:>7}  {recall:>7.4}");
        }
        out
    }

    pub fn to_csv(&self) -> String {
        format!(
            "n_examples,accuracy,log_loss\n{},{:.8},{:.8}\n",
            self.n_examples, self.accuracy, self.log_loss
        )
    }

    pub fn confusion_csv(&self, class_names: &[&str]) -> String {
        let mut out = String::from("true\\predicted");
        for n in class_names {
            out.push(',');
            out.push_str(n);
        }
        out.push('\n');
        for (i, row) in self.confusion.iter().enumerate() {
            out.push_str(class_names.get(i).copied().unwrap_or("?"));
            for v in row {
                let _ = write!(out, ",{v}");
            }
            out.push('\n');
        }
        out
    }
}

/// Batch inference over `data` in chunks of `batch` examples.
pub fn evaluate(model: &ModelGraph, data: &[Example]) -> Result<EvalResult> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut probs = Vec::with_capacity(data.len());
    for chunk in data.chunks(64) {
        let inputs: Vec<_> = chunk.iter().map(|e| &e.spectrogram).collect();
        probs.extend(model.predict_batch(&inputs)?.into_iter().map(|p| p.probabilities));
    }
    let labels: Vec<usize> = data.iter().map(|e| e.label).collect();
    EvalResult::from_predictions(&probs, &labels, model.config.n_classes)
}
