//! Fold scoring and "mean (std)" reports.

use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::fewshot::{apply_delta, predict_examples, TaskDelta};
use super::{Hyperparams, LineageEntry};
use crate::corpus::{LabeledExample, Metric, TaskSpec};
use crate::encoder::Model;
use crate::error::{bail, Result};
use crate::partition::PartitionMode;
use crate::vocab::Vocabulary;

/// Percent of predictions equal to their label.
pub fn accuracy(preds: &[usize], labels: &[usize]) -> f64 {
    if preds.is_empty() {
        return 0.0;
    }
    let correct = preds.iter().zip(labels).filter(|(p, l)| p == l).count();
    100.0 * correct as f64 / preds.len() as f64
}

/// F1 of class 1, in percent. Zero when class 1 is never predicted or
/// never present.
pub fn f1_binary(preds: &[usize], labels: &[usize]) -> f64 {
    let (mut tp, mut fp, mut fneg) = (0usize, 0usize, 0usize);
    for (&p, &l) in preds.iter().zip(labels) {
        match (p == 1, l == 1) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fneg += 1,
            _ => {}
        }
    }
    let denom = 2 * tp + fp + fneg;
    if denom == 0 {
        return 0.0;
    }
    100.0 * (2 * tp) as f64 / denom as f64
}

pub fn score(metric: Metric, preds: &[usize], labels: &[usize]) -> f64 {
    match metric {
        Metric::Accuracy => accuracy(preds, labels),
        Metric::F1 => f1_binary(preds, labels),
    }
}

/// Mean and sample standard deviation (zero for a single score).
pub fn mean_std(scores: &[f64]) -> (f64, f64) {
    if scores.is_empty() {
        return (0.0, 0.0);
    }
    let n = scores.len() as f64;
    let mean = scores.iter().sum::<f64>() / n;
    if scores.len() < 2 {
        return (mean, 0.0);
    }
    let var = scores.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>() / (n - 1.0);
    (mean, libm::sqrt(var))
}

pub fn format_mean_std(mean: f64, std: f64) -> String {
    alloc::format!("{mean:.1} ({std:.1})")
}

/// Score each fold's delta on the test split. Each pair is the backbone a
/// delta was trained against and the delta itself.
pub fn evaluate(
    folds: &[(&Model<f32>, &TaskDelta)],
    vocab: &Vocabulary,
    spec: &TaskSpec,
    test: &[LabeledExample],
) -> Result<Vec<f64>> {
    spec.validate()?;
    let labels: Vec<usize> = test.iter().map(|e| e.label).collect();
    let mut scores = Vec::with_capacity(folds.len());
    for (backbone, delta) in folds {
        if delta.n_classes != spec.n_classes || delta.kind != spec.kind {
            bail!(Config, "delta for {} does not match task {}", delta.task, spec.name);
        }
        let model = apply_delta(backbone, delta)?;
        let ctx = delta.context(vocab, model.config().max_seq);
        let preds = predict_examples(&model, &ctx, delta.scoring(), delta.n_classes, test, 64)?;
        let classes: Vec<usize> = preds.iter().map(|p| p.class).collect();
        scores.push(score(spec.metric, &classes, &labels));
    }
    Ok(scores)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub task: String,
    pub mode: PartitionMode,
    pub k: usize,
    pub metric: Metric,
    pub n_pseudotokens: usize,
    pub symmetric: bool,
    pub scores: Vec<f64>,
    pub mean: f64,
    pub std: f64,
    pub summary: String,
    pub hyperparams: Hyperparams,
    pub seeds: Vec<u64>,
    pub lineage: Vec<LineageEntry>,
}

impl Report {
    /// Fill in mean, std and summary from `scores`.
    pub fn finish(mut self) -> Self {
        let (mean, std) = mean_std(&self.scores);
        self.mean = mean;
        self.std = std;
        self.summary = format_mean_std(mean, std);
        self
    }

    /// Whether the stored statistics follow exactly from the stored scores.
    pub fn is_consistent(&self) -> bool {
        let again = self.clone().finish();
        again.mean.to_bits() == self.mean.to_bits() && again.std.to_bits() == self.std.to_bits() && again.summary == self.summary
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_predictions() {
        let labels = [0, 1, 1, 0];
        let s = accuracy(&labels, &labels);
        let (m, sd) = mean_std(&[s; 5]);
        assert_eq!(format_mean_std(m, sd), "100.0 (0.0)");
    }

    #[test]
    fn majority_predictor_on_balanced_set() {
        let labels: Vec<usize> = (0..100).map(|i| i % 2).collect();
        assert_eq!(accuracy(&[1; 100], &labels), 50.0);
        assert_eq!(f1_binary(&[0; 100], &labels), 0.0);
    }

    #[test]
    fn f1_against_hand_count() {
        // tp 2, fp 1, fn 1 -> 4 / 6
        let f = f1_binary(&[1, 1, 1, 0, 0], &[1, 1, 0, 1, 0]);
        assert!((f - 400.0 / 6.0).abs() < 1e-12);
    }

    #[test]
    fn sample_std() {
        let (m, s) = mean_std(&[90.0, 92.0, 94.0, 96.0, 98.0]);
        assert_eq!(m, 94.0);
        assert!((s - libm::sqrt(10.0)).abs() < 1e-12);
        assert_eq!(format_mean_std(m, s), "94.0 (3.2)");
    }
}
