//! Hyperparameter grid search on a held-aside dev fold.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::fewshot::{apply_delta, predict_examples, train_fewshot, FewShotTask};
use super::folds::FoldSpec;
use super::metrics::accuracy;
use super::{Checkpoint, Hyperparams};
use crate::corpus::LabeledExample;
use crate::error::{bail, Result};
use crate::partition::PartitionMode;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSpace {
    pub lrs: Vec<f64>,
    pub weight_decays: Vec<f64>,
    pub batch_sizes: Vec<usize>,
    pub grad_accums: Vec<usize>,
}

impl GridSpace {
    /// Learning rate {1e-5, 3e-5, 1e-4} × weight decay {0, 0.05, 0.1} ×
    /// batch {8, 16} × accumulation {1, 2}.
    pub fn appendix() -> Self {
        Self {
            lrs: alloc::vec![1e-5, 3e-5, 1e-4],
            weight_decays: alloc::vec![0.0, 0.05, 0.1],
            batch_sizes: alloc::vec![8, 16],
            grad_accums: alloc::vec![1, 2],
        }
    }

    pub fn singleton(hp: &Hyperparams) -> Self {
        Self {
            lrs: alloc::vec![hp.lr],
            weight_decays: alloc::vec![hp.weight_decay],
            batch_sizes: alloc::vec![hp.batch_size],
            grad_accums: alloc::vec![hp.grad_accum],
        }
    }

    /// Every point, in tie-break order: lower lr, then lower decay, smaller
    /// batch, fewer accumulation steps. Other fields come from `base`.
    pub fn points(&self, base: &Hyperparams) -> Vec<Hyperparams> {
        let mut lrs = self.lrs.clone();
        let mut wds = self.weight_decays.clone();
        let mut bss = self.batch_sizes.clone();
        let mut acs = self.grad_accums.clone();
        lrs.sort_by(f64::total_cmp);
        lrs.dedup();
        wds.sort_by(f64::total_cmp);
        wds.dedup();
        bss.sort_unstable();
        bss.dedup();
        acs.sort_unstable();
        acs.dedup();
        let mut out = Vec::new();
        for &lr in &lrs {
            for &weight_decay in &wds {
                for &batch_size in &bss {
                    for &grad_accum in &acs {
                        out.push(Hyperparams { lr, weight_decay, batch_size, grad_accum, ..base.clone() });
                    }
                }
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridResult {
    pub best: Hyperparams,
    /// Mean dev accuracy of every evaluated point, in grid order. Empty
    /// when the space has a single point, which is returned untrained.
    pub scores: Vec<(Hyperparams, f64)>,
}

/// Score every grid point by mean dev accuracy over `folds` and return the
/// best, ties resolved by grid order.
#[allow(clippy::too_many_arguments)]
pub fn grid_search(
    space: &GridSpace,
    base: &Hyperparams,
    checkpoint: &Checkpoint,
    task: FewShotTask<'_>,
    folds: &[FoldSpec],
    dev: &[LabeledExample],
    mode: PartitionMode,
    symmetric: bool,
) -> Result<GridResult> {
    let points = space.points(base);
    if points.is_empty() {
        bail!(Config, "hyperparameter space is empty");
    }
    if points.len() == 1 {
        return Ok(GridResult { best: points[0].clone(), scores: Vec::new() });
    }
    if folds.is_empty() || dev.is_empty() {
        bail!(Input, "grid search needs training folds and a dev fold");
    }
    let labels: Vec<usize> = dev.iter().map(|e| e.label).collect();
    let mut scores = Vec::with_capacity(points.len());
    for hp in points {
        let mut total = 0.0;
        for fold in folds {
            let out = train_fewshot(checkpoint, task, fold, mode, &hp, symmetric)?;
            let backbone = out.model.as_ref().unwrap_or(&checkpoint.model);
            let model = apply_delta(backbone, &out.delta)?;
            let ctx = out.delta.context(&checkpoint.vocab, model.config().max_seq);
            let preds = predict_examples(&model, &ctx, out.delta.scoring(), out.delta.n_classes, dev, 64)?;
            let classes: Vec<usize> = preds.iter().map(|p| p.class).collect();
            total += accuracy(&classes, &labels);
        }
        scores.push((hp, total / folds.len() as f64));
    }
    let mut best = 0;
    for (i, (_, s)) in scores.iter().enumerate() {
        if *s > scores[best].1 {
            best = i;
        }
    }
    Ok(GridResult { best: scores[best].0.clone(), scores })
}
