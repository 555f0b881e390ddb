//! Disjoint stratified k-shot folds.

use alloc::collections::BTreeMap;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::corpus::{Dataset, LabeledExample};
use crate::error::{bail, Result};
use crate::rng;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldSpec {
    pub index: usize,
    pub k: usize,
    /// Training ids, k per class, grouped by class.
    pub ids: Vec<u64>,
    /// Master seed plus fold index.
    pub seed: u64,
}

/// Sample `n_folds` pairwise-disjoint folds of exactly `k` training
/// examples per class, drawn without replacement from the train split.
pub fn sample_folds(dataset: &Dataset, k: usize, n_folds: usize, seed: u64) -> Result<Vec<FoldSpec>> {
    if k == 0 || n_folds == 0 {
        bail!(Input, "k and the fold count must be positive");
    }
    let classes = dataset.spec.n_classes;
    let mut by_class: Vec<Vec<u64>> = alloc::vec![Vec::new(); classes];
    for ex in dataset.train() {
        if ex.label >= classes {
            bail!(Validation, "example {} has label {} of {} classes", ex.id, ex.label, classes);
        }
        by_class[ex.label].push(ex.id);
    }
    let need = n_folds * k;
    for (c, ids) in by_class.iter().enumerate() {
        if ids.len() < need {
            bail!(
                Input,
                "{n_folds} folds of k={k} need {need} train examples per class ({} total); class {c} has {} ({} available in the train split)",
                need * classes,
                ids.len(),
                dataset.train().len()
            );
        }
    }
    for (c, ids) in by_class.iter_mut().enumerate() {
        ids.shuffle(&mut rng::derived(seed, c as u64));
    }
    Ok((0..n_folds)
        .map(|f| FoldSpec {
            index: f,
            k,
            ids: by_class.iter().flat_map(|ids| ids[f * k..(f + 1) * k].iter().copied()).collect(),
            seed: seed + f as u64,
        })
        .collect())
}

/// The examples of a fold, in fold order.
pub fn fold_examples(pool: &[LabeledExample], fold: &FoldSpec) -> Result<Vec<LabeledExample>> {
    let index: BTreeMap<u64, &LabeledExample> = pool.iter().map(|e| (e.id, e)).collect();
    fold.ids
        .iter()
        .map(|id| match index.get(id) {
            Some(e) => Ok((*e).clone()),
            None => Err(crate::Error::Input(alloc::format!("fold {} id {id} not in the example pool", fold.index))),
        })
        .collect()
}
