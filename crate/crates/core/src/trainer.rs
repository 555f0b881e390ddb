//! Training: masked-LM pretraining of the base checkpoint, intermediate NLI
//! fine-tuning, few-shot adaptation, hyperparameter search and evaluation.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::encoder::{Binder, Model};
use crate::error::{bail, Result};
use crate::optim::{adamw_step, AdamState, AdamWConfig};
use crate::rng;
use crate::tape::{NodeId, ParamId, Tape};
use crate::tensor::Tensor;
use crate::vocab::Vocabulary;

mod fewshot;
mod folds;
mod grid;
mod metrics;
mod mlm;

pub use fewshot::{
    apply_delta, decide, entail_loss, entail_logits_batch, intermediate_train, predict_examples, render_for_training,
    render_request, train_fewshot, FewShotOutcome, FewShotTask, IntermediateOutcome, Scoring, TaskDelta,
};
pub use folds::{fold_examples, sample_folds, FoldSpec};
pub use grid::{grid_search, GridResult, GridSpace};
pub use metrics::{accuracy, evaluate, f1_binary, format_mean_std, mean_std, score, Report};
pub use mlm::{mask_positions, mlm_loss, pretrain_mlm, MlmOutcome};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Hyperparams {
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub grad_accum: usize,
    pub epochs: usize,
    /// Stop after this many epochs without a lower training loss.
    pub patience: usize,
    pub seed: u64,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Self { lr: 1e-5, weight_decay: 0.0, batch_size: 8, grad_accum: 1, epochs: 20, patience: 5, seed: 0 }
    }
}

impl Hyperparams {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            bail!(Config, "learning rate must be positive, got {}", self.lr);
        }
        if self.weight_decay < 0.0 {
            bail!(Config, "weight decay must be non-negative, got {}", self.weight_decay);
        }
        if self.batch_size == 0 || self.grad_accum == 0 {
            bail!(Config, "batch size and accumulation steps must be positive");
        }
        Ok(())
    }
}

/// One stage in a checkpoint's history.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LineageEntry {
    pub stage: String,
    pub fingerprint: String,
    pub seed: u64,
}

/// A trained backbone plus the vocabulary it was trained with.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: Model<f32>,
    pub vocab: Vocabulary,
    pub lineage: Vec<LineageEntry>,
}

impl Checkpoint {
    pub fn new(model: Model<f32>, vocab: Vocabulary) -> Result<Self> {
        if model.config().vocab_size != vocab.len() {
            bail!(Config, "model has {} vocabulary rows, vocabulary has {}", model.config().vocab_size, vocab.len());
        }
        Ok(Self { model, vocab, lineage: Vec::new() })
    }

    pub fn fingerprint(&self) -> String {
        self.model.fingerprint()
    }

    /// Append a lineage stage for the current weights.
    pub fn record(&mut self, stage: &str, seed: u64) {
        let fingerprint = self.fingerprint();
        self.lineage.push(LineageEntry { stage: stage.into(), fingerprint, seed });
    }

    /// The newest lineage entry must describe the current weights.
    pub fn verify_lineage(&self) -> Result<()> {
        match self.lineage.last() {
            Some(e) if e.fingerprint == self.fingerprint() => Ok(()),
            Some(e) => bail!(
                State,
                "checkpoint weights {} do not match lineage stage {} ({})",
                &self.fingerprint()[..12],
                e.stage,
                &e.fingerprint[..e.fingerprint.len().min(12)]
            ),
            None => Ok(()),
        }
    }
}

/// Gradient accumulation in front of AdamW.
pub(crate) struct Stepper {
    state: AdamState<f32>,
    cfg: AdamWConfig,
    accum: usize,
    pending: BTreeMap<ParamId, Tensor<f32>>,
    count: usize,
}

impl Stepper {
    pub(crate) fn new(hp: &Hyperparams) -> Self {
        Self {
            state: AdamState::new(),
            cfg: AdamWConfig::new(hp.lr, hp.weight_decay),
            accum: hp.grad_accum,
            pending: BTreeMap::new(),
            count: 0,
        }
    }

    pub(crate) fn push(&mut self, model: &mut Model<f32>, grads: BTreeMap<ParamId, Tensor<f32>>) -> Result<()> {
        for (id, g) in grads {
            match self.pending.get_mut(&id) {
                Some(acc) => acc.add_assign(&g),
                None => {
                    self.pending.insert(id, g);
                }
            }
        }
        self.count += 1;
        if self.count == self.accum {
            self.flush(model)?;
        }
        Ok(())
    }

    /// Apply whatever has accumulated, averaged over the micro-batches seen.
    pub(crate) fn flush(&mut self, model: &mut Model<f32>) -> Result<()> {
        if self.count == 0 {
            return Ok(());
        }
        let scale = 1.0 / self.count as f32;
        for g in self.pending.values_mut() {
            g.scale(scale);
        }
        adamw_step(model.params_mut(), &self.pending, &mut self.state, &self.cfg)?;
        self.pending.clear();
        self.count = 0;
        Ok(())
    }
}

/// Run one micro-batch: build the loss with `loss_fn`, backpropagate to
/// `trainable`, and return (loss, gradients).
pub(crate) fn micro_batch<F>(
    model: &Model<f32>,
    trainable: &BTreeSet<ParamId>,
    items: &[usize],
    loss_fn: &mut F,
) -> Result<(f64, BTreeMap<ParamId, Tensor<f32>>)>
where
    F: for<'p> FnMut(&mut Tape<'p, f32>, &mut Binder<'p, f32>, &[usize]) -> Result<NodeId>,
{
    let mut tape = Tape::new();
    let mut binder = Binder::new(model, trainable.clone());
    binder.bind_trainable(&mut tape);
    let loss = loss_fn(&mut tape, &mut binder, items)?;
    let value = tape.value(loss).data()[0] as f64;
    if !value.is_finite() {
        bail!(State, "training loss became {value}");
    }
    let grads = tape.backward(loss, trainable)?;
    Ok((value, grads))
}

/// Epoch loop with shuffling, accumulation and early stopping on the
/// training loss. Returns the mean loss of every epoch run.
pub(crate) fn run_epochs<F>(
    model: &mut Model<f32>,
    trainable: &BTreeSet<ParamId>,
    hp: &Hyperparams,
    n_items: usize,
    shuffle_seed: u64,
    mut loss_fn: F,
) -> Result<Vec<f64>>
where
    F: for<'p> FnMut(&mut Tape<'p, f32>, &mut Binder<'p, f32>, &[usize]) -> Result<NodeId>,
{
    hp.validate()?;
    if n_items == 0 {
        bail!(Input, "no training examples");
    }
    let mut rng = rng::seeded(shuffle_seed);
    let mut stepper = Stepper::new(hp);
    let mut order: Vec<usize> = (0..n_items).collect();
    let mut losses = Vec::new();
    let mut best = f64::INFINITY;
    let mut stale = 0;
    for _ in 0..hp.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(hp.batch_size) {
            let (loss, grads) = micro_batch(model, trainable, chunk, &mut loss_fn)?;
            total += loss;
            batches += 1;
            stepper.push(model, grads)?;
        }
        stepper.flush(model)?;
        let epoch_loss = total / batches as f64;
        losses.push(epoch_loss);
        if epoch_loss < best {
            best = epoch_loss;
            stale = 0;
        } else {
            stale += 1;
            if stale >= hp.patience {
                break;
            }
        }
    }
    Ok(losses)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::EncoderConfig;

    fn tiny() -> Model<f32> {
        let cfg = EncoderConfig {
            d_model: 8,
            n_layers: 1,
            n_heads: 2,
            d_ff: 8,
            max_seq: 8,
            vocab_size: 10,
            pseudo_capacity: 2,
            ..EncoderConfig::default()
        };
        Model::init(&cfg, 1).unwrap()
    }

    #[test]
    fn accumulation_of_two_halves_matches_one_full_batch() {
        let mut a = tiny();
        let mut b = a.clone();
        let w = a.layout().head_weight;
        let set = BTreeSet::from([w]);
        let g1 = Tensor::filled(&[8, 2], 1.0f32);
        let g2 = Tensor::filled(&[8, 2], 3.0f32);
        let hp2 = Hyperparams { lr: 0.1, grad_accum: 2, ..Hyperparams::default() };
        let mut s = Stepper::new(&hp2);
        s.push(&mut a, BTreeMap::from([(w, g1)])).unwrap();
        assert_eq!(a.param(w), b.param(w));
        s.push(&mut a, BTreeMap::from([(w, g2)])).unwrap();
        let hp1 = Hyperparams { lr: 0.1, ..Hyperparams::default() };
        let mut s1 = Stepper::new(&hp1);
        s1.push(&mut b, BTreeMap::from([(w, Tensor::filled(&[8, 2], 2.0f32))])).unwrap();
        assert_eq!(a.param(w), b.param(w));
        assert!(set.contains(&w));
    }

    #[test]
    fn lineage_detects_modified_weights() {
        let vocab = Vocabulary::from_tokens((0..5).map(|i| alloc::format!("w{i}")).collect());
        let mut ck = Checkpoint::new(tiny(), vocab).unwrap();
        ck.record("pretrain", 0);
        ck.verify_lineage().unwrap();
        let id = ck.model.layout().position;
        ck.model.params_mut()[id].data_mut()[0] += 1.0;
        assert!(matches!(ck.verify_lineage(), Err(crate::Error::State(_))));
    }

    #[test]
    fn invalid_hyperparams() {
        assert!(Hyperparams { lr: 0.0, ..Hyperparams::default() }.validate().is_err());
        assert!(Hyperparams { batch_size: 0, ..Hyperparams::default() }.validate().is_err());
    }
}
