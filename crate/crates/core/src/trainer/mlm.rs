//! Masked-token pretraining of the base checkpoint.

use alloc::collections::BTreeSet;
use alloc::vec::Vec;

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{micro_batch, Hyperparams, Stepper};
use crate::encoder::{encode_batch, Binder, Model, ParamGroup, SequenceInput};
use crate::error::{bail, Result};
use crate::rng;
use crate::tape::{NodeId, ParamId, Tape};
use crate::tensor::Scalar;
use crate::vocab::{CLS, FIRST_ORDINARY, MASK};

/// Fraction of ordinary tokens masked per sequence.
pub const MASK_RATE: f64 = 0.15;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlmOutcome {
    /// Loss on a fixed held-aside masked batch before and after training.
    pub initial_loss: f64,
    pub final_loss: f64,
    pub step_losses: Vec<f64>,
}

/// Choose ⌊0.15·L⌋ (at least one) of the L ordinary-token positions of
/// `ids`, sorted ascending.
pub fn mask_positions<R: Rng + ?Sized>(ids: &[u32], rng: &mut R) -> Vec<usize> {
    let candidates: Vec<usize> = (0..ids.len()).filter(|&i| ids[i] >= FIRST_ORDINARY).collect();
    if candidates.is_empty() {
        return Vec::new();
    }
    let n = ((MASK_RATE * candidates.len() as f64) as usize).max(1);
    let mut picked: Vec<usize> = index::sample(rng, candidates.len(), n).into_iter().map(|i| candidates[i]).collect();
    picked.sort_unstable();
    picked
}

/// A masked sequence and the original ids at its masked positions.
#[derive(Clone, Debug)]
pub struct MaskedSequence {
    pub ids: Vec<u32>,
    pub positions: Vec<usize>,
    pub targets: Vec<usize>,
}

fn mask_sequence<R: Rng + ?Sized>(content: &[u32], max_seq: usize, rng: &mut R) -> MaskedSequence {
    let mut ids = Vec::with_capacity(content.len() + 1);
    ids.push(CLS);
    ids.extend_from_slice(&content[..content.len().min(max_seq - 1)]);
    let positions = mask_positions(&ids, rng);
    let targets = positions.iter().map(|&p| ids[p] as usize).collect();
    for &p in &positions {
        ids[p] = MASK;
    }
    MaskedSequence { ids, positions, targets }
}

/// Mean cross-entropy of the masked-token head over every masked position
/// in the batch.
pub fn mlm_loss<'p, T: Scalar>(
    tape: &mut Tape<'p, T>,
    binder: &mut Binder<'p, T>,
    batch: &[&MaskedSequence],
) -> Result<NodeId> {
    let inputs: Vec<SequenceInput> = batch.iter().map(|m| SequenceInput::plain(m.ids.clone())).collect();
    let enc = encode_batch(tape, binder, &inputs, &[])?;
    let mut picks = Vec::new();
    let mut targets = Vec::new();
    for (b, m) in batch.iter().enumerate() {
        for (&p, &t) in m.positions.iter().zip(&m.targets) {
            picks.push((0, (b * enc.seq + p) as u32));
            targets.push(t);
        }
    }
    if picks.is_empty() {
        bail!(Input, "batch has no maskable tokens");
    }
    let rows = tape.gather(&[enc.hidden], &picks)?;
    let layout = binder.model().layout();
    let w = binder.node(tape, layout.mlm_weight);
    let b = binder.node(tape, layout.mlm_bias);
    let logits = tape.linear(rows, w, b)?;
    tape.cross_entropy(logits, &targets)
}

/// Parameters on the masked-LM loss path.
fn mlm_params<T: Scalar>(model: &Model<T>) -> BTreeSet<ParamId> {
    model
        .infos()
        .iter()
        .enumerate()
        .filter(|(_, i)| !matches!(i.group, ParamGroup::PseudoRow | ParamGroup::EntailHead))
        .map(|(id, _)| id)
        .collect()
}

fn eval_loss(model: &Model<f32>, batch: &[MaskedSequence]) -> Result<f64> {
    let mut tape = Tape::new();
    let mut binder = Binder::frozen(model);
    let refs: Vec<&MaskedSequence> = batch.iter().collect();
    let l = mlm_loss(&mut tape, &mut binder, &refs)?;
    Ok(tape.value(l).data()[0] as f64)
}

/// Pretrain every backbone parameter for `steps` optimizer steps on
/// `corpus` (token ids without [CLS]). Batches are sampled with
/// replacement; masks are redrawn each time a sequence is used.
pub fn pretrain_mlm(model: &mut Model<f32>, corpus: &[Vec<u32>], steps: usize, hp: &Hyperparams) -> Result<MlmOutcome> {
    hp.validate()?;
    if corpus.len() < hp.batch_size {
        bail!(Input, "corpus of {} sequences is smaller than one batch of {}", corpus.len(), hp.batch_size);
    }
    if corpus.iter().any(|s| s.is_empty()) {
        bail!(Input, "corpus contains an empty sequence");
    }
    let max_seq = model.config().max_seq;
    let mut eval_rng = rng::derived(hp.seed, 1);
    let eval: Vec<MaskedSequence> =
        corpus.iter().take(64).map(|s| mask_sequence(s, max_seq, &mut eval_rng)).collect();
    let initial_loss = eval_loss(model, &eval)?;

    let trainable = mlm_params(model);
    let mut rng = rng::derived(hp.seed, 0);
    let mut stepper = Stepper::new(hp);
    let mut step_losses = Vec::with_capacity(steps);
    for _ in 0..steps {
        let mut loss_sum = 0.0;
        for _ in 0..hp.grad_accum {
            let batch: Vec<MaskedSequence> = (0..hp.batch_size)
                .map(|_| {
                    let i = rng.random_range(0..corpus.len());
                    mask_sequence(&corpus[i], max_seq, &mut rng)
                })
                .collect();
            let (loss, grads) = micro_batch(model, &trainable, &[], &mut |tape, binder, _| {
                let refs: Vec<&MaskedSequence> = batch.iter().collect();
                mlm_loss(tape, binder, &refs)
            })?;
            loss_sum += loss;
            stepper.push(model, grads)?;
        }
        step_losses.push(loss_sum / hp.grad_accum as f64);
    }
    stepper.flush(model)?;
    let final_loss = eval_loss(model, &eval)?;
    Ok(MlmOutcome { initial_loss, final_loss, step_losses })
}
