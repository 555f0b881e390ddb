//! Entailment-style training: intermediate NLI fine-tuning and few-shot
//! adaptation, plus the per-task delta they produce.

use alloc::collections::BTreeSet;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::folds::{fold_examples, FoldSpec};
use super::{run_epochs, Checkpoint, Hyperparams};
use crate::corpus::{Dataset, LabeledExample, TaskKind, TaskSpec};
use crate::encoder::{encode_batch, Binder, Model, ParamGroup, SequenceInput};
use crate::entailment::{
    entail_probability, predict_binary, predict_multiclass, reformulate_multiclass, reformulate_set, symmetric_augment,
    EntailmentExample, EntailmentSet, Prediction, Rendered, RenderContext, Template, TemplateKind, DESCRIBED_CLASS,
};
use crate::error::{bail, Result};
use crate::partition::{partition_parameters, PartitionMode};
use crate::tape::{NodeId, ParamId, Tape};
use crate::tensor::{Scalar, Tensor};
use crate::vocab::{PseudotokenRegistry, Vocabulary};

/// How a task turns entail probabilities into a class.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scoring {
    /// One input against the class-1 description.
    Binary,
    /// One input per class description, argmax.
    PerClass,
}

impl Scoring {
    pub fn for_task(n_classes: usize, symmetric: bool) -> Self {
        if n_classes > 2 || symmetric {
            Scoring::PerClass
        } else {
            Scoring::Binary
        }
    }
}

/// Render the inputs scored for one request: a single row for binary
/// scoring, one per class otherwise.
pub fn render_request(
    ctx: &RenderContext<'_>,
    scoring: Scoring,
    n_classes: usize,
    s1: &str,
    s2: Option<&str>,
) -> Result<Vec<Rendered>> {
    let a = ctx.vocab.tokenize(s1);
    let b = s2.map(|s| ctx.vocab.tokenize(s));
    match scoring {
        Scoring::Binary => {
            let desc = ctx.template.primary_description();
            Ok(alloc::vec![ctx.render(&a, b.as_deref(), desc.text.as_deref())?])
        }
        Scoring::PerClass => (0..n_classes)
            .map(|c| {
                let desc = ctx.template.class_description(c)?;
                ctx.render(&a, b.as_deref(), desc.text.as_deref())
            })
            .collect(),
    }
}

/// Turn per-row entail probabilities of one request into a prediction.
pub fn decide(scoring: Scoring, p_entail: &[f64]) -> Prediction {
    match scoring {
        Scoring::Binary => predict_binary(p_entail[0], DESCRIBED_CLASS),
        Scoring::PerClass => predict_multiclass(p_entail),
    }
}

/// Everything a frozen backbone needs to serve one task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskDelta {
    pub task: String,
    pub mode: PartitionMode,
    pub template: Template,
    pub kind: TaskKind,
    pub n_classes: usize,
    pub symmetric: bool,
    /// Pseudotoken and word-copy rows.
    pub registry: PseudotokenRegistry,
    /// d × 2, row-major.
    pub head_weight: Vec<f32>,
    pub head_bias: Vec<f32>,
    /// Fingerprint of the backbone these rows were trained against.
    pub fingerprint: String,
}

impl TaskDelta {
    pub fn scoring(&self) -> Scoring {
        Scoring::for_task(self.n_classes, self.symmetric)
    }

    pub fn context<'a>(&'a self, vocab: &'a Vocabulary, max_seq: usize) -> RenderContext<'a> {
        RenderContext { template: &self.template, registry: &self.registry, vocab, max_seq }
    }

    pub fn head(&self) -> Result<(Tensor<f32>, Tensor<f32>)> {
        let d = self.registry.dim;
        Ok((Tensor::new(&[d, 2], self.head_weight.clone())?, Tensor::new(&[2], self.head_bias.clone())?))
    }

    /// Number of stored floats.
    pub fn parameter_count(&self) -> usize {
        self.registry.rows.len() + self.head_weight.len() + self.head_bias.len()
    }

    pub fn check_backbone<T: Scalar>(&self, backbone: &Model<T>) -> Result<()> {
        let fp = backbone.fingerprint();
        if fp != self.fingerprint {
            bail!(
                Compatibility,
                "delta for task {} was trained on backbone {}, loaded backbone is {}",
                self.task,
                short(&self.fingerprint),
                short(&fp)
            );
        }
        if self.registry.dim != backbone.config().d_model || self.registry.base as usize != backbone.config().vocab_size {
            bail!(Compatibility, "delta for task {} does not fit the backbone's embedding shape", self.task);
        }
        if self.registry.len() > backbone.config().pseudo_capacity {
            bail!(Compatibility, "delta for task {} has {} rows, capacity is {}", self.task, self.registry.len(), backbone.config().pseudo_capacity);
        }
        Ok(())
    }
}

fn short(fp: &str) -> &str {
    &fp[..fp.len().min(12)]
}

/// The backbone with a task's rows and head installed.
pub fn apply_delta(backbone: &Model<f32>, delta: &TaskDelta) -> Result<Model<f32>> {
    delta.check_backbone(backbone)?;
    let mut model = backbone.clone();
    model.load_pseudo_rows(&delta.registry)?;
    let (w, b) = delta.head()?;
    let l = model.layout().clone();
    model.params_mut()[l.head_weight] = w;
    model.params_mut()[l.head_bias] = b;
    Ok(model)
}

/// Mean cross-entropy of the entailment head on [CLS] against each
/// example's entail target.
pub fn entail_loss<'p, T: Scalar>(
    tape: &mut Tape<'p, T>,
    binder: &mut Binder<'p, T>,
    batch: &[&EntailmentExample],
) -> Result<NodeId> {
    let inputs: Vec<SequenceInput> = batch.iter().map(|e| SequenceInput::plain(e.ids.clone())).collect();
    let enc = encode_batch(tape, binder, &inputs, &[])?;
    let cls = enc.cls_rows(tape)?;
    let layout = binder.model().layout();
    let w = binder.node(tape, layout.head_weight);
    let b = binder.node(tape, layout.head_bias);
    let logits = tape.linear(cls, w, b)?;
    let targets: Vec<usize> = batch.iter().map(|e| e.target).collect();
    tape.cross_entropy(logits, &targets)
}

/// Entailment logits for each row, in chunks of `max_batch`, using the
/// model's own pseudo rows and head.
pub fn entail_logits_batch(model: &Model<f32>, rows: &[Vec<u32>], max_batch: usize) -> Result<Vec<[f64; 2]>> {
    let mut out = Vec::with_capacity(rows.len());
    for chunk in rows.chunks(max_batch.max(1)) {
        let mut tape = Tape::new();
        let mut binder = Binder::frozen(model);
        let inputs: Vec<SequenceInput> = chunk.iter().map(|r| SequenceInput::plain(r.clone())).collect();
        let enc = encode_batch(&mut tape, &mut binder, &inputs, &[])?;
        let cls = enc.cls_rows(&mut tape)?;
        let w = binder.node(&mut tape, model.layout().head_weight);
        let b = binder.node(&mut tape, model.layout().head_bias);
        let logits = tape.linear(cls, w, b)?;
        for r in 0..chunk.len() {
            let row = tape.value(logits).row(r);
            out.push([row[0] as f64, row[1] as f64]);
        }
    }
    Ok(out)
}

/// Predict every example with a model that already carries the task's
/// rows and head.
pub fn predict_examples(
    model: &Model<f32>,
    ctx: &RenderContext<'_>,
    scoring: Scoring,
    n_classes: usize,
    examples: &[LabeledExample],
    max_batch: usize,
) -> Result<Vec<Prediction>> {
    let mut rows = Vec::new();
    let mut spans = Vec::with_capacity(examples.len());
    for ex in examples {
        let rendered = render_request(ctx, scoring, n_classes, &ex.s1, ex.s2.as_deref())?;
        spans.push(rendered.len());
        rows.extend(rendered.into_iter().map(|r| r.ids));
    }
    let logits = entail_logits_batch(model, &rows, max_batch)?;
    let mut at = 0;
    Ok(spans
        .into_iter()
        .map(|n| {
            let p: Vec<f64> = logits[at..at + n].iter().map(|&l| entail_probability(l)).collect();
            at += n;
            decide(scoring, &p)
        })
        .collect())
}

/// Render a task's training examples: binary against the class-1
/// description, symmetric pairs, or one input per class.
pub fn render_for_training(
    ctx: &RenderContext<'_>,
    spec: &TaskSpec,
    examples: &[LabeledExample],
    symmetric: bool,
) -> Result<EntailmentSet> {
    if spec.n_classes > 2 {
        if symmetric {
            bail!(Config, "symmetric augmentation needs a binary task, {} has {} classes", spec.name, spec.n_classes);
        }
        let mut out = Vec::new();
        for ex in examples {
            out.extend(reformulate_multiclass(ctx, ex, spec.n_classes)?);
        }
        return Ok(EntailmentSet { examples: out, symmetric: false });
    }
    if symmetric {
        let p1 = ctx.template.class_description(1)?;
        let p_neg = ctx.template.class_description(0)?;
        let set = reformulate_set(ctx, examples, &p1)?;
        return symmetric_augment(ctx, &set, examples, spec.n_classes, &p1, &p_neg);
    }
    reformulate_set(ctx, examples, &ctx.template.primary_description())
}

/// Parameters on the entailment loss path: all but the masked-LM head and
/// pseudo rows the registry does not use.
fn entailment_params(model: &Model<f32>, registry: &PseudotokenRegistry) -> Result<BTreeSet<ParamId>> {
    let used: BTreeSet<ParamId> = registry.ids().map(|id| model.pseudo_param(id)).collect::<Result<_>>()?;
    Ok(model
        .infos()
        .iter()
        .enumerate()
        .filter(|(id, i)| match i.group {
            ParamGroup::MlmHead => false,
            ParamGroup::PseudoRow => used.contains(id),
            _ => true,
        })
        .map(|(id, _)| id)
        .collect())
}

fn template_matches(spec: &TaskSpec, template: &Template) -> Result<()> {
    let ok = matches!(
        (spec.kind, template.kind),
        (TaskKind::Single, TemplateKind::SingleSentence) | (TaskKind::Pair, TemplateKind::SentencePair)
    );
    if !ok {
        bail!(Config, "task {} is {:?} but its template is {:?}", spec.name, spec.kind, template.kind);
    }
    Ok(())
}

/// A few-shot task: its spec, template, and the pool fold ids refer to.
#[derive(Clone, Copy)]
pub struct FewShotTask<'a> {
    pub spec: &'a TaskSpec,
    pub template: &'a Template,
    pub pool: &'a [LabeledExample],
}

#[derive(Clone, Debug)]
pub struct FewShotOutcome {
    pub delta: TaskDelta,
    /// The fully fine-tuned model, in full mode only.
    pub model: Option<Model<f32>>,
    pub epoch_losses: Vec<f64>,
    /// Rendered examples per epoch.
    pub examples_per_epoch: usize,
    pub train_accuracy: f64,
}

/// Adapt `checkpoint` to one fold of a task. The fold seed drives
/// pseudotoken initialization and example order.
pub fn train_fewshot(
    checkpoint: &Checkpoint,
    task: FewShotTask<'_>,
    fold: &FoldSpec,
    mode: PartitionMode,
    hp: &Hyperparams,
    symmetric: bool,
) -> Result<FewShotOutcome> {
    checkpoint.verify_lineage()?;
    task.spec.validate()?;
    task.template.validate()?;
    template_matches(task.spec, task.template)?;
    let examples = fold_examples(task.pool, fold)?;
    let vocab = &checkpoint.vocab;
    let base_fp = checkpoint.fingerprint();

    let mut model = checkpoint.model.clone();
    let cfg = model.config().clone();
    let mut registry = PseudotokenRegistry::new(cfg.vocab_size, cfg.d_model);
    task.template.register(&mut registry, fold.seed, vocab, model.param(model.layout().vocab_embedding))?;
    if registry.len() > cfg.pseudo_capacity {
        bail!(Config, "template needs {} pseudotoken rows, capacity is {}", registry.len(), cfg.pseudo_capacity);
    }
    model.load_pseudo_rows(&registry)?;

    let partition = partition_parameters(&model, mode, &registry)?;
    let reachable = entailment_params(&model, &registry)?;
    let trainable: BTreeSet<ParamId> = partition.trainable.intersection(&reachable).copied().collect();

    let set = {
        let ctx = RenderContext { template: task.template, registry: &registry, vocab, max_seq: cfg.max_seq };
        render_for_training(&ctx, task.spec, &examples, symmetric)?
    };
    let epoch_losses = run_epochs(&mut model, &trainable, hp, set.examples.len(), fold.seed, |tape, binder, items| {
        let batch: Vec<&EntailmentExample> = items.iter().map(|&i| &set.examples[i]).collect();
        entail_loss(tape, binder, &batch)
    })?;

    for (i, e) in registry.entries.clone().iter().enumerate() {
        let row = model.param(model.pseudo_param(e.id)?).data();
        registry.rows[i * cfg.d_model..(i + 1) * cfg.d_model].copy_from_slice(row);
    }
    let fingerprint = model.fingerprint();
    if mode != PartitionMode::Full && fingerprint != base_fp {
        bail!(State, "frozen backbone changed during {mode} training");
    }
    let l = model.layout();
    let delta = TaskDelta {
        task: task.spec.name.clone(),
        mode,
        template: task.template.clone(),
        kind: task.spec.kind,
        n_classes: task.spec.n_classes,
        symmetric,
        head_weight: model.param(l.head_weight).data().to_vec(),
        head_bias: model.param(l.head_bias).data().to_vec(),
        registry,
        fingerprint,
    };
    let ctx = delta.context(vocab, cfg.max_seq);
    let preds = predict_examples(&model, &ctx, delta.scoring(), delta.n_classes, &examples, 64)?;
    let correct = preds.iter().zip(&examples).filter(|(p, e)| p.class == e.label).count();
    let train_accuracy = 100.0 * correct as f64 / examples.len() as f64;
    Ok(FewShotOutcome {
        model: (mode == PartitionMode::Full).then_some(model),
        delta,
        epoch_losses,
        examples_per_epoch: set.examples.len(),
        train_accuracy,
    })
}

#[derive(Clone, Debug)]
pub struct IntermediateOutcome {
    pub checkpoint: Checkpoint,
    pub epoch_losses: Vec<f64>,
    /// Held-out accuracy in percent.
    pub test_accuracy: f64,
}

/// Fine-tune every backbone parameter and the head on `[CLS] premise [SEP]
/// hypothesis`, target = entail label. Lineage gains an "intermediate"
/// stage.
pub fn intermediate_train(base: &Checkpoint, nli: &Dataset, hp: &Hyperparams) -> Result<IntermediateOutcome> {
    base.verify_lineage()?;
    if nli.spec.kind != TaskKind::Pair || nli.spec.n_classes != 2 {
        bail!(Config, "intermediate training needs a binary pair task, got {}", nli.spec.name);
    }
    let mut model = base.model.clone();
    let cfg = model.config().clone();
    let template = Template::pair(0);
    let registry = PseudotokenRegistry::new(cfg.vocab_size, cfg.d_model);
    let spec = nli.spec.clone();
    let set = {
        let ctx = RenderContext { template: &template, registry: &registry, vocab: &base.vocab, max_seq: cfg.max_seq };
        render_for_training(&ctx, &spec, nli.train(), false)?
    };
    let trainable = entailment_params(&model, &registry)?;
    let epoch_losses = run_epochs(&mut model, &trainable, hp, set.examples.len(), hp.seed, |tape, binder, items| {
        let batch: Vec<&EntailmentExample> = items.iter().map(|&i| &set.examples[i]).collect();
        entail_loss(tape, binder, &batch)
    })?;
    let ctx = RenderContext { template: &template, registry: &registry, vocab: &base.vocab, max_seq: cfg.max_seq };
    let preds = predict_examples(&model, &ctx, Scoring::Binary, 2, nli.test(), 64)?;
    let correct = preds.iter().zip(nli.test()).filter(|(p, e)| p.class == e.label).count();
    let test_accuracy = 100.0 * correct as f64 / nli.test().len().max(1) as f64;
    let mut checkpoint = Checkpoint { model, vocab: base.vocab.clone(), lineage: base.lineage.clone() };
    checkpoint.record("intermediate", hp.seed);
    Ok(IntermediateOutcome { checkpoint, epoch_losses, test_accuracy })
}
