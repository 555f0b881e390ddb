//! Multi-task inference over one frozen backbone.
//!
//! Every task's pseudotokens occupy the same id range, so a mixed batch
//! cannot read them from the model's own rows. Instead each row of the batch
//! substitutes its task's embeddings at the recorded positions, the whole
//! batch is encoded once, and each task's head is applied to its own rows.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::sync::Arc;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::encoder::{encode_batch, Binder, EncoderConfig, Model, RowOverride, SequenceInput};
use crate::entailment::entail_probability;
use crate::error::{bail, Error, Result};
use crate::tape::Tape;
use crate::trainer::{apply_delta, decide, entail_logits_batch, render_request, Scoring, TaskDelta};
use crate::vocab::Vocabulary;

/// Registered task deltas for one backbone.
#[derive(Clone, Debug, PartialEq)]
pub struct DeltaStore {
    fingerprint: String,
    config: EncoderConfig,
    tasks: BTreeMap<String, Arc<TaskDelta>>,
}

impl DeltaStore {
    pub fn new(backbone: &Model<f32>) -> Self {
        Self { fingerprint: backbone.fingerprint(), config: backbone.config().clone(), tasks: BTreeMap::new() }
    }

    pub fn fingerprint(&self) -> &str {
        &self.fingerprint
    }

    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }

    pub fn tasks(&self) -> impl Iterator<Item = &str> {
        self.tasks.keys().map(String::as_str)
    }

    pub fn get(&self, task: &str) -> Option<&Arc<TaskDelta>> {
        self.tasks.get(task)
    }

    /// Add a task. An existing name is a conflict unless `replace` is set,
    /// in which case the previous delta is returned.
    pub fn register_task(&mut self, delta: TaskDelta, replace: bool) -> Result<Option<Arc<TaskDelta>>> {
        if delta.fingerprint != self.fingerprint {
            bail!(
                Compatibility,
                "delta for task {} belongs to backbone {}, store serves {}",
                delta.task,
                short(&delta.fingerprint),
                short(&self.fingerprint)
            );
        }
        let reg = &delta.registry;
        if reg.dim != self.config.d_model || reg.base as usize != self.config.vocab_size {
            bail!(Compatibility, "delta for task {} does not fit the backbone's embedding shape", delta.task);
        }
        if reg.len() > self.config.pseudo_capacity || reg.rows.len() != reg.len() * reg.dim {
            bail!(Compatibility, "delta for task {} has an invalid pseudotoken table", delta.task);
        }
        if delta.head_weight.len() != 2 * reg.dim || delta.head_bias.len() != 2 {
            bail!(Compatibility, "delta for task {} has a head of the wrong shape", delta.task);
        }
        if !replace && self.tasks.contains_key(&delta.task) {
            bail!(Conflict, "task {} is already registered", delta.task);
        }
        Ok(self.tasks.insert(delta.task.clone(), Arc::new(delta)))
    }

    pub fn remove(&mut self, task: &str) -> Option<Arc<TaskDelta>> {
        self.tasks.remove(task)
    }

    fn lookup(&self, task: &str) -> Result<&Arc<TaskDelta>> {
        match self.tasks.get(task) {
            Some(d) => Ok(d),
            None => bail!(Input, "task {task:?} is not registered"),
        }
    }

    fn check(&self, backbone: &Model<f32>) -> Result<()> {
        let fp = backbone.fingerprint();
        if fp != self.fingerprint {
            bail!(Compatibility, "store serves backbone {}, given {}", short(&self.fingerprint), short(&fp));
        }
        Ok(())
    }
}

fn short(fp: &str) -> &str {
    &fp[..fp.len().min(12)]
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InferenceRequest {
    pub id: u64,
    pub task: String,
    pub s1: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub s2: Option<String>,
}

/// A scored request.
#[derive(Clone, Debug, PartialEq)]
pub struct Scored {
    pub class: usize,
    /// Per-class probabilities as decided by the task's scoring rule.
    pub probabilities: Vec<f64>,
    /// Raw head logits of every rendered row.
    pub logits: Vec<[f64; 2]>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct InferenceResult {
    pub id: u64,
    pub task: String,
    pub outcome: Result<Scored>,
}

struct Job {
    task: usize,
    ids: Vec<u32>,
}

fn scored(scoring: Scoring, logits: Vec<[f64; 2]>) -> Scored {
    let p: Vec<f64> = logits.iter().map(|&l| entail_probability(l)).collect();
    let pred = decide(scoring, &p);
    Scored { class: pred.class, probabilities: pred.probabilities, logits }
}

/// Score mixed-task requests in shared forward passes of at most
/// `max_batch` rendered rows. Failures are reported per request; results
/// follow request order.
pub fn batch_infer(
    backbone: &Model<f32>,
    vocab: &Vocabulary,
    store: &DeltaStore,
    requests: &[InferenceRequest],
    max_batch: usize,
) -> Result<Vec<InferenceResult>> {
    store.check(backbone)?;
    let max_seq = backbone.config().max_seq;
    let mut deltas: Vec<Arc<TaskDelta>> = Vec::new();
    let mut task_index: BTreeMap<&str, usize> = BTreeMap::new();
    let mut outcomes: Vec<Option<Result<Scored>>> = Vec::with_capacity(requests.len());
    let mut spans = Vec::with_capacity(requests.len());
    let mut jobs = Vec::new();

    for req in requests {
        let rendered = store.lookup(&req.task).and_then(|d| {
            let ctx = d.context(vocab, max_seq);
            render_request(&ctx, d.scoring(), d.n_classes, &req.s1, req.s2.as_deref()).map(|rows| (d, rows))
        });
        match rendered {
            Ok((d, rows)) => {
                let t = *task_index.entry(d.task.as_str()).or_insert_with(|| {
                    deltas.push(d.clone());
                    deltas.len() - 1
                });
                spans.push(jobs.len()..jobs.len() + rows.len());
                jobs.extend(rows.into_iter().map(|row| Job { task: t, ids: row.ids }));
                outcomes.push(None);
            }
            Err(e) => {
                spans.push(0..0);
                outcomes.push(Some(Err(e)));
            }
        }
    }

    let mut logits = Vec::with_capacity(jobs.len());
    for chunk in jobs.chunks(max_batch.max(1)) {
        logits.extend(encode_chunk(backbone, &deltas, chunk)?);
    }

    if backbone.fingerprint() != store.fingerprint {
        bail!(State, "backbone changed during inference");
    }
    Ok(requests
        .iter()
        .zip(outcomes)
        .zip(spans)
        .map(|((req, outcome), span)| {
            let outcome = outcome.unwrap_or_else(|| {
                let d = &deltas[jobs[span.start].task];
                Ok(scored(d.scoring(), logits[span].to_vec()))
            });
            InferenceResult { id: req.id, task: req.task.clone(), outcome }
        })
        .collect())
}

/// One shared encode; every task's rows become a constant source and its
/// head is applied once to the [CLS] rows of that task.
fn encode_chunk(backbone: &Model<f32>, deltas: &[Arc<TaskDelta>], chunk: &[Job]) -> Result<Vec<[f64; 2]>> {
    let mut tape = Tape::new();
    let mut binder = Binder::frozen(backbone);
    let mut extra = Vec::new();
    let mut source_of: BTreeMap<usize, usize> = BTreeMap::new();
    let mut inputs = Vec::with_capacity(chunk.len());
    for job in chunk {
        let reg = &deltas[job.task].registry;
        let mut overrides = Vec::new();
        for (pos, &id) in job.ids.iter().enumerate() {
            if id < reg.base {
                continue;
            }
            if !reg.contains(id) {
                bail!(Index, "rendered id {id} is not a pseudotoken of task {}", deltas[job.task].task);
            }
            let source = match source_of.get(&job.task) {
                Some(&s) => s,
                None => {
                    let rows = reg.rows_tensor::<f32>().ok_or_else(|| Error::State("empty pseudotoken table".into()))?;
                    extra.push(tape.constant(rows));
                    source_of.insert(job.task, extra.len() - 1);
                    extra.len() - 1
                }
            };
            overrides.push(RowOverride { position: pos, source, row: id - reg.base });
        }
        inputs.push(SequenceInput { ids: job.ids.clone(), overrides });
    }
    let enc = encode_batch(&mut tape, &mut binder, &inputs, &extra)?;
    let cls = enc.cls_rows(&mut tape)?;

    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, job) in chunk.iter().enumerate() {
        groups.entry(job.task).or_default().push(i);
    }
    let mut out = alloc::vec![[0.0; 2]; chunk.len()];
    for (task, rows) in groups {
        let (w, b) = deltas[task].head()?;
        let w = tape.constant(w);
        let b = tape.constant(b);
        let picks: Vec<(u32, u32)> = rows.iter().map(|&i| (0, i as u32)).collect();
        let x = tape.gather(&[cls], &picks)?;
        let l = tape.linear(x, w, b)?;
        for (k, &i) in rows.iter().enumerate() {
            let row = tape.value(l).row(k);
            out[i] = [row[0] as f64, row[1] as f64];
        }
    }
    Ok(out)
}

/// Reference path: each task's delta installed into its own copy of the
/// backbone, one row per forward pass, tasks taken one at a time.
pub fn sequential_infer(
    backbone: &Model<f32>,
    vocab: &Vocabulary,
    store: &DeltaStore,
    requests: &[InferenceRequest],
) -> Result<Vec<InferenceResult>> {
    store.check(backbone)?;
    let max_seq = backbone.config().max_seq;
    let mut by_task: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (r, req) in requests.iter().enumerate() {
        by_task.entry(req.task.as_str()).or_default().push(r);
    }
    let mut outcomes: Vec<Option<Result<Scored>>> = alloc::vec![None; requests.len()];
    for (task, members) in by_task {
        let delta = match store.lookup(task) {
            Ok(d) => d,
            Err(e) => {
                for r in members {
                    outcomes[r] = Some(Err(e.clone()));
                }
                continue;
            }
        };
        let model = apply_delta(backbone, delta)?;
        let ctx = delta.context(vocab, max_seq);
        for r in members {
            let req = &requests[r];
            let outcome = render_request(&ctx, delta.scoring(), delta.n_classes, &req.s1, req.s2.as_deref())
                .and_then(|rows| {
                    let ids: Vec<Vec<u32>> = rows.into_iter().map(|row| row.ids).collect();
                    entail_logits_batch(&model, &ids, 1)
                })
                .map(|logits| scored(delta.scoring(), logits));
            outcomes[r] = Some(outcome);
        }
    }
    if backbone.fingerprint() != store.fingerprint {
        bail!(State, "backbone changed during inference");
    }
    Ok(requests
        .iter()
        .zip(outcomes)
        .map(|(req, o)| InferenceResult { id: req.id, task: req.task.clone(), outcome: o.expect("every request visited") })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{lexicon_words, TaskKind};
    use crate::entailment::Template;
    use crate::partition::PartitionMode;
    use crate::rng;
    use crate::vocab::PseudotokenRegistry;
    use alloc::format;
    use alloc::string::ToString;
    use proptest::prelude::*;
    use rand::Rng;

    fn backbone() -> (Model<f32>, Vocabulary) {
        let vocab = Vocabulary::build(&lexicon_words(), 256).unwrap();
        let cfg = EncoderConfig {
            d_model: 16,
            n_layers: 2,
            n_heads: 2,
            d_ff: 32,
            max_seq: 24,
            vocab_size: vocab.len(),
            pseudo_capacity: 8,
            ..EncoderConfig::default()
        };
        (Model::init(&cfg, 3).unwrap(), vocab)
    }

    #[allow(clippy::too_many_arguments)]
    fn delta(model: &Model<f32>, vocab: &Vocabulary, name: &str, template: Template, kind: TaskKind, n_classes: usize, symmetric: bool, seed: u64) -> TaskDelta {
        let cfg = model.config();
        let mut registry = PseudotokenRegistry::new(cfg.vocab_size, cfg.d_model);
        template.register(&mut registry, seed, vocab, model.param(model.layout().vocab_embedding)).unwrap();
        let mut r = rng::seeded(seed);
        for v in registry.rows.iter_mut() {
            *v += r.random_range(-0.5..0.5);
        }
        TaskDelta {
            task: name.to_string(),
            mode: PartitionMode::Efficient,
            template,
            kind,
            n_classes,
            symmetric,
            registry,
            head_weight: (0..2 * cfg.d_model).map(|_| r.random_range(-1.0..1.0)).collect(),
            head_bias: alloc::vec![r.random_range(-0.1..0.1), r.random_range(-0.1..0.1)],
            fingerprint: model.fingerprint(),
        }
    }

    fn store() -> (Model<f32>, Vocabulary, DeltaStore) {
        let (model, vocab) = backbone();
        let mut store = DeltaStore::new(&model);
        let tasks = [
            delta(&model, &vocab, "sentiment", Template::single("it was", "great", 2), TaskKind::Single, 2, false, 1),
            delta(
                &model,
                &vocab,
                "sentiment-sym",
                Template::single("it was", "great", 1).with_class_descriptions(&["terrible", "great"]),
                TaskKind::Single,
                2,
                true,
                2,
            ),
            delta(&model, &vocab, "pairs", Template::pair(3), TaskKind::Pair, 2, false, 3),
            delta(
                &model,
                &vocab,
                "three-way",
                Template::single("overall", "good", 0).with_class_descriptions(&["bad", "fine", "great"]),
                TaskKind::Single,
                3,
                false,
                4,
            ),
        ];
        for t in tasks {
            store.register_task(t, false).unwrap();
        }
        (model, vocab, store)
    }

    const TASKS: [&str; 4] = ["sentiment", "sentiment-sym", "pairs", "three-way"];
    const SENTENCES: [&str; 4] = ["the movie was great", "honestly , the plot was really dull", "it was fine", "the acting was superb and the ending was weak"];

    fn request(id: u64, task: usize, a: usize, b: usize) -> InferenceRequest {
        let task = TASKS[task % TASKS.len()];
        InferenceRequest {
            id,
            task: task.to_string(),
            s1: SENTENCES[a % SENTENCES.len()].to_string(),
            s2: (task == "pairs").then(|| SENTENCES[b % SENTENCES.len()].to_string()),
        }
    }

    fn close(a: &InferenceResult, b: &InferenceResult, tol: f64) -> bool {
        match (&a.outcome, &b.outcome) {
            (Ok(x), Ok(y)) => {
                x.class == y.class
                    && x.logits.len() == y.logits.len()
                    && x.logits.iter().zip(&y.logits).all(|(p, q)| (p[0] - q[0]).abs() <= tol && (p[1] - q[1]).abs() <= tol)
            }
            (Err(x), Err(y)) => x == y,
            _ => false,
        }
    }

    #[test]
    fn register_rejects_foreign_and_duplicate_deltas() {
        let (model, vocab, mut store) = store();
        let again = delta(&model, &vocab, "pairs", Template::pair(1), TaskKind::Pair, 2, false, 9);
        assert!(matches!(store.register_task(again.clone(), false), Err(Error::Conflict(_))));
        assert!(store.register_task(again, true).unwrap().is_some());
        let mut foreign = delta(&model, &vocab, "other", Template::pair(1), TaskKind::Pair, 2, false, 9);
        foreign.fingerprint = "0".repeat(64);
        assert!(matches!(store.register_task(foreign, false), Err(Error::Compatibility(_))));
        let mut other = model.clone();
        let pos = other.layout().position;
        other.params_mut()[pos].data_mut()[0] += 1.0;
        assert!(matches!(batch_infer(&other, &vocab, &store, &[], 4), Err(Error::Compatibility(_))));
    }

    #[test]
    fn unregistered_task_fails_alone() {
        let (model, vocab, store) = store();
        let mut reqs = alloc::vec![request(7, 0, 0, 0), request(8, 2, 1, 2)];
        reqs.insert(1, InferenceRequest { id: 9, task: "missing".into(), s1: "it was fine".into(), s2: None });
        let out = batch_infer(&model, &vocab, &store, &reqs, 8).unwrap();
        assert_eq!(out.iter().map(|r| r.id).collect::<Vec<_>>(), [7, 9, 8]);
        assert!(out[0].outcome.is_ok() && out[2].outcome.is_ok());
        assert!(matches!(out[1].outcome, Err(Error::Input(_))));
    }

    #[test]
    fn multiclass_expands_to_one_row_per_class() {
        let (model, vocab, store) = store();
        let out = batch_infer(&model, &vocab, &store, &[request(1, 3, 0, 0), request(2, 0, 0, 0)], 8).unwrap();
        let three = out[0].outcome.as_ref().unwrap();
        assert_eq!(three.logits.len(), 3);
        assert_eq!(three.probabilities.len(), 3);
        assert_eq!(out[1].outcome.as_ref().unwrap().logits.len(), 1);
    }

    #[test]
    fn single_request_matches_direct_prediction() {
        let (model, vocab, store) = store();
        let req = request(1, 1, 3, 0);
        let d = store.get("sentiment-sym").unwrap();
        let installed = apply_delta(&model, d).unwrap();
        let ctx = d.context(&vocab, model.config().max_seq);
        let rows: Vec<Vec<u32>> =
            render_request(&ctx, d.scoring(), 2, &req.s1, None).unwrap().into_iter().map(|r| r.ids).collect();
        let direct = entail_logits_batch(&installed, &rows, 4).unwrap();
        let out = batch_infer(&model, &vocab, &store, &[req], 1).unwrap();
        let got = &out[0].outcome.as_ref().unwrap().logits;
        for (a, b) in got.iter().zip(&direct) {
            assert!((a[0] - b[0]).abs() < 1e-5 && (a[1] - b[1]).abs() < 1e-5);
        }
    }

    #[test]
    fn empty_and_repeated_calls() {
        let (model, vocab, store) = store();
        assert!(sequential_infer(&model, &vocab, &store, &[]).unwrap().is_empty());
        let reqs: Vec<_> = (0..6).map(|i| request(i, i as usize, i as usize, 1)).collect();
        let a = batch_infer(&model, &vocab, &store, &reqs, 3).unwrap();
        let b = batch_infer(&model, &vocab, &store, &reqs, 3).unwrap();
        assert_eq!(a, b);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn batched_equals_sequential(
            picks in proptest::collection::vec((0usize..5, 0usize..4, 0usize..4), 1..12),
            max_batch in 1usize..9,
        ) {
            let (model, vocab, store) = store();
            let reqs: Vec<InferenceRequest> = picks
                .iter()
                .enumerate()
                .map(|(i, &(t, a, b))| {
                    if t == 4 {
                        InferenceRequest { id: i as u64, task: format!("gone{i}"), s1: "it was".into(), s2: None }
                    } else {
                        request(i as u64, t, a, b)
                    }
                })
                .collect();
            let batched = batch_infer(&model, &vocab, &store, &reqs, max_batch).unwrap();
            let seq = sequential_infer(&model, &vocab, &store, &reqs).unwrap();
            prop_assert_eq!(batched.len(), reqs.len());
            for (x, y) in batched.iter().zip(&seq) {
                prop_assert_eq!(x.id, y.id);
                prop_assert!(close(x, y, 1e-5), "{:?} vs {:?}", x, y);
            }
        }

        #[test]
        fn removing_a_request_leaves_others_unchanged(
            picks in proptest::collection::vec((0usize..4, 0usize..4, 0usize..4), 2..10),
            drop in 0usize..10,
        ) {
            let (model, vocab, store) = store();
            let reqs: Vec<InferenceRequest> =
                picks.iter().enumerate().map(|(i, &(t, a, b))| request(i as u64, t, a, b)).collect();
            let drop = drop % reqs.len();
            let full = batch_infer(&model, &vocab, &store, &reqs, 64).unwrap();
            let mut fewer = reqs.clone();
            fewer.remove(drop);
            let part = batch_infer(&model, &vocab, &store, &fewer, 64).unwrap();
            let kept: Vec<&InferenceResult> = full.iter().enumerate().filter(|&(i, _)| i != drop).map(|(_, r)| r).collect();
            for (x, y) in kept.into_iter().zip(&part) {
                prop_assert!(close(x, y, 1e-6));
            }
        }
    }
}
