//! A task store shared between inference threads, and the request/result
//! JSONL formats.

use std::fs;
use std::path::Path;
use std::sync::{Arc, PoisonError, RwLock};

use entail_core::encoder::Model;
use entail_core::serve::{batch_infer, DeltaStore, InferenceRequest, InferenceResult};
use entail_core::trainer::TaskDelta;
use entail_core::vocab::Vocabulary;
use serde::{Deserialize, Serialize};

use crate::error::{format, io, Result};

/// Readers take a snapshot and keep it for the whole batch; registration
/// builds a new store and swaps it in, so a batch never sees a mix.
pub struct SharedStore {
    inner: RwLock<Arc<DeltaStore>>,
}

impl SharedStore {
    pub fn new(store: DeltaStore) -> Self {
        Self { inner: RwLock::new(Arc::new(store)) }
    }

    pub fn snapshot(&self) -> Arc<DeltaStore> {
        self.inner.read().unwrap_or_else(PoisonError::into_inner).clone()
    }

    pub fn register(&self, delta: TaskDelta, replace: bool) -> Result<()> {
        let mut guard = self.inner.write().unwrap_or_else(PoisonError::into_inner);
        let mut next = DeltaStore::clone(&guard);
        next.register_task(delta, replace)?;
        *guard = Arc::new(next);
        Ok(())
    }

    pub fn infer(
        &self,
        backbone: &Model<f32>,
        vocab: &Vocabulary,
        requests: &[InferenceRequest],
        max_batch: usize,
    ) -> Result<Vec<InferenceResult>> {
        let store = self.snapshot();
        Ok(batch_infer(backbone, vocab, &store, requests, max_batch)?)
    }
}

/// One output line: a prediction or the reason there is none.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultLine {
    pub id: u64,
    pub task: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub probabilities: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl From<&InferenceResult> for ResultLine {
    fn from(r: &InferenceResult) -> Self {
        match &r.outcome {
            Ok(s) => Self {
                id: r.id,
                task: r.task.clone(),
                class: Some(s.class),
                probabilities: Some(s.probabilities.clone()),
                error: None,
            },
            Err(e) => Self { id: r.id, task: r.task.clone(), class: None, probabilities: None, error: Some(e.to_string()) },
        }
    }
}

pub fn parse_requests(text: &str) -> Result<Vec<InferenceRequest>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| format(format!("line {}: {e}", i + 1))))
        .collect()
}

pub fn read_requests(path: &Path) -> Result<Vec<InferenceRequest>> {
    parse_requests(&fs::read_to_string(path).map_err(io(path))?)
}

pub fn results_jsonl(results: &[InferenceResult]) -> String {
    let mut out = String::new();
    for r in results {
        out.push_str(&serde_json::to_string(&ResultLine::from(r)).expect("serializable result"));
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use entail_core::corpus::{lexicon_words, TaskKind};
    use entail_core::encoder::EncoderConfig;
    use entail_core::entailment::Template;
    use entail_core::partition::PartitionMode;
    use entail_core::vocab::PseudotokenRegistry;

    fn setup() -> (Model<f32>, Vocabulary, SharedStore) {
        let vocab = Vocabulary::build(&lexicon_words(), 256).unwrap();
        let cfg = EncoderConfig { d_model: 8, n_layers: 1, n_heads: 2, d_ff: 16, max_seq: 24, vocab_size: vocab.len(), pseudo_capacity: 4, ..EncoderConfig::default() };
        let model = Model::init(&cfg, 1).unwrap();
        let store = SharedStore::new(DeltaStore::new(&model));
        (model, vocab, store)
    }

    fn delta(model: &Model<f32>, bias: f32) -> TaskDelta {
        TaskDelta {
            task: "pairs".into(),
            mode: PartitionMode::Efficient,
            template: Template::pair(0),
            kind: TaskKind::Pair,
            n_classes: 2,
            symmetric: false,
            registry: PseudotokenRegistry::new(model.config().vocab_size, 8),
            head_weight: vec![0.0; 16],
            head_bias: vec![0.0, bias],
            fingerprint: model.fingerprint(),
        }
    }

    #[test]
    fn replacement_is_seen_by_new_snapshots_only() {
        let (model, vocab, store) = setup();
        store.register(delta(&model, 5.0), false).unwrap();
        let before = store.snapshot();
        store.register(delta(&model, -5.0), true).unwrap();
        let req = [InferenceRequest { id: 1, task: "pairs".into(), s1: "it was great".into(), s2: Some("it was fine".into()) }];
        let old = batch_infer(&model, &vocab, &before, &req, 4).unwrap();
        let new = store.infer(&model, &vocab, &req, 4).unwrap();
        assert_eq!(old[0].outcome.as_ref().unwrap().class, 1);
        assert_eq!(new[0].outcome.as_ref().unwrap().class, 0);
    }

    #[test]
    fn concurrent_readers_never_see_a_mix() {
        let (model, vocab, store) = setup();
        store.register(delta(&model, 5.0), false).unwrap();
        let req: Vec<InferenceRequest> = (0..6)
            .map(|i| InferenceRequest { id: i, task: "pairs".into(), s1: "the plot was dull".into(), s2: Some("it was".into()) })
            .collect();
        std::thread::scope(|s| {
            for _ in 0..3 {
                s.spawn(|| {
                    for _ in 0..20 {
                        let out = store.infer(&model, &vocab, &req, 2).unwrap();
                        let classes: Vec<usize> = out.iter().map(|r| r.outcome.as_ref().unwrap().class).collect();
                        assert!(classes.iter().all(|&c| c == classes[0]));
                    }
                });
            }
            s.spawn(|| {
                for i in 0..40 {
                    let bias = if i % 2 == 0 { -5.0 } else { 5.0 };
                    store.register(delta(&model, bias), true).unwrap();
                }
            });
        });
    }

    #[test]
    fn request_lines() {
        let reqs = parse_requests("{\"id\":3,\"task\":\"a\",\"s1\":\"x\"}\n\n{\"id\":4,\"task\":\"b\",\"s1\":\"x\",\"s2\":\"y\"}\n").unwrap();
        assert_eq!(reqs.len(), 2);
        assert_eq!(reqs[1].s2.as_deref(), Some("y"));
        assert!(parse_requests("{\"id\":1}\n").is_err());
    }
}
