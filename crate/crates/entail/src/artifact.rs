//! Checkpoint and delta directories: `manifest.json` plus `weights.bin`,
//! little-endian f32 tensors concatenated in manifest order.

use std::fs;
use std::path::Path;

use entail_core::corpus::TaskKind;
use entail_core::encoder::{EncoderConfig, Model};
use entail_core::entailment::Template;
use entail_core::partition::PartitionMode;
use entail_core::tensor::Tensor;
use entail_core::trainer::{Checkpoint, LineageEntry, TaskDelta};
use entail_core::vocab::{PseudotokenEntry, PseudotokenRegistry, Vocabulary};
use serde::{Deserialize, Serialize};

use crate::error::{format, io, Result};

pub const FORMAT_VERSION: u32 = 1;
pub const TOKENIZER: &str = "lowercase-words";
pub const MANIFEST: &str = "manifest.json";
pub const WEIGHTS: &str = "weights.bin";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Offset into weights.bin, in f32 elements.
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Contents {
    Checkpoint {
        config: EncoderConfig,
        tokenizer: String,
        vocab: Vocabulary,
        lineage: Vec<LineageEntry>,
        fingerprint: String,
    },
    Delta {
        task: String,
        mode: PartitionMode,
        template: Template,
        task_kind: TaskKind,
        n_classes: usize,
        symmetric: bool,
        base: u32,
        dim: usize,
        entries: Vec<PseudotokenEntry>,
        fingerprint: String,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    #[serde(flatten)]
    pub contents: Contents,
    pub tensors: Vec<TensorEntry>,
}

fn write_dir(dir: &Path, manifest: &Manifest, tensors: &[&[f32]]) -> Result<()> {
    fs::create_dir_all(dir).map_err(io(dir))?;
    let mut blob = Vec::with_capacity(tensors.iter().map(|t| t.len() * 4).sum());
    for t in tensors {
        for v in *t {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    let weights = dir.join(WEIGHTS);
    fs::write(&weights, blob).map_err(io(&weights))?;
    crate::write_json(&dir.join(MANIFEST), manifest)
}

fn index<'a>(entries: impl IntoIterator<Item = (String, &'a [usize])>) -> Vec<TensorEntry> {
    let mut offset = 0;
    entries
        .into_iter()
        .map(|(name, shape)| {
            let e = TensorEntry { name, shape: shape.to_vec(), offset };
            offset += shape.iter().product::<usize>();
            e
        })
        .collect()
}

/// Read and validate a directory. Nothing is returned unless the blob
/// matches the tensor index exactly.
fn read_dir(dir: &Path) -> Result<(Manifest, Vec<Vec<f32>>)> {
    let manifest: Manifest = crate::read_json(&dir.join(MANIFEST))?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(format(format!(
            "{} has format version {}, expected {FORMAT_VERSION}",
            dir.display(),
            manifest.format_version
        )));
    }
    let weights = dir.join(WEIGHTS);
    let bytes = fs::read(&weights).map_err(io(&weights))?;
    let expected: usize = manifest.tensors.iter().map(|t| t.shape.iter().product::<usize>()).sum();
    if bytes.len() != expected * 4 {
        return Err(format(format!(
            "{} holds {} bytes, the manifest's tensors need {} ({} floats)",
            weights.display(),
            bytes.len(),
            expected * 4,
            expected
        )));
    }
    let mut at = 0;
    let mut out = Vec::with_capacity(manifest.tensors.len());
    for t in &manifest.tensors {
        let n: usize = t.shape.iter().product();
        if t.offset != at {
            return Err(format(format!("tensor {} starts at {}, expected {at}", t.name, t.offset)));
        }
        let data = bytes[at * 4..(at + n) * 4]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        out.push(data);
        at += n;
    }
    Ok((manifest, out))
}

pub fn save_checkpoint(checkpoint: &Checkpoint, dir: &Path) -> Result<()> {
    let model = &checkpoint.model;
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        contents: Contents::Checkpoint {
            config: model.config().clone(),
            tokenizer: TOKENIZER.into(),
            vocab: checkpoint.vocab.clone(),
            lineage: checkpoint.lineage.clone(),
            fingerprint: checkpoint.fingerprint(),
        },
        tensors: index(model.infos().iter().map(|i| (i.name.clone(), i.shape.as_slice()))),
    };
    let data: Vec<&[f32]> = model.params().iter().map(|p| p.data()).collect();
    write_dir(dir, &manifest, &data)
}

pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint> {
    let (manifest, data) = read_dir(dir)?;
    let Contents::Checkpoint { config, tokenizer, vocab, lineage, fingerprint } = manifest.contents else {
        return Err(format(format!("{} is not a checkpoint", dir.display())));
    };
    if tokenizer != TOKENIZER {
        return Err(format(format!("checkpoint uses tokenizer {tokenizer:?}, this build reads {TOKENIZER:?}")));
    }
    let params = manifest
        .tensors
        .iter()
        .zip(data)
        .map(|(t, d)| Tensor::new(&t.shape, d))
        .collect::<entail_core::Result<Vec<_>>>()?;
    let model = Model::from_parts(&config, params)?;
    let mut checkpoint = Checkpoint::new(model, vocab).map_err(|e| format(e.to_string()))?;
    if checkpoint.fingerprint() != fingerprint {
        return Err(format(format!("{} weights do not match the recorded fingerprint", dir.display())));
    }
    checkpoint.lineage = lineage;
    Ok(checkpoint)
}

pub fn save_delta(delta: &TaskDelta, dir: &Path) -> Result<()> {
    let reg = &delta.registry;
    let rows_shape = [reg.len(), reg.dim];
    let head_shape = [reg.dim, 2];
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        contents: Contents::Delta {
            task: delta.task.clone(),
            mode: delta.mode,
            template: delta.template.clone(),
            task_kind: delta.kind,
            n_classes: delta.n_classes,
            symmetric: delta.symmetric,
            base: reg.base,
            dim: reg.dim,
            entries: reg.entries.clone(),
            fingerprint: delta.fingerprint.clone(),
        },
        tensors: index([
            ("pseudotokens".to_string(), &rows_shape[..]),
            ("head_weight".to_string(), &head_shape[..]),
            ("head_bias".to_string(), &[2][..]),
        ]),
    };
    write_dir(dir, &manifest, &[&reg.rows, &delta.head_weight, &delta.head_bias])
}

pub fn load_delta(dir: &Path) -> Result<TaskDelta> {
    let (manifest, data) = read_dir(dir)?;
    let Contents::Delta { task, mode, template, task_kind, n_classes, symmetric, base, dim, entries, fingerprint } =
        manifest.contents
    else {
        return Err(format(format!("{} is not a delta", dir.display())));
    };
    let shapes: Vec<&[usize]> = manifest.tensors.iter().map(|t| t.shape.as_slice()).collect();
    let want: [&[usize]; 3] = [&[entries.len(), dim], &[dim, 2], &[2]];
    if shapes != want {
        return Err(format(format!("delta tensors have shapes {shapes:?}, expected {want:?}")));
    }
    let mut data = data.into_iter();
    let (rows, head_weight, head_bias) = (data.next().unwrap(), data.next().unwrap(), data.next().unwrap());
    Ok(TaskDelta {
        task,
        mode,
        template,
        kind: task_kind,
        n_classes,
        symmetric,
        registry: PseudotokenRegistry { base, dim, entries, rows },
        head_weight,
        head_bias,
        fingerprint,
    })
}

/// Total bytes of the files in an artifact directory.
pub fn artifact_size(dir: &Path) -> Result<u64> {
    let mut total = 0;
    for name in [MANIFEST, WEIGHTS] {
        let p = dir.join(name);
        total += fs::metadata(&p).map_err(io(&p))?.len();
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use entail_core::corpus::lexicon_words;

    fn checkpoint() -> Checkpoint {
        let vocab = Vocabulary::build(&lexicon_words(), 256).unwrap();
        let cfg = EncoderConfig { d_model: 8, n_layers: 1, n_heads: 2, d_ff: 16, max_seq: 16, vocab_size: vocab.len(), pseudo_capacity: 4, ..EncoderConfig::default() };
        let mut ck = Checkpoint::new(Model::init(&cfg, 5).unwrap(), vocab).unwrap();
        ck.record("pretrain", 5);
        ck
    }

    #[test]
    fn checkpoint_round_trip_is_bit_identical() {
        let dir = tempfile::tempdir().unwrap();
        let ck = checkpoint();
        save_checkpoint(&ck, dir.path()).unwrap();
        let back = load_checkpoint(dir.path()).unwrap();
        assert_eq!(back, ck);
        for (a, b) in back.model.params().iter().zip(ck.model.params()) {
            assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }

    #[test]
    fn truncated_weights_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(&checkpoint(), dir.path()).unwrap();
        let w = dir.path().join(WEIGHTS);
        let bytes = fs::read(&w).unwrap();
        fs::write(&w, &bytes[..bytes.len() - 7]).unwrap();
        let err = load_checkpoint(dir.path()).unwrap_err();
        assert!(matches!(err.core(), Some(entail_core::Error::Format(_))), "{err}");
    }

    #[test]
    fn manifest_shape_disagreeing_with_config_names_both() {
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(&checkpoint(), dir.path()).unwrap();
        let p = dir.path().join(MANIFEST);
        let text = fs::read_to_string(&p).unwrap().replacen("\"d_model\": 8", "\"d_model\": 16", 1);
        fs::write(&p, text).unwrap();
        let msg = load_checkpoint(dir.path()).unwrap_err().to_string();
        assert!(msg.contains("format") && msg.contains('8') && msg.contains("16"), "{msg}");
    }

    #[test]
    fn a_delta_is_not_a_checkpoint() {
        let dir = tempfile::tempdir().unwrap();
        let ck = checkpoint();
        let reg = PseudotokenRegistry::new(ck.vocab.len(), 8);
        let delta = TaskDelta {
            task: "t".into(),
            mode: PartitionMode::Efficient,
            template: Template::pair(0),
            kind: TaskKind::Pair,
            n_classes: 2,
            symmetric: false,
            registry: reg,
            head_weight: vec![0.5; 16],
            head_bias: vec![0.0, 1.0],
            fingerprint: ck.fingerprint(),
        };
        save_delta(&delta, dir.path()).unwrap();
        assert_eq!(load_delta(dir.path()).unwrap(), delta);
        assert!(load_checkpoint(dir.path()).is_err());
    }
}
