//! Frozen/trainable split of model parameters.

use alloc::collections::BTreeSet;
use alloc::string::String;
use core::fmt;
use core::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::encoder::Model;
use crate::error::{bail, Error, Result};
use crate::tape::ParamId;
use crate::tensor::Scalar;
use crate::vocab::PseudotokenRegistry;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PartitionMode {
    /// Every parameter trains (DE).
    Full,
    /// Pseudotoken rows and the entailment head only (DE PE).
    Efficient,
    HeadOnly,
}

impl FromStr for PartitionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" | "de" => Ok(Self::Full),
            "efficient" | "de-pe" | "de_pe" => Ok(Self::Efficient),
            "head_only" | "head-only" => Ok(Self::HeadOnly),
            other => Err(Error::Config(alloc::format!("unknown partition mode {other:?}"))),
        }
    }
}

impl fmt::Display for PartitionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Full => "full",
            Self::Efficient => "efficient",
            Self::HeadOnly => "head_only",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParameterPartition {
    pub mode: PartitionMode,
    pub frozen: BTreeSet<ParamId>,
    pub trainable: BTreeSet<ParamId>,
    trainable_elems: usize,
    total_elems: usize,
}

/// Split `model`'s parameters. The efficient mode trains the rows of
/// `registry` (free pseudotokens and template-word copies) plus the head.
pub fn partition_parameters<T: Scalar>(
    model: &Model<T>,
    mode: PartitionMode,
    registry: &PseudotokenRegistry,
) -> Result<ParameterPartition> {
    let layout = model.layout();
    let all: BTreeSet<ParamId> = (0..model.params().len()).collect();
    let head = [layout.head_weight, layout.head_bias];
    let trainable: BTreeSet<ParamId> = match mode {
        PartitionMode::Full => all.clone(),
        PartitionMode::HeadOnly => head.into_iter().collect(),
        PartitionMode::Efficient => {
            if registry.base as usize != model.config().vocab_size {
                bail!(
                    Config,
                    "registry starts at {} but the vocabulary has {} ids",
                    registry.base,
                    model.config().vocab_size
                );
            }
            let mut set: BTreeSet<ParamId> = head.into_iter().collect();
            for id in registry.ids() {
                set.insert(model.pseudo_param(id).map_err(|_| {
                    Error::Config(alloc::format!(
                        "pseudotoken {id} exceeds capacity {}",
                        model.config().pseudo_capacity
                    ))
                })?);
            }
            set
        }
    };
    let frozen = all.difference(&trainable).copied().collect();
    let trainable_elems = trainable.iter().map(|&p| model.param(p).len()).sum();
    Ok(ParameterPartition { mode, frozen, trainable, trainable_elems, total_elems: model.parameter_count() })
}

/// Trainable share of all parameter elements.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainableRatio {
    pub trainable: usize,
    pub total: usize,
}

impl TrainableRatio {
    pub fn value(&self) -> f64 {
        self.trainable as f64 / self.total as f64
    }
}

impl fmt::Display for TrainableRatio {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.6}", self.value())
    }
}

impl ParameterPartition {
    pub fn ratio(&self) -> TrainableRatio {
        TrainableRatio { trainable: self.trainable_elems, total: self.total_elems }
    }

    /// SHA-256 over the bytes of every frozen parameter.
    pub fn frozen_hash<T: Scalar>(&self, model: &Model<T>) -> String {
        model.hash_params(self.frozen.iter().copied())
    }
}

pub fn trainable_ratio(partition: &ParameterPartition) -> TrainableRatio {
    partition.ratio()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::EncoderConfig;
    use crate::vocab::{InitMode, Vocabulary};
    use alloc::format;
    use alloc::vec::Vec;

    fn setup(n_free: usize) -> (Model<f32>, PseudotokenRegistry) {
        let words: Vec<String> = (0..251).map(|i| format!("w{i}")).collect();
        let vocab = Vocabulary::from_tokens(words);
        let cfg = EncoderConfig { vocab_size: vocab.len(), ..EncoderConfig::default() };
        let model = Model::<f32>::init(&cfg, 0).unwrap();
        let table = model.param(model.layout().vocab_embedding);
        let mut reg = PseudotokenRegistry::new(vocab.len(), cfg.d_model);
        reg.register(n_free, &InitMode::Random, 1, &vocab, table).unwrap();
        for w in ["w0", "w1", "w2"] {
            reg.register_word(w, &InitMode::Copy(w.into()), 1, &vocab, table).unwrap();
        }
        (model, reg)
    }

    #[test]
    fn full_mode_trains_everything() {
        let (model, reg) = setup(5);
        let p = partition_parameters(&model, PartitionMode::Full, &reg).unwrap();
        assert!(p.frozen.is_empty());
        assert_eq!(p.ratio().value(), 1.0);
        assert_eq!(p.ratio().to_string(), "1.000000");
    }

    #[test]
    fn efficient_count_is_rows_plus_head() {
        let (model, reg) = setup(5);
        let p = partition_parameters(&model, PartitionMode::Efficient, &reg).unwrap();
        let d = 64;
        assert_eq!(p.ratio().trainable, (5 + 3) * d + (d * 2 + 2));
        assert!(p.frozen.is_disjoint(&p.trainable));
        assert_eq!(p.frozen.len() + p.trainable.len(), model.params().len());
        assert!(p.ratio().value() <= 0.05);
    }

    #[test]
    fn head_only_mode() {
        let (model, reg) = setup(5);
        let p = partition_parameters(&model, PartitionMode::HeadOnly, &reg).unwrap();
        let l = model.layout();
        assert_eq!(p.trainable, BTreeSet::from([l.head_weight, l.head_bias]));
    }

    #[test]
    fn more_pseudotokens_raise_the_ratio() {
        let (model, small) = setup(2);
        let (_, large) = setup(5);
        let a = partition_parameters(&model, PartitionMode::Efficient, &small).unwrap().ratio();
        let b = partition_parameters(&model, PartitionMode::Efficient, &large).unwrap().ratio();
        assert!(b.value() > a.value());
    }

    #[test]
    fn unknown_mode_is_config_error() {
        assert!(matches!("sideways".parse::<PartitionMode>(), Err(Error::Config(_))));
        assert_eq!("de-pe".parse::<PartitionMode>().unwrap(), PartitionMode::Efficient);
    }
}
