//! Desk-scale defaults shared by the command line, tests and examples:
//! the lexicon vocabulary, the masked-LM corpus and default templates.

use entail_core::corpus::{gen_nli, gen_pairs, gen_sentiment, lexicon_words, TaskKind, TaskSpec};
use entail_core::encoder::EncoderConfig;
use entail_core::entailment::Template;
use entail_core::trainer::Hyperparams;
use entail_core::vocab::{Vocabulary, SEP};
use entail_core::Error;

use crate::Result;

pub const VOCAB_LIMIT: usize = 256;

pub fn vocabulary() -> Vocabulary {
    Vocabulary::build(&lexicon_words(), VOCAB_LIMIT).expect("lexicon is not empty")
}

/// Default encoder shape sized to `vocab`.
pub fn encoder_config(vocab: &Vocabulary) -> EncoderConfig {
    EncoderConfig { vocab_size: vocab.len(), ..EncoderConfig::default() }
}

/// Review sentences plus rendered `s1 [SEP] s2` pairs from the other two
/// generators, all drawn from seeds `seed..seed + 3`.
pub fn mlm_corpus(vocab: &Vocabulary, seed: u64) -> Result<Vec<Vec<u32>>> {
    let mut out = Vec::new();
    for e in gen_sentiment(2000, seed)?.examples {
        out.push(vocab.tokenize(&e.s1));
    }
    for d in [gen_nli(1000, seed + 1)?, gen_pairs(1000, seed + 2)?] {
        for e in d.examples {
            let mut ids = vocab.tokenize(&e.s1);
            ids.push(SEP);
            ids.extend(vocab.tokenize(e.s2.as_deref().unwrap_or_default()));
            out.push(ids);
        }
    }
    Ok(out)
}

pub const MLM_STEPS: usize = 1500;

pub fn mlm_hyperparams(seed: u64) -> Hyperparams {
    Hyperparams { lr: 1e-3, batch_size: 16, seed, ..Hyperparams::default() }
}

pub const NLI_SIZE: usize = 2000;

/// The entailment loss sits on a plateau for several epochs before it
/// drops, so early stopping is effectively off.
pub fn nli_hyperparams(seed: u64) -> Hyperparams {
    Hyperparams { lr: 3e-4, batch_size: 16, epochs: 14, patience: usize::MAX, seed, ..Hyperparams::default() }
}

pub fn fewshot_hyperparams(seed: u64) -> Hyperparams {
    Hyperparams { lr: 3e-3, batch_size: 8, epochs: 20, seed, ..Hyperparams::default() }
}

/// "it was great" with class 0 described as "it was terrible" for binary
/// single-sentence tasks; plain pair format for pair tasks.
pub fn default_template(spec: &TaskSpec, n_pseudotokens: usize) -> Result<Template> {
    match (spec.kind, spec.n_classes) {
        (TaskKind::Pair, _) => Ok(Template::pair(n_pseudotokens)),
        (TaskKind::Single, 2) => {
            Ok(Template::single("it was", "great", n_pseudotokens).with_class_descriptions(&["terrible", "great"]))
        }
        _ => Err(Error::Config(format!(
            "task {} has {} classes; pass a template with one description per class",
            spec.name, spec.n_classes
        ))
        .into()),
    }
}
