//! Word-level vocabulary and the registry of per-task pseudotokens that live
//! past the end of it.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};
use crate::rng;
use crate::tensor::{Scalar, Tensor};

pub const PAD: u32 = 0;
pub const CLS: u32 = 1;
pub const SEP: u32 = 2;
pub const MASK: u32 = 3;
pub const UNK: u32 = 4;
pub const SPECIALS: [&str; 5] = ["[PAD]", "[CLS]", "[SEP]", "[MASK]", "[UNK]"];
/// First id available to ordinary tokens.
pub const FIRST_ORDINARY: u32 = 5;

/// Identifies the tokenizer in checkpoint manifests.
pub const TOKENIZER_NAME: &str = "lowercase-word-punct";

/// Lowercase, split on whitespace, and emit each punctuation character as
/// its own token.
pub fn split_words(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    for ch in text.chars() {
        if ch.is_alphanumeric() || ch == '\'' {
            cur.extend(ch.to_lowercase());
        } else {
            if !cur.is_empty() {
                out.push(core::mem::take(&mut cur));
            }
            if !ch.is_whitespace() {
                out.push(ch.to_string());
            }
        }
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: BTreeMap<String, u32>,
}

impl From<Vec<String>> for Vocabulary {
    fn from(tokens: Vec<String>) -> Self {
        Self::from_tokens(tokens)
    }
}

impl From<Vocabulary> for Vec<String> {
    fn from(v: Vocabulary) -> Self {
        v.tokens
    }
}

impl Vocabulary {
    /// Keep the most frequent tokens so that the total size, specials
    /// included, is at most `max_size`. Ties go to the lexicographically
    /// smaller token.
    pub fn build<S: AsRef<str>>(corpus: &[S], max_size: usize) -> Result<Self> {
        if corpus.is_empty() {
            bail!(Input, "cannot build a vocabulary from an empty corpus");
        }
        let mut counts: BTreeMap<String, u64> = BTreeMap::new();
        for doc in corpus {
            for w in split_words(doc.as_ref()) {
                *counts.entry(w).or_default() += 1;
            }
        }
        let mut ranked: Vec<(String, u64)> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let keep = max_size.saturating_sub(SPECIALS.len());
        let tokens = ranked.into_iter().take(keep).map(|(t, _)| t).collect();
        Ok(Self::from_tokens(tokens))
    }

    pub fn from_tokens(tokens: Vec<String>) -> Self {
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32 + FIRST_ORDINARY))
            .collect();
        Self { tokens, index }
    }

    /// Parse the one-token-per-line file format.
    pub fn from_text(text: &str) -> Result<Self> {
        let tokens: Vec<String> = text.lines().map(|l| l.to_string()).collect();
        let v = Self::from_tokens(tokens);
        if v.index.len() != v.tokens.len() {
            bail!(Format, "vocabulary file lists a token more than once");
        }
        if v.tokens.iter().any(|t| t.is_empty() || SPECIALS.contains(&t.as_str())) {
            bail!(Format, "vocabulary file holds an empty line or a special token");
        }
        Ok(v)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for t in &self.tokens {
            s.push_str(t);
            s.push('\n');
        }
        s
    }

    /// Total size V, specials included.
    pub fn len(&self) -> usize {
        self.tokens.len() + SPECIALS.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        if let Some(i) = SPECIALS.iter().position(|s| *s == token) {
            return Some(i as u32);
        }
        self.index.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        match id {
            i if (i as usize) < SPECIALS.len() => Some(SPECIALS[i as usize]),
            i => self.tokens.get((i - FIRST_ORDINARY) as usize).map(|s| s.as_str()),
        }
    }

    pub fn tokenize(&self, text: &str) -> Vec<u32> {
        split_words(text).iter().map(|w| self.index.get(w).copied().unwrap_or(UNK)).collect()
    }

    pub fn detokenize(&self, ids: &[u32]) -> String {
        let mut out = String::new();
        for (i, &id) in ids.iter().enumerate() {
            if i > 0 {
                out.push(' ');
            }
            out.push_str(self.token(id).unwrap_or(SPECIALS[UNK as usize]));
        }
        out
    }
}

/// How a pseudotoken row is initialized.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitMode {
    /// Normal(0, 0.02²).
    Random,
    /// Exact copy of a vocabulary token's embedding row.
    Copy(String),
}

/// What a pseudotoken stands for in a template.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Slot {
    /// One of the free prompt tokens 𝒯₀…𝒯ⱼ.
    Free,
    /// Trainable stand-in for a template word.
    Word(String),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PseudotokenEntry {
    pub id: u32,
    pub slot: Slot,
    pub init: InitMode,
}

/// Pseudotokens of one task. Ids start at the vocabulary size and grow
/// upward; rows hold their current embeddings (n × d, row-major).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PseudotokenRegistry {
    pub base: u32,
    pub dim: usize,
    pub entries: Vec<PseudotokenEntry>,
    pub rows: Vec<f32>,
}

const INIT_STD: f64 = 0.02;

impl PseudotokenRegistry {
    pub fn new(vocab_size: usize, dim: usize) -> Self {
        Self { base: vocab_size as u32, dim, entries: Vec::new(), rows: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = u32> + '_ {
        self.entries.iter().map(|e| e.id)
    }

    pub fn free_ids(&self) -> Vec<u32> {
        self.entries.iter().filter(|e| e.slot == Slot::Free).map(|e| e.id).collect()
    }

    pub fn word_id(&self, word: &str) -> Option<u32> {
        self.entries
            .iter()
            .find(|e| matches!(&e.slot, Slot::Word(w) if w == word))
            .map(|e| e.id)
    }

    pub fn contains(&self, id: u32) -> bool {
        id >= self.base && ((id - self.base) as usize) < self.entries.len()
    }

    pub fn row(&self, id: u32) -> Option<&[f32]> {
        if !self.contains(id) {
            return None;
        }
        let i = (id - self.base) as usize;
        Some(&self.rows[i * self.dim..(i + 1) * self.dim])
    }

    pub fn rows_tensor<T: Scalar>(&self) -> Option<Tensor<T>> {
        if self.entries.is_empty() {
            return None;
        }
        let data = self.rows.iter().map(|&v| T::of(v as f64)).collect();
        Tensor::new(&[self.entries.len(), self.dim], data).ok()
    }

    /// Add `n` free pseudotokens. `table` is the vocabulary embedding table,
    /// consulted for copy initialization.
    pub fn register<T: Scalar>(
        &mut self,
        n: usize,
        init: &InitMode,
        seed: u64,
        vocab: &Vocabulary,
        table: &Tensor<T>,
    ) -> Result<Vec<u32>> {
        let mut ids = Vec::with_capacity(n);
        for _ in 0..n {
            ids.push(self.push(Slot::Free, init.clone(), seed, vocab, table)?);
        }
        Ok(ids)
    }

    /// Add a trainable stand-in for a template word.
    pub fn register_word<T: Scalar>(
        &mut self,
        word: &str,
        init: &InitMode,
        seed: u64,
        vocab: &Vocabulary,
        table: &Tensor<T>,
    ) -> Result<u32> {
        if let Some(id) = self.word_id(word) {
            return Ok(id);
        }
        self.push(Slot::Word(word.to_string()), init.clone(), seed, vocab, table)
    }

    fn push<T: Scalar>(
        &mut self,
        slot: Slot,
        init: InitMode,
        seed: u64,
        vocab: &Vocabulary,
        table: &Tensor<T>,
    ) -> Result<u32> {
        if table.cols() != self.dim {
            bail!(Dimension, "embedding width {} vs registry width {}", table.cols(), self.dim);
        }
        let index = self.entries.len();
        match &init {
            InitMode::Random => {
                let mut r = rng::derived(seed, 0x5eed_0000 + index as u64);
                for _ in 0..self.dim {
                    self.rows.push((rng::standard_normal(&mut r) * INIT_STD) as f32);
                }
            }
            InitMode::Copy(token) => {
                let Some(src) = vocab.id(token).filter(|&i| i >= FIRST_ORDINARY) else {
                    bail!(Input, "cannot copy embedding of out-of-vocabulary token {token:?}");
                };
                self.rows.extend(table.row(src as usize).iter().map(|v| v.as_f64() as f32));
            }
        }
        let id = self.base + index as u32;
        self.entries.push(PseudotokenEntry { id, slot, init });
        Ok(id)
    }
}
