//! Labeled datasets and the synthetic task generators.
//!
//! All generators share one small review-style lexicon. Adjectives come in
//! synonym pairs grouped by polarity, and each positive pair has an antonym
//! pair at the same index on the negative side, so labels are decided by
//! the polarity words alone.

use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};
use crate::rng::{self, SeededRng};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledExample {
    pub id: u64,
    pub s1: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub s2: Option<String>,
    pub label: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Single,
    Pair,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Accuracy,
    /// Binary F1 of class 1.
    F1,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub name: String,
    pub kind: TaskKind,
    pub n_classes: usize,
    pub metric: Metric,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub template: Option<String>,
}

impl TaskSpec {
    pub fn new(name: &str, kind: TaskKind, n_classes: usize, metric: Metric) -> Self {
        Self { name: name.to_string(), kind, n_classes, metric, template: None }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_classes < 2 {
            bail!(Config, "task {} needs at least 2 classes, has {}", self.name, self.n_classes);
        }
        if self.metric == Metric::F1 && self.n_classes != 2 {
            bail!(Config, "f1 is only defined for binary tasks; {} has {} classes", self.name, self.n_classes);
        }
        Ok(())
    }

    /// Check every label against the class count and every example against
    /// the task kind.
    pub fn check_examples(&self, examples: &[LabeledExample]) -> Result<()> {
        for (i, ex) in examples.iter().enumerate() {
            if ex.label >= self.n_classes {
                bail!(
                    Validation,
                    "example {} (line {}): label {} out of range for {} classes",
                    ex.id,
                    i + 1,
                    ex.label,
                    self.n_classes
                );
            }
            if (self.kind == TaskKind::Pair) != ex.s2.is_some() {
                bail!(Validation, "example {} (line {}): s2 does not match task kind", ex.id, i + 1);
            }
        }
        Ok(())
    }
}

/// Examples in file order; the last `n_test` form the held-out test split
/// and are never eligible for training folds.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dataset {
    pub spec: TaskSpec,
    pub examples: Vec<LabeledExample>,
    pub n_test: usize,
}

impl Dataset {
    /// Hold out the last quarter (rounded down to an even count).
    pub fn with_test_tail(spec: TaskSpec, examples: Vec<LabeledExample>) -> Self {
        let n_test = test_size(examples.len());
        Self { spec, examples, n_test }
    }

    pub fn train(&self) -> &[LabeledExample] {
        &self.examples[..self.examples.len() - self.n_test]
    }

    pub fn test(&self) -> &[LabeledExample] {
        &self.examples[self.examples.len() - self.n_test..]
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn label_counts(&self) -> Vec<usize> {
        let mut counts = alloc::vec![0; self.spec.n_classes];
        for ex in &self.examples {
            counts[ex.label] += 1;
        }
        counts
    }
}

fn test_size(n: usize) -> usize {
    (n / 4) & !1
}

pub const NOUNS: [(&str, &str); 6] = [
    ("movie", "film"),
    ("story", "plot"),
    ("acting", "performance"),
    ("music", "soundtrack"),
    ("ending", "finale"),
    ("script", "screenplay"),
];

/// Positive adjective synonym pairs. `NEGATIVE[i]` holds their antonyms.
pub const POSITIVE: [(&str, &str); 6] = [
    ("great", "excellent"),
    ("good", "fine"),
    ("wonderful", "marvelous"),
    ("brilliant", "superb"),
    ("lovely", "charming"),
    ("fun", "enjoyable"),
];

pub const NEGATIVE: [(&str, &str); 6] = [
    ("awful", "terrible"),
    ("bad", "poor"),
    ("boring", "dull"),
    ("weak", "flimsy"),
    ("messy", "sloppy"),
    ("bland", "tedious"),
];

const OPENERS: [&str; 4] = ["", "honestly ,", "overall ,", "i thought"];
const INTENSIFIERS: [&str; 4] = ["", "really", "quite", "very"];
const GLUE_WORDS: [&str; 4] = ["the", "was", "and", "it"];

/// Every word a generator can emit.
pub fn lexicon_words() -> Vec<String> {
    let mut words: Vec<String> = Vec::new();
    let mut add = |s: &str| {
        for w in s.split_whitespace() {
            if !words.iter().any(|x| x == w) {
                words.push(w.to_string());
            }
        }
    };
    for (a, b) in NOUNS.iter().chain(POSITIVE.iter()).chain(NEGATIVE.iter()) {
        add(a);
        add(b);
    }
    for s in OPENERS.iter().chain(INTENSIFIERS.iter()).chain(GLUE_WORDS.iter()) {
        add(s);
    }
    words.sort();
    words
}

/// Adjective identity: polarity (1 positive), pair index, synonym choice.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct Adj {
    polarity: usize,
    index: usize,
    alt: bool,
}

impl Adj {
    fn word(self) -> &'static str {
        let pair = if self.polarity == 1 { POSITIVE[self.index] } else { NEGATIVE[self.index] };
        if self.alt { pair.1 } else { pair.0 }
    }

    fn antonym(self) -> Self {
        Self { polarity: 1 - self.polarity, ..self }
    }

    fn synonym(self) -> Self {
        Self { alt: !self.alt, ..self }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Piece {
    Fixed(&'static str),
    Noun(usize, bool),
    Adj(Adj),
}

impl Piece {
    fn word(self) -> &'static str {
        match self {
            Piece::Fixed(w) => w,
            Piece::Noun(i, alt) => {
                if alt {
                    NOUNS[i].1
                } else {
                    NOUNS[i].0
                }
            }
            Piece::Adj(a) => a.word(),
        }
    }
}

struct Clause {
    noun: (usize, bool),
    adj: Adj,
}

/// Review sentence whose adjectives all share `polarity`.
struct Review {
    pieces: Vec<Piece>,
    clauses: Vec<Clause>,
}

impl Review {
    fn sample(rng: &mut SeededRng, polarity: usize) -> Self {
        let mut pieces = Vec::new();
        let opener = OPENERS[rng.random_range(0..OPENERS.len())];
        for w in opener.split_whitespace() {
            pieces.push(Piece::Fixed(w));
        }
        let n_clauses = rng.random_range(1..=2);
        let first_noun = rng.random_range(0..NOUNS.len());
        let mut clauses = Vec::new();
        for c in 0..n_clauses {
            if c > 0 {
                pieces.push(Piece::Fixed("and"));
            }
            let noun_index = if c == 0 {
                first_noun
            } else {
                (first_noun + rng.random_range(1..NOUNS.len())) % NOUNS.len()
            };
            let noun = (noun_index, rng.random_bool(0.5));
            let adj = Adj { polarity, index: rng.random_range(0..POSITIVE.len()), alt: rng.random_bool(0.5) };
            pieces.push(Piece::Fixed("the"));
            pieces.push(Piece::Noun(noun.0, noun.1));
            pieces.push(Piece::Fixed("was"));
            let int = INTENSIFIERS[rng.random_range(0..INTENSIFIERS.len())];
            if !int.is_empty() {
                pieces.push(Piece::Fixed(int));
            }
            pieces.push(Piece::Adj(adj));
            clauses.push(Clause { noun, adj });
        }
        Self { pieces, clauses }
    }

    fn text(&self) -> String {
        render(&self.pieces)
    }
}

fn render(pieces: &[Piece]) -> String {
    let words: Vec<&str> = pieces.iter().map(|p| p.word()).collect();
    words.join(" ")
}

/// Balanced labels for a split: alternating, then shuffled.
fn balanced_labels(rng: &mut SeededRng, n: usize, classes: usize) -> Vec<usize> {
    let mut labels: Vec<usize> = (0..n).map(|i| i % classes).collect();
    labels.shuffle(rng);
    labels
}

fn generate<F>(n: usize, seed: u64, id_base: u64, spec: TaskSpec, mut make: F) -> Result<Dataset>
where
    F: FnMut(&mut SeededRng, usize) -> (String, Option<String>),
{
    if !n.is_multiple_of(2) {
        bail!(Input, "dataset size must be even, got {n}");
    }
    let mut rng = rng::seeded(seed);
    let n_test = test_size(n);
    let mut labels = balanced_labels(&mut rng, n - n_test, 2);
    labels.extend(balanced_labels(&mut rng, n_test, 2));
    let examples = labels
        .into_iter()
        .enumerate()
        .map(|(i, label)| {
            let (s1, s2) = make(&mut rng, label);
            LabeledExample { id: id_base + i as u64, s1, s2, label }
        })
        .collect();
    Ok(Dataset { spec, examples, n_test })
}

pub const SENTIMENT_ID_BASE: u64 = 1_000_000;
pub const NLI_ID_BASE: u64 = 2_000_000;
pub const PAIRS_ID_BASE: u64 = 3_000_000;

/// Binary sentiment: label 1 iff the review's adjectives are positive.
pub fn gen_sentiment(n: usize, seed: u64) -> Result<Dataset> {
    let spec = TaskSpec::new("sentiment", TaskKind::Single, 2, Metric::Accuracy);
    generate(n, seed, SENTIMENT_ID_BASE, spec, |rng, label| (Review::sample(rng, label).text(), None))
}

/// Premise/hypothesis pairs, label 1 = entail. An entailed hypothesis
/// repeats one of the premise's adjectives; a contradicted one uses its
/// antonym.
pub fn gen_nli(n: usize, seed: u64) -> Result<Dataset> {
    let spec = TaskSpec::new("nli", TaskKind::Pair, 2, Metric::Accuracy);
    generate(n, seed, NLI_ID_BASE, spec, |rng, label| {
        let polarity = rng.random_range(0..2);
        let premise = Review::sample(rng, polarity);
        let clause = &premise.clauses[rng.random_range(0..premise.clauses.len())];
        let adj = if label == 1 { clause.adj } else { clause.adj.antonym() };
        let mut hyp = Vec::new();
        if rng.random_bool(0.5) {
            hyp.push(Piece::Fixed("it"));
        } else {
            hyp.push(Piece::Fixed("the"));
            hyp.push(Piece::Noun(clause.noun.0, clause.noun.1));
        }
        hyp.push(Piece::Fixed("was"));
        hyp.push(Piece::Adj(adj));
        (premise.text(), Some(render(&hyp)))
    })
}

/// Paraphrase pairs, label 1 = paraphrase. A paraphrase swaps at least one
/// noun or adjective for its synonym; a non-paraphrase flips every
/// adjective to an antonym.
pub fn gen_pairs(n: usize, seed: u64) -> Result<Dataset> {
    let spec = TaskSpec::new("pairs", TaskKind::Pair, 2, Metric::Accuracy);
    generate(n, seed, PAIRS_ID_BASE, spec, |rng, label| {
        let polarity = rng.random_range(0..2);
        let review = Review::sample(rng, polarity);
        let slots: Vec<usize> = (0..review.pieces.len())
            .filter(|&i| !matches!(review.pieces[i], Piece::Fixed(_)))
            .collect();
        let mut swap: Vec<bool> = slots.iter().map(|_| rng.random_bool(0.5)).collect();
        if label == 1 && !swap.iter().any(|&s| s) {
            let pick = rng.random_range(0..swap.len());
            swap[pick] = true;
        }
        let mut other = review.pieces.clone();
        for (&i, &s) in slots.iter().zip(&swap) {
            other[i] = match other[i] {
                Piece::Noun(n, alt) => Piece::Noun(n, alt ^ s),
                Piece::Adj(a) => {
                    let a = if s { a.synonym() } else { a };
                    Piece::Adj(if label == 1 { a } else { a.antonym() })
                }
                fixed => fixed,
            };
        }
        (review.text(), Some(render(&other)))
    })
}

/// Synonym classes used by the pair generator, for checking that two words
/// differ only by synonym substitution.
pub fn are_synonyms(a: &str, b: &str) -> bool {
    NOUNS.iter().chain(POSITIVE.iter()).chain(NEGATIVE.iter()).any(|&(x, y)| (a == x && b == y) || (a == y && b == x))
}

/// Polarity of an adjective: Some(1) positive, Some(0) negative.
pub fn polarity(word: &str) -> Option<usize> {
    if POSITIVE.iter().any(|&(a, b)| a == word || b == word) {
        Some(1)
    } else if NEGATIVE.iter().any(|&(a, b)| a == word || b == word) {
        Some(0)
    } else {
        None
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vocab::{split_words, Vocabulary, UNK};
    use alloc::collections::{BTreeMap, BTreeSet};

    #[test]
    fn sentiment_is_deterministic_and_balanced() {
        let a = gen_sentiment(200, 7).unwrap();
        let b = gen_sentiment(200, 7).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.label_counts(), [100, 100]);
        assert_eq!(a.test().len(), 50);
        assert_eq!(a.test().iter().filter(|e| e.label == 1).count(), 25);
        assert_ne!(a, gen_sentiment(200, 8).unwrap());
    }

    #[test]
    fn odd_size_is_rejected() {
        assert!(gen_sentiment(5, 0).is_err());
        assert!(gen_pairs(7, 0).is_err());
    }

    /// Perceptron over word counts, as an independent separability check.
    #[test]
    fn sentiment_is_bag_of_words_separable() {
        let data = gen_sentiment(200, 7).unwrap();
        let docs: Vec<(Vec<String>, f64)> = data
            .examples
            .iter()
            .map(|e| (split_words(&e.s1), if e.label == 1 { 1.0 } else { -1.0 }))
            .collect();
        let mut w: BTreeMap<String, f64> = BTreeMap::new();
        for _ in 0..20 {
            for (words, y) in &docs {
                let score: f64 = words.iter().map(|t| w.get(t).copied().unwrap_or(0.0)).sum();
                if score * y <= 0.0 {
                    for t in words {
                        *w.entry(t.clone()).or_default() += y;
                    }
                }
            }
        }
        let correct = docs
            .iter()
            .filter(|(words, y)| words.iter().map(|t| w.get(t).copied().unwrap_or(0.0)).sum::<f64>() * y > 0.0)
            .count();
        assert!(correct as f64 / docs.len() as f64 >= 0.95, "{correct}/200");
    }

    #[test]
    fn nli_balance_and_construction() {
        let data = gen_nli(400, 3).unwrap();
        assert_eq!(data.label_counts(), [200, 200]);
        for ex in &data.examples {
            let premise = split_words(&ex.s1);
            let hyp = split_words(ex.s2.as_ref().unwrap());
            let adj = hyp.last().unwrap();
            let shared = premise.contains(adj);
            assert_eq!(shared, ex.label == 1, "{ex:?}");
            if ex.label == 0 {
                let p = polarity(adj).unwrap();
                assert!(premise.iter().any(|w| polarity(w) == Some(1 - p)));
            }
        }
    }

    #[test]
    fn generator_ids_are_disjoint() {
        let a: BTreeSet<u64> = gen_sentiment(100, 1).unwrap().examples.iter().map(|e| e.id).collect();
        let b: BTreeSet<u64> = gen_nli(100, 1).unwrap().examples.iter().map(|e| e.id).collect();
        let c: BTreeSet<u64> = gen_pairs(100, 1).unwrap().examples.iter().map(|e| e.id).collect();
        assert!(a.is_disjoint(&b) && b.is_disjoint(&c) && a.is_disjoint(&c));
        assert_eq!(a.len(), 100);
    }

    #[test]
    fn pairs_balanced_deterministic_and_synonym_only() {
        let data = gen_pairs(200, 5).unwrap();
        assert_eq!(data.label_counts(), [100, 100]);
        assert_eq!(data, gen_pairs(200, 5).unwrap());
        for ex in &data.examples {
            let a = split_words(&ex.s1);
            let b = split_words(ex.s2.as_ref().unwrap());
            assert_eq!(a.len(), b.len());
            let diffs: Vec<(&String, &String)> = a.iter().zip(&b).filter(|(x, y)| x != y).collect();
            if ex.label == 1 {
                assert!(!diffs.is_empty());
                assert!(diffs.iter().all(|(x, y)| are_synonyms(x, y)), "{ex:?}");
            } else {
                let flipped = a.iter().zip(&b).filter(|(x, _)| polarity(x).is_some());
                assert!(flipped.into_iter().all(|(x, y)| polarity(x) != polarity(y)));
            }
        }
    }

    #[test]
    fn generated_text_has_no_unknown_words() {
        let vocab = Vocabulary::build(&lexicon_words(), 256).unwrap();
        for data in [gen_sentiment(200, 1).unwrap(), gen_nli(200, 1).unwrap(), gen_pairs(200, 1).unwrap()] {
            for ex in &data.examples {
                assert!(!vocab.tokenize(&ex.s1).contains(&UNK), "{}", ex.s1);
                if let Some(s2) = &ex.s2 {
                    assert!(!vocab.tokenize(s2).contains(&UNK), "{s2}");
                }
            }
        }
    }

    #[test]
    fn label_validation() {
        let spec = TaskSpec::new("t", TaskKind::Single, 2, Metric::Accuracy);
        let bad = [LabeledExample { id: 0, s1: "x".into(), s2: None, label: 2 }];
        assert!(matches!(spec.check_examples(&bad), Err(crate::Error::Validation(_))));
        let f1 = TaskSpec::new("t", TaskKind::Single, 3, Metric::F1);
        assert!(matches!(f1.validate(), Err(crate::Error::Config(_))));
    }
}
