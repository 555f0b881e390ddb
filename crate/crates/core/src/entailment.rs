//! Recasting classification as entailment: template rendering, binary and
//! per-class reformulation, symmetric augmentation, and decision rules.

use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::corpus::LabeledExample;
use crate::error::{bail, Result};
use crate::tensor::{Scalar, Tensor};
use crate::vocab::{split_words, InitMode, PseudotokenRegistry, Vocabulary, CLS, SEP};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemplateKind {
    /// `[CLS] s1 [SEP] 𝒯… prompt_words label_word`
    SingleSentence,
    /// `[CLS] s1 [SEP] 𝒯… s2`; the second sentence is the description.
    SentencePair,
}

fn yes() -> bool {
    true
}

/// A task template as stored in its JSON definition file.
///
/// `label_word` describes class 1 and is used for plain binary tasks.
/// `class_descriptions[c]` is the label text for class `c`; symmetric and
/// multi-class tasks render one input per class with it.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Template {
    pub kind: TemplateKind,
    #[serde(default)]
    pub prompt_words: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label_word: Option<String>,
    pub n_pseudotokens: usize,
    #[serde(default = "yes")]
    pub train_prompt_words: bool,
    #[serde(default = "yes")]
    pub train_label_word: bool,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub class_descriptions: Vec<String>,
}

/// The class whose description is `label_word`.
pub const DESCRIBED_CLASS: usize = 1;

impl Template {
    pub fn single(prompt: &str, label_word: &str, n_pseudotokens: usize) -> Self {
        Self {
            kind: TemplateKind::SingleSentence,
            prompt_words: prompt.to_string(),
            label_word: Some(label_word.to_string()),
            n_pseudotokens,
            train_prompt_words: true,
            train_label_word: true,
            class_descriptions: Vec::new(),
        }
    }

    pub fn pair(n_pseudotokens: usize) -> Self {
        Self {
            kind: TemplateKind::SentencePair,
            prompt_words: String::new(),
            label_word: None,
            n_pseudotokens,
            train_prompt_words: false,
            train_label_word: false,
            class_descriptions: Vec::new(),
        }
    }

    pub fn with_class_descriptions(mut self, descriptions: &[&str]) -> Self {
        self.class_descriptions = descriptions.iter().map(|s| s.to_string()).collect();
        self
    }

    pub fn validate(&self) -> Result<()> {
        match self.kind {
            TemplateKind::SingleSentence => {
                if self.label_word.is_none() && self.class_descriptions.is_empty() {
                    bail!(Config, "single-sentence template needs a label word or class descriptions");
                }
            }
            TemplateKind::SentencePair => {
                if self.label_word.is_some() || !self.class_descriptions.is_empty() {
                    bail!(Config, "sentence-pair template takes no label word; the second sentence is the description");
                }
                if !split_words(&self.prompt_words).is_empty() {
                    bail!(Config, "sentence-pair template takes no prompt words");
                }
            }
        }
        Ok(())
    }

    pub fn prompt_tokens(&self) -> Vec<String> {
        split_words(&self.prompt_words)
    }

    /// Description of class 1 for plain binary reformulation.
    pub fn primary_description(&self) -> LabelDescription {
        let text = match self.kind {
            TemplateKind::SentencePair => None,
            TemplateKind::SingleSentence => self
                .label_word
                .clone()
                .or_else(|| self.class_descriptions.get(DESCRIBED_CLASS).cloned()),
        };
        LabelDescription { text, class: DESCRIBED_CLASS }
    }

    pub fn class_description(&self, class: usize) -> Result<LabelDescription> {
        match self.class_descriptions.get(class) {
            Some(t) => Ok(LabelDescription { text: Some(t.clone()), class }),
            None => bail!(Config, "template has no description for class {class}"),
        }
    }

    /// Every label word the template can emit.
    fn label_tokens(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for text in self.label_word.iter().chain(self.class_descriptions.iter()) {
            for w in split_words(text) {
                if !out.contains(&w) {
                    out.push(w);
                }
            }
        }
        out
    }

    /// Register this template's pseudotokens: `n_pseudotokens` free rows,
    /// then copies of the trainable prompt and label words.
    pub fn register<T: Scalar>(
        &self,
        registry: &mut PseudotokenRegistry,
        seed: u64,
        vocab: &Vocabulary,
        table: &Tensor<T>,
    ) -> Result<()> {
        self.validate()?;
        registry.register(self.n_pseudotokens, &InitMode::Random, seed, vocab, table)?;
        let mut words = Vec::new();
        if self.train_prompt_words {
            words.extend(self.prompt_tokens());
        }
        if self.train_label_word {
            words.extend(self.label_tokens());
        }
        for w in words {
            registry.register_word(&w, &InitMode::Copy(w.clone()), seed, vocab, table)?;
        }
        Ok(())
    }
}

/// A hypothesis p for one class. `text` is None for pair tasks, where the
/// second sentence itself plays that role.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelDescription {
    pub text: Option<String>,
    pub class: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EntailmentExample {
    pub ids: Vec<u32>,
    /// Positions holding pseudotoken or word-copy ids.
    pub pseudo_positions: Vec<usize>,
    /// 1 = entail, 0 = not entail.
    pub target: usize,
    pub source_id: u64,
    /// Class whose description was rendered.
    pub class: usize,
    /// Source label.
    pub label: usize,
}

/// Everything needed to turn text into model input for one task.
#[derive(Clone, Copy)]
pub struct RenderContext<'a> {
    pub template: &'a Template,
    pub registry: &'a PseudotokenRegistry,
    pub vocab: &'a Vocabulary,
    pub max_seq: usize,
}

/// Rendered ids plus the positions of registry ids.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Rendered {
    pub ids: Vec<u32>,
    pub pseudo_positions: Vec<usize>,
}

impl RenderContext<'_> {
    fn word_id(&self, word: &str, trainable: bool) -> Result<u32> {
        if trainable {
            if let Some(id) = self.registry.word_id(word) {
                return Ok(id);
            }
            bail!(Config, "template word {word:?} is trainable but has no registered copy");
        }
        match self.vocab.id(word) {
            Some(id) => Ok(id),
            None => bail!(Input, "template word {word:?} is not in the vocabulary"),
        }
    }

    /// Render token ids. `label` is the label text for single-sentence
    /// templates. When too long, s1 is cut from the right first, then s2,
    /// each down to one token; the template tail is never cut.
    pub fn render(&self, s1: &[u32], s2: Option<&[u32]>, label: Option<&str>) -> Result<Rendered> {
        let t = self.template;
        let free = self.registry.free_ids();
        if free.len() != t.n_pseudotokens {
            bail!(Config, "registry holds {} free pseudotokens, template wants {}", free.len(), t.n_pseudotokens);
        }
        let mut tail = free;
        match t.kind {
            TemplateKind::SingleSentence => {
                if s2.is_some() {
                    bail!(Input, "single-sentence template given a second sentence");
                }
                let Some(label) = label else {
                    bail!(Input, "single-sentence template needs a label description");
                };
                for w in t.prompt_tokens() {
                    tail.push(self.word_id(&w, t.train_prompt_words)?);
                }
                for w in split_words(label) {
                    tail.push(self.word_id(&w, t.train_label_word)?);
                }
            }
            TemplateKind::SentencePair => {
                if s2.is_none() {
                    bail!(Input, "sentence-pair template needs a second sentence");
                }
            }
        }
        let s2 = s2.unwrap_or(&[]);
        let fixed = 2 + tail.len();
        let mut n1 = s1.len();
        let mut n2 = s2.len();
        let mut over = (fixed + n1 + n2).saturating_sub(self.max_seq);
        let cut1 = over.min(n1.saturating_sub(1));
        n1 -= cut1;
        over -= cut1;
        let cut2 = over.min(n2.saturating_sub(1));
        n2 -= cut2;
        over -= cut2;
        if over > 0 {
            bail!(Input, "template needs {} positions after truncation, max_seq is {}", fixed + n1 + n2, self.max_seq);
        }
        let mut ids = Vec::with_capacity(fixed + n1 + n2);
        ids.push(CLS);
        ids.extend_from_slice(&s1[..n1]);
        ids.push(SEP);
        ids.extend_from_slice(&tail[..t.n_pseudotokens]);
        ids.extend_from_slice(&s2[..n2]);
        ids.extend_from_slice(&tail[t.n_pseudotokens..]);
        let pseudo_positions = ids.iter().enumerate().filter(|(_, &id)| self.registry.contains(id)).map(|(i, _)| i).collect();
        Ok(Rendered { ids, pseudo_positions })
    }

    fn render_example(&self, ex: &LabeledExample, desc: &LabelDescription) -> Result<EntailmentExample> {
        let s1 = self.vocab.tokenize(&ex.s1);
        let s2 = ex.s2.as_ref().map(|s| self.vocab.tokenize(s));
        let r = self.render(&s1, s2.as_deref(), desc.text.as_deref())?;
        Ok(EntailmentExample {
            ids: r.ids,
            pseudo_positions: r.pseudo_positions,
            target: (ex.label == desc.class) as usize,
            source_id: ex.id,
            class: desc.class,
            label: ex.label,
        })
    }
}

/// Render `example` against one description; target 1 iff the label is the
/// described class.
pub fn reformulate_binary(ctx: &RenderContext<'_>, example: &LabeledExample, desc: &LabelDescription) -> Result<EntailmentExample> {
    ctx.render_example(example, desc)
}

/// One input per class, target 1 only for the true class.
pub fn reformulate_multiclass(
    ctx: &RenderContext<'_>,
    example: &LabeledExample,
    n_classes: usize,
) -> Result<Vec<EntailmentExample>> {
    if n_classes < 2 {
        bail!(Config, "multi-class reformulation needs at least 2 classes, got {n_classes}");
    }
    (0..n_classes)
        .map(|c| {
            let desc = ctx.template.class_description(c)?;
            ctx.render_example(example, &desc)
        })
        .collect()
}

/// Rendered training set, remembering whether it was already augmented.
#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct EntailmentSet {
    pub examples: Vec<EntailmentExample>,
    pub symmetric: bool,
}

pub fn reformulate_set(
    ctx: &RenderContext<'_>,
    examples: &[LabeledExample],
    desc: &LabelDescription,
) -> Result<EntailmentSet> {
    let examples = examples.iter().map(|e| reformulate_binary(ctx, e, desc)).collect::<Result<_>>()?;
    Ok(EntailmentSet { examples, symmetric: false })
}

/// Pair every (xᵢ, p₁, yᵢ) with (xᵢ, p₋₁, ¬yᵢ), keeping each pair
/// adjacent. `set` must have been rendered against `p1`.
pub fn symmetric_augment(
    ctx: &RenderContext<'_>,
    set: &EntailmentSet,
    sources: &[LabeledExample],
    n_classes: usize,
    p1: &LabelDescription,
    p_neg: &LabelDescription,
) -> Result<EntailmentSet> {
    if set.symmetric {
        bail!(Config, "set is already symmetrically augmented");
    }
    if n_classes != 2 {
        bail!(Config, "symmetric augmentation needs a binary task, got {n_classes} classes");
    }
    if p1.text.is_none() || p_neg.text.is_none() {
        bail!(Config, "symmetric augmentation needs two label descriptions");
    }
    if p1.text == p_neg.text || p1.class == p_neg.class {
        bail!(Config, "the two label descriptions must differ");
    }
    if set.examples.len() != sources.len() {
        bail!(Input, "{} rendered examples for {} sources", set.examples.len(), sources.len());
    }
    let mut out = Vec::with_capacity(2 * set.examples.len());
    for (e, src) in set.examples.iter().zip(sources) {
        if e.source_id != src.id || e.class != p1.class {
            bail!(Input, "example {} was not rendered from this source against p1", e.source_id);
        }
        out.push(e.clone());
        out.push(ctx.render_example(src, p_neg)?);
    }
    Ok(EntailmentSet { examples: out, symmetric: true })
}

/// Probability of "entail" from a two-way logit pair.
pub fn entail_probability(logits: [f64; 2]) -> f64 {
    let m = logits[0].max(logits[1]);
    let a = libm::exp(logits[0] - m);
    let b = libm::exp(logits[1] - m);
    b / (a + b)
}

/// Index of the largest score; ties go to the lowest index.
pub fn argmax(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = i;
        }
    }
    best
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub class: usize,
    /// Per-class entail probabilities.
    pub probabilities: Vec<f64>,
}

/// Binary rule for a single description of `described` class: that class
/// wins when its entail probability beats the complement, which at exactly
/// 0.5 falls to the lower class index.
pub fn predict_binary(p_entail: f64, described: usize) -> Prediction {
    let mut probabilities = alloc::vec![1.0 - p_entail; 2];
    probabilities[described] = p_entail;
    Prediction { class: argmax(&probabilities), probabilities }
}

/// Argmax of per-class entail probabilities.
pub fn predict_multiclass(p_entail: &[f64]) -> Prediction {
    Prediction { class: argmax(p_entail), probabilities: p_entail.to_vec() }
}
