//! Pre-norm transformer encoder with an entailment head on position 0.
//!
//! Parameters live in one flat list indexed by [`ParamId`]; [`Layout`] maps
//! roles to ids. Token embeddings are split into the vocabulary table and one
//! row parameter per pseudotoken slot, so id `V + i` reads `pseudo_rows[i]`.

use alloc::collections::btree_map::Entry;
use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{bail, Result};
use crate::rng;
use crate::tape::{AttentionShape, NodeId, ParamId, Tape};
use crate::tensor::{GeluVariant, Scalar, Tensor};
use crate::vocab::{CLS, PAD};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_seq: usize,
    /// Vocabulary size V, specials included.
    pub vocab_size: usize,
    /// Number of pseudotoken rows appended after the vocabulary.
    pub pseudo_capacity: usize,
    pub dropout: f32,
    pub gelu: GeluVariant,
    pub layer_norm_eps: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            n_layers: 4,
            n_heads: 4,
            d_ff: 256,
            max_seq: 64,
            vocab_size: 256,
            pseudo_capacity: 32,
            dropout: 0.0,
            gelu: GeluVariant::Tanh,
            layer_norm_eps: 1e-5,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_heads == 0 || self.n_layers == 0 || self.d_ff == 0 {
            bail!(Config, "encoder dimensions must be positive: {self:?}");
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            bail!(Config, "d_model {} is not divisible by n_heads {}", self.d_model, self.n_heads);
        }
        if self.max_seq < 2 || self.vocab_size <= crate::vocab::FIRST_ORDINARY as usize {
            bail!(Config, "max_seq {} / vocab_size {} too small", self.max_seq, self.vocab_size);
        }
        if self.dropout != 0.0 {
            bail!(Config, "dropout {} unsupported; only 0.0 keeps runs deterministic", self.dropout);
        }
        if self.layer_norm_eps <= 0.0 {
            bail!(Config, "layer_norm_eps must be positive");
        }
        Ok(())
    }

    /// Parameter count in closed form.
    pub fn parameter_count(&self) -> usize {
        let (d, f, v) = (self.d_model, self.d_ff, self.vocab_size);
        let per_layer = 2 * 2 * d + 4 * (d * d + d) + (d * f + f) + (f * d + d);
        (v + self.pseudo_capacity) * d
            + self.max_seq * d
            + self.n_layers * per_layer
            + 2 * d
            + (2 * d + 2)
            + (d * v + v)
    }
}

/// Which part of the network a parameter belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    VocabEmbedding,
    PseudoRow,
    Position,
    Layer,
    FinalNorm,
    EntailHead,
    MlmHead,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamInfo {
    pub name: String,
    pub shape: Vec<usize>,
    pub group: ParamGroup,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Init {
    Normal,
    Zeros,
    Ones,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerIds {
    pub ln1_gain: ParamId,
    pub ln1_bias: ParamId,
    pub wq: ParamId,
    pub bq: ParamId,
    pub wk: ParamId,
    pub bk: ParamId,
    pub wv: ParamId,
    pub bv: ParamId,
    pub wo: ParamId,
    pub bo: ParamId,
    pub ln2_gain: ParamId,
    pub ln2_bias: ParamId,
    pub w_in: ParamId,
    pub b_in: ParamId,
    pub w_out: ParamId,
    pub b_out: ParamId,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Layout {
    pub vocab_embedding: ParamId,
    pub pseudo_rows: Vec<ParamId>,
    pub position: ParamId,
    pub layers: Vec<LayerIds>,
    pub final_gain: ParamId,
    pub final_bias: ParamId,
    pub head_weight: ParamId,
    pub head_bias: ParamId,
    pub mlm_weight: ParamId,
    pub mlm_bias: ParamId,
}

struct LayoutBuilder {
    infos: Vec<ParamInfo>,
    inits: Vec<Init>,
}

impl LayoutBuilder {
    fn add(&mut self, name: String, shape: &[usize], group: ParamGroup, init: Init) -> ParamId {
        self.infos.push(ParamInfo { name, shape: shape.to_vec(), group });
        self.inits.push(init);
        self.infos.len() - 1
    }
}

fn build_layout(cfg: &EncoderConfig) -> (Layout, Vec<ParamInfo>, Vec<Init>) {
    use Init::*;
    use ParamGroup::*;
    let (d, f) = (cfg.d_model, cfg.d_ff);
    let mut b = LayoutBuilder { infos: Vec::new(), inits: Vec::new() };
    let vocab_embedding = b.add("embed.vocab".into(), &[cfg.vocab_size, d], VocabEmbedding, Normal);
    let pseudo_rows = (0..cfg.pseudo_capacity)
        .map(|i| b.add(format!("embed.pseudo.{i}"), &[1, d], PseudoRow, Normal))
        .collect();
    let position = b.add("embed.position".into(), &[cfg.max_seq, d], Position, Normal);
    let layers = (0..cfg.n_layers)
        .map(|l| {
            let mut p = |n: &str, shape: &[usize], init| b.add(format!("layer.{l}.{n}"), shape, Layer, init);
            LayerIds {
                ln1_gain: p("ln1.gain", &[d], Ones),
                ln1_bias: p("ln1.bias", &[d], Zeros),
                wq: p("attn.wq", &[d, d], Normal),
                bq: p("attn.bq", &[d], Zeros),
                wk: p("attn.wk", &[d, d], Normal),
                bk: p("attn.bk", &[d], Zeros),
                wv: p("attn.wv", &[d, d], Normal),
                bv: p("attn.bv", &[d], Zeros),
                wo: p("attn.wo", &[d, d], Normal),
                bo: p("attn.bo", &[d], Zeros),
                ln2_gain: p("ln2.gain", &[d], Ones),
                ln2_bias: p("ln2.bias", &[d], Zeros),
                w_in: p("ffn.w_in", &[d, f], Normal),
                b_in: p("ffn.b_in", &[f], Zeros),
                w_out: p("ffn.w_out", &[f, d], Normal),
                b_out: p("ffn.b_out", &[d], Zeros),
            }
        })
        .collect();
    let final_gain = b.add("final_norm.gain".into(), &[d], FinalNorm, Ones);
    let final_bias = b.add("final_norm.bias".into(), &[d], FinalNorm, Zeros);
    let head_weight = b.add("entail_head.weight".into(), &[d, 2], EntailHead, Normal);
    let head_bias = b.add("entail_head.bias".into(), &[2], EntailHead, Zeros);
    let mlm_weight = b.add("mlm_head.weight".into(), &[d, cfg.vocab_size], MlmHead, Normal);
    let mlm_bias = b.add("mlm_head.bias".into(), &[cfg.vocab_size], MlmHead, Zeros);
    let layout = Layout {
        vocab_embedding,
        pseudo_rows,
        position,
        layers,
        final_gain,
        final_bias,
        head_weight,
        head_bias,
        mlm_weight,
        mlm_bias,
    };
    (layout, b.infos, b.inits)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model<T> {
    config: EncoderConfig,
    layout: Layout,
    infos: Vec<ParamInfo>,
    params: Vec<Tensor<T>>,
}

const INIT_STD: f64 = 0.02;

impl<T: Scalar> Model<T> {
    pub fn init(cfg: &EncoderConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let (layout, infos, inits) = build_layout(cfg);
        let mut r = rng::seeded(seed);
        let params = infos
            .iter()
            .zip(&inits)
            .map(|(info, init)| match init {
                Init::Zeros => Tensor::zeros(&info.shape),
                Init::Ones => Tensor::filled(&info.shape, T::one()),
                Init::Normal => {
                    let n = info.shape.iter().product();
                    let data = (0..n).map(|_| T::of(rng::standard_normal(&mut r) * INIT_STD)).collect();
                    Tensor::new(&info.shape, data).expect("layout shape")
                }
            })
            .collect();
        Ok(Self { config: cfg.clone(), layout, infos, params })
    }

    /// Assemble a model from stored tensors, checking them against the
    /// layout implied by `cfg`.
    pub fn from_parts(cfg: &EncoderConfig, params: Vec<Tensor<T>>) -> Result<Self> {
        cfg.validate()?;
        let (layout, infos, _) = build_layout(cfg);
        if params.len() != infos.len() {
            bail!(Format, "config implies {} tensors, got {}", infos.len(), params.len());
        }
        for (p, info) in params.iter().zip(&infos) {
            if p.shape() != info.shape.as_slice() {
                bail!(Format, "tensor {} has shape {:?}, config implies {:?}", info.name, p.shape(), info.shape);
            }
        }
        Ok(Self { config: cfg.clone(), layout, infos, params })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn infos(&self) -> &[ParamInfo] {
        &self.infos
    }

    pub fn params(&self) -> &[Tensor<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.params
    }

    pub fn param(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id]
    }

    pub fn param_id(&self, name: &str) -> Option<ParamId> {
        self.infos.iter().position(|i| i.name == name)
    }

    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(|p| p.len()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            layout: self.layout.clone(),
            infos: self.infos.clone(),
            params: self.params.iter().map(|p| p.cast()).collect(),
        }
    }

    /// Pseudo row parameter for token id `id` (which must be ≥ V).
    pub fn pseudo_param(&self, id: u32) -> Result<ParamId> {
        let v = self.config.vocab_size as u32;
        let Some(&p) = id.checked_sub(v).and_then(|i| self.layout.pseudo_rows.get(i as usize)) else {
            bail!(Index, "token id {id} is neither vocabulary nor an allocated pseudotoken row");
        };
        Ok(p)
    }

    /// Overwrite pseudotoken rows from a registry.
    pub fn load_pseudo_rows(&mut self, reg: &crate::vocab::PseudotokenRegistry) -> Result<()> {
        if reg.dim != self.config.d_model {
            bail!(Dimension, "registry width {} vs d_model {}", reg.dim, self.config.d_model);
        }
        for e in &reg.entries {
            let p = self.pseudo_param(e.id)?;
            let row = reg.row(e.id).expect("entry row");
            for (dst, &v) in self.params[p].data_mut().iter_mut().zip(row) {
                *dst = T::of(v as f64);
            }
        }
        Ok(())
    }

    /// Bytes of every parameter whose id is in `ids`, in id order, each
    /// prefixed by its name and shape.
    pub fn hash_params(&self, ids: impl IntoIterator<Item = ParamId>) -> String {
        let mut h = Sha256::new();
        for id in ids {
            let info = &self.infos[id];
            h.update(info.name.as_bytes());
            for &s in &info.shape {
                h.update((s as u64).to_le_bytes());
            }
            h.update(self.params[id].to_le_bytes());
        }
        hex(&h.finalize())
    }

    /// Identity of the shared backbone: everything except the per-task
    /// pseudotoken rows and entailment head.
    pub fn fingerprint(&self) -> String {
        let ids: Vec<ParamId> = self
            .infos
            .iter()
            .enumerate()
            .filter(|(_, i)| !matches!(i.group, ParamGroup::PseudoRow | ParamGroup::EntailHead))
            .map(|(id, _)| id)
            .collect();
        self.hash_params(ids)
    }

    /// Encode one sequence without recording gradients. Returns L × d.
    pub fn encode(&self, ids: &[u32], overrides: Option<&BTreeMap<usize, Vec<T>>>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let mut binder = Binder::frozen(self);
        let mut extra = Vec::new();
        let mut ov = Vec::new();
        if let Some(map) = overrides {
            for (&pos, row) in map {
                if row.len() != self.config.d_model {
                    bail!(Dimension, "override row width {} vs d_model {}", row.len(), self.config.d_model);
                }
                let t = Tensor::new(&[1, row.len()], row.clone())?;
                extra.push(tape.constant(t));
                ov.push(RowOverride { position: pos, source: extra.len() - 1, row: 0 });
            }
        }
        let input = SequenceInput { ids: ids.to_vec(), overrides: ov };
        let enc = encode_batch(&mut tape, &mut binder, core::slice::from_ref(&input), &extra)?;
        let h = tape.value(enc.hidden);
        Tensor::new(&[ids.len(), h.cols()], h.data()[..ids.len() * h.cols()].to_vec())
    }

    /// Entailment logits `[not-entail, entail]` from encoded hidden states.
    pub fn entail_logits(&self, hidden: &Tensor<T>) -> [T; 2] {
        head_logits(hidden.row(0), self.param(self.layout.head_weight), self.param(self.layout.head_bias))
    }
}

/// Affine map of a single d-vector through a d×2 head.
pub fn head_logits<T: Scalar>(x: &[T], weight: &Tensor<T>, bias: &Tensor<T>) -> [T; 2] {
    let mut out = [bias.data()[0], bias.data()[1]];
    for (j, &xj) in x.iter().enumerate() {
        out[0] = out[0] + xj * weight.data()[j * 2];
        out[1] = out[1] + xj * weight.data()[j * 2 + 1];
    }
    out
}

fn hex(bytes: &[u8]) -> String {
    const DIGITS: &[u8; 16] = b"0123456789abcdef";
    let mut s = String::with_capacity(bytes.len() * 2);
    for &b in bytes {
        s.push(DIGITS[(b >> 4) as usize] as char);
        s.push(DIGITS[(b & 15) as usize] as char);
    }
    s
}

/// Puts model parameters on a tape on first use, marking those in the
/// trainable set as requiring gradients.
pub struct Binder<'p, T> {
    model: &'p Model<T>,
    trainable: BTreeSet<ParamId>,
    nodes: BTreeMap<ParamId, NodeId>,
}

impl<'p, T: Scalar> Binder<'p, T> {
    pub fn new(model: &'p Model<T>, trainable: BTreeSet<ParamId>) -> Self {
        Self { model, trainable, nodes: BTreeMap::new() }
    }

    pub fn frozen(model: &'p Model<T>) -> Self {
        Self::new(model, BTreeSet::new())
    }

    pub fn model(&self) -> &'p Model<T> {
        self.model
    }

    pub fn node(&mut self, tape: &mut Tape<'p, T>, id: ParamId) -> NodeId {
        if let Some(&n) = self.nodes.get(&id) {
            return n;
        }
        let n = tape.param(id, &self.model.params[id], self.trainable.contains(&id));
        self.nodes.insert(id, n);
        n
    }

    /// Record every trainable parameter, used or not, so backward can
    /// return a (possibly zero) gradient for each.
    pub fn bind_trainable(&mut self, tape: &mut Tape<'p, T>) {
        let ids: Vec<ParamId> = self.trainable.iter().copied().collect();
        for id in ids {
            self.node(tape, id);
        }
    }
}

/// Replace the input embedding at `position` with row `row` of
/// `extra_sources[source]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RowOverride {
    pub position: usize,
    pub source: usize,
    pub row: u32,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SequenceInput {
    pub ids: Vec<u32>,
    pub overrides: Vec<RowOverride>,
}

impl SequenceInput {
    pub fn plain(ids: Vec<u32>) -> Self {
        Self { ids, overrides: Vec::new() }
    }
}

pub struct Encoded {
    /// (batch · seq) × d final hidden states; rows past a sequence's length
    /// are padding.
    pub hidden: NodeId,
    pub seq: usize,
    pub lens: Vec<usize>,
    pub attention: Vec<NodeId>,
}

impl Encoded {
    /// Row of the [CLS] position of each batch item.
    pub fn cls_rows<T: Scalar>(&self, tape: &mut Tape<'_, T>) -> Result<NodeId> {
        let picks: Vec<(u32, u32)> = (0..self.lens.len()).map(|b| (0, (b * self.seq) as u32)).collect();
        tape.gather(&[self.hidden], &picks)
    }
}

/// Encode a padded batch in one pass. Sequences are padded with [PAD] to the
/// longest in the batch; padding keys are masked out of attention.
pub fn encode_batch<'p, T: Scalar>(
    tape: &mut Tape<'p, T>,
    binder: &mut Binder<'p, T>,
    batch: &[SequenceInput],
    extra_sources: &[NodeId],
) -> Result<Encoded> {
    let model = binder.model();
    let cfg = model.config();
    let layout = model.layout();
    if batch.is_empty() {
        bail!(Input, "cannot encode an empty batch");
    }
    let seq = batch.iter().map(|s| s.ids.len()).max().unwrap_or(0);
    if seq > cfg.max_seq {
        bail!(Input, "sequence length {seq} exceeds max_seq {}", cfg.max_seq);
    }
    let v = cfg.vocab_size as u32;
    let limit = v + cfg.pseudo_capacity as u32;

    enum Pick {
        Table(u32),
        Pseudo(u32),
        Extra(usize, u32),
    }
    let mut raw = Vec::with_capacity(batch.len() * seq);
    for input in batch {
        if input.ids.is_empty() {
            bail!(Input, "cannot encode an empty sequence");
        }
        for ov in &input.overrides {
            if ov.position >= input.ids.len() {
                bail!(Index, "override position {} beyond sequence length {}", ov.position, input.ids.len());
            }
            if ov.source >= extra_sources.len() {
                bail!(Index, "override source {} out of range", ov.source);
            }
        }
        for pos in 0..seq {
            if let Some(ov) = input.overrides.iter().rev().find(|o| o.position == pos) {
                raw.push(Pick::Extra(ov.source, ov.row));
                continue;
            }
            let id = input.ids.get(pos).copied().unwrap_or(PAD);
            if id >= limit {
                bail!(Index, "token id {id} out of range for {limit} embedding rows");
            }
            raw.push(if id < v { Pick::Table(id) } else { Pick::Pseudo(id) });
        }
    }

    // sources: vocabulary table, then pseudo rows in first-use order, then extras
    let mut sources = vec![binder.node(tape, layout.vocab_embedding)];
    let mut pseudo_source: BTreeMap<u32, u32> = BTreeMap::new();
    for p in &raw {
        if let Pick::Pseudo(id) = *p {
            if let Entry::Vacant(slot) = pseudo_source.entry(id) {
                sources.push(binder.node(tape, model.pseudo_param(id)?));
                slot.insert((sources.len() - 1) as u32);
            }
        }
    }
    let offset = sources.len() as u32;
    sources.extend_from_slice(extra_sources);
    let picks: Vec<(u32, u32)> = raw
        .iter()
        .map(|p| match *p {
            Pick::Table(id) => (0, id),
            Pick::Pseudo(id) => (pseudo_source[&id], 0),
            Pick::Extra(src, row) => (offset + src as u32, row),
        })
        .collect();
    let tokens = tape.gather(&sources, &picks)?;
    let pos_table = binder.node(tape, layout.position);
    let pos_picks: Vec<(u32, u32)> = (0..batch.len()).flat_map(|_| (0..seq as u32).map(|p| (0, p))).collect();
    let positions = tape.gather(&[pos_table], &pos_picks)?;
    let mut h = tape.add(tokens, positions)?;

    let lens: Vec<usize> = batch.iter().map(|s| s.ids.len()).collect();
    let shape = AttentionShape { batch: batch.len(), seq, heads: cfg.n_heads, lens: lens.clone() };
    let eps = T::of(cfg.layer_norm_eps);
    let mut attention = Vec::with_capacity(layout.layers.len());
    for ids in &layout.layers {
        let mut p = |id| binder.node(tape, id);
        let (g1, b1) = (p(ids.ln1_gain), p(ids.ln1_bias));
        let (wq, bq, wk, bk) = (p(ids.wq), p(ids.bq), p(ids.wk), p(ids.bk));
        let (wv, bv, wo, bo) = (p(ids.wv), p(ids.bv), p(ids.wo), p(ids.bo));
        let (g2, b2) = (p(ids.ln2_gain), p(ids.ln2_bias));
        let (w_in, b_in, w_out, b_out) = (p(ids.w_in), p(ids.b_in), p(ids.w_out), p(ids.b_out));

        let a = tape.layer_norm(h, g1, b1, eps)?;
        let q = tape.linear(a, wq, bq)?;
        let k = tape.linear(a, wk, bk)?;
        let vv = tape.linear(a, wv, bv)?;
        let att = tape.attention(q, k, vv, shape.clone())?;
        attention.push(att);
        let o = tape.linear(att, wo, bo)?;
        h = tape.add(h, o)?;

        let f = tape.layer_norm(h, g2, b2, eps)?;
        let f = tape.linear(f, w_in, b_in)?;
        let f = tape.gelu(f, cfg.gelu);
        let f = tape.linear(f, w_out, b_out)?;
        h = tape.add(h, f)?;
    }
    let (gf, bf) = (binder.node(tape, layout.final_gain), binder.node(tape, layout.final_bias));
    let hidden = tape.layer_norm(h, gf, bf, eps)?;
    Ok(Encoded { hidden, seq, lens, attention })
}

/// Prepend [CLS] unless already present.
pub fn with_cls(ids: &[u32]) -> Vec<u32> {
    if ids.first() == Some(&CLS) {
        return ids.to_vec();
    }
    let mut out = Vec::with_capacity(ids.len() + 1);
    out.push(CLS);
    out.extend_from_slice(ids);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> EncoderConfig {
        EncoderConfig {
            d_model: 8,
            n_layers: 2,
            n_heads: 2,
            d_ff: 16,
            max_seq: 12,
            vocab_size: 20,
            pseudo_capacity: 4,
            ..EncoderConfig::default()
        }
    }

    #[test]
    fn default_parameter_count_closed_form_matches_enumeration() {
        let cfg = EncoderConfig::default();
        let m = Model::<f32>::init(&cfg, 0).unwrap();
        // hand-summed: 16384 + 2048 + 4096 + 4·49984 + 128 + 130 + 16640
        assert_eq!(cfg.parameter_count(), 239_362);
        assert_eq!(m.parameter_count(), 239_362);
    }

    #[test]
    fn init_determinism() {
        let a = Model::<f32>::init(&small(), 3).unwrap();
        let b = Model::<f32>::init(&small(), 3).unwrap();
        let c = Model::<f32>::init(&small(), 4).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn bad_head_count_is_config_error() {
        let cfg = EncoderConfig { n_heads: 3, ..small() };
        assert!(matches!(Model::<f32>::init(&cfg, 0), Err(crate::Error::Config(_))));
    }

    #[test]
    fn too_long_sequence_rejected() {
        let m = Model::<f32>::init(&small(), 0).unwrap();
        let ids = vec![5u32; 13];
        assert!(matches!(m.encode(&ids, None), Err(crate::Error::Input(_))));
    }

    #[test]
    fn identity_override_changes_nothing() {
        let m = Model::<f32>::init(&small(), 1).unwrap();
        let ids = vec![CLS, 7, 8, 21, 2];
        let plain = m.encode(&ids, None).unwrap();
        let mut ov = BTreeMap::new();
        ov.insert(2, m.param(m.layout().vocab_embedding).row(8).to_vec());
        ov.insert(3, m.param(m.pseudo_param(21).unwrap()).row(0).to_vec());
        assert_eq!(m.encode(&ids, Some(&ov)).unwrap(), plain);
    }

    #[test]
    fn batch_rows_match_single_sequences() {
        let m = Model::<f32>::init(&small(), 2).unwrap();
        let a = vec![CLS, 7, 8, 9, 2];
        let b = vec![CLS, 10, 2];
        let mut tape = Tape::new();
        let mut binder = Binder::frozen(&m);
        let batch = [SequenceInput::plain(a.clone()), SequenceInput::plain(b.clone()), SequenceInput::plain(a.clone())];
        let enc = encode_batch(&mut tape, &mut binder, &batch, &[]).unwrap();
        let h = tape.value(enc.hidden);
        let sa = m.encode(&a, None).unwrap();
        let sb = m.encode(&b, None).unwrap();
        for i in 0..a.len() {
            assert_eq!(h.row(i), sa.row(i));
            assert_eq!(h.row(2 * enc.seq + i), sa.row(i));
        }
        for i in 0..b.len() {
            for (x, y) in h.row(enc.seq + i).iter().zip(sb.row(i)) {
                assert!((x - y).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let m = Model::<f32>::init(&small(), 2).unwrap();
        let mut tape = Tape::new();
        let mut binder = Binder::frozen(&m);
        let batch = [SequenceInput::plain(vec![CLS, 7, 8, 9, 2]), SequenceInput::plain(vec![CLS, 10, 2])];
        let enc = encode_batch(&mut tape, &mut binder, &batch, &[]).unwrap();
        for &att in &enc.attention {
            let (probs, shape) = tape.attention_probs(att).unwrap();
            let l = shape.seq;
            for b in 0..shape.batch {
                for h in 0..shape.heads {
                    for i in 0..shape.lens[b] {
                        let row = &probs[((b * shape.heads + h) * l + i) * l..][..l];
                        let s: f32 = row.iter().sum();
                        assert!((s - 1.0).abs() < 1e-6);
                        assert!(row[shape.lens[b]..].iter().all(|&p| p == 0.0));
                    }
                }
            }
        }
    }

    #[test]
    fn entail_logits_cases() {
        let mut m = Model::<f64>::init(&small(), 5).unwrap();
        let hw = m.layout().head_weight;
        let hb = m.layout().head_bias;
        m.params_mut()[hb] = Tensor::new(&[2], vec![0.3, -0.2]).unwrap();
        let zero = Tensor::<f64>::zeros(&[3, 8]);
        assert_eq!(m.entail_logits(&zero), [0.3, -0.2]);

        let hidden = m.encode(&[CLS, 6, 7], None).unwrap();
        let got = m.entail_logits(&hidden);
        let w = m.param(hw);
        let mut want = [0.3, -0.2];
        for j in 0..8 {
            want[0] += hidden.row(0)[j] * w.data()[j * 2];
            want[1] += hidden.row(0)[j] * w.data()[j * 2 + 1];
        }
        assert!((got[0] - want[0]).abs() < 1e-6 && (got[1] - want[1]).abs() < 1e-6);

        m.params_mut()[hw] = Tensor::zeros(&[8, 2]);
        assert_eq!(m.entail_logits(&hidden), [0.3, -0.2]);
    }

    #[test]
    fn fingerprint_ignores_task_parameters() {
        let mut m = Model::<f32>::init(&small(), 5).unwrap();
        let fp = m.fingerprint();
        let hb = m.layout().head_bias;
        let p0 = m.layout().pseudo_rows[0];
        m.params_mut()[hb].data_mut()[0] = 1.0;
        m.params_mut()[p0].data_mut()[0] = 1.0;
        assert_eq!(m.fingerprint(), fp);
        let w = m.layout().layers[0].wq;
        m.params_mut()[w].data_mut()[0] += 1.0;
        assert_ne!(m.fingerprint(), fp);
    }
}
