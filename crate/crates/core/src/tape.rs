//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Nodes are appended in creation order, which is a topological order by
//! construction. [`Tape::backward`] walks the tape once in reverse and only
//! computes adjoints along paths that reach a requested parameter; frozen
//! parameters never receive gradient storage.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::vec;
use alloc::vec::Vec;
use core::ops::Deref;

use crate::error::{bail, Result};
use crate::tensor::{gemm_acc, gemm_nt_acc, gemm_tn_acc, softmax_in_place, GeluVariant, Scalar, Tensor};

/// Index of a model parameter.
pub type ParamId = usize;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(usize);

enum Value<'p, T> {
    Owned(Tensor<T>),
    Borrowed(&'p Tensor<T>),
}

impl<T> Deref for Value<'_, T> {
    type Target = Tensor<T>;
    fn deref(&self) -> &Tensor<T> {
        match self {
            Value::Owned(t) => t,
            Value::Borrowed(t) => t,
        }
    }
}

enum Op<T> {
    Leaf,
    MatMul { a: NodeId, b: NodeId },
    Linear { x: NodeId, w: NodeId, b: NodeId },
    Add { a: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId },
    LayerNorm { x: NodeId, gain: NodeId, bias: NodeId, xhat: Vec<T>, rstd: Vec<T> },
    Gelu { x: NodeId, variant: GeluVariant },
    Softmax { x: NodeId },
    Gather { sources: Vec<NodeId>, picks: Vec<(u32, u32)> },
    Attention { q: NodeId, k: NodeId, v: NodeId, shape: AttentionShape, probs: Vec<T> },
    CrossEntropy { logits: NodeId, targets: Vec<usize>, probs: Vec<T> },
    Sum { x: NodeId },
}

impl<T> Op<T> {
    fn inputs(&self) -> Vec<NodeId> {
        match self {
            Op::Leaf => Vec::new(),
            Op::MatMul { a, b } | Op::Add { a, b } | Op::Mul { a, b } => vec![*a, *b],
            Op::Linear { x, w, b } => vec![*x, *w, *b],
            Op::LayerNorm { x, gain, bias, .. } => vec![*x, *gain, *bias],
            Op::Gelu { x, .. } | Op::Softmax { x } | Op::Sum { x } => vec![*x],
            Op::Gather { sources, .. } => sources.clone(),
            Op::Attention { q, k, v, .. } => vec![*q, *k, *v],
            Op::CrossEntropy { logits, .. } => vec![*logits],
        }
    }
}

/// Layout of a batched multi-head attention input: `batch` sequences padded
/// to `seq` rows each, with `lens[b]` real (unmasked) positions.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttentionShape {
    pub batch: usize,
    pub seq: usize,
    pub heads: usize,
    pub lens: Vec<usize>,
}

struct Node<'p, T> {
    value: Value<'p, T>,
    op: Op<T>,
    requires_grad: bool,
    param: Option<ParamId>,
}

pub struct Tape<'p, T> {
    nodes: Vec<Node<'p, T>>,
    consumed: bool,
}

impl<'p, T: Scalar> Default for Tape<'p, T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'p, T: Scalar> Tape<'p, T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), consumed: false }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn push(&mut self, value: Value<'p, T>, op: Op<T>) -> NodeId {
        let requires_grad = op.inputs().iter().any(|i| self.nodes[i.0].requires_grad);
        self.nodes.push(Node { value, op, requires_grad, param: None });
        NodeId(self.nodes.len() - 1)
    }

    /// Record a model parameter. Borrowed, so no copy is made.
    pub fn param(&mut self, id: ParamId, t: &'p Tensor<T>, requires_grad: bool) -> NodeId {
        self.nodes.push(Node { value: Value::Borrowed(t), op: Op::Leaf, requires_grad, param: Some(id) });
        NodeId(self.nodes.len() - 1)
    }

    /// Record a borrowed constant (never differentiated).
    pub fn borrowed(&mut self, t: &'p Tensor<T>) -> NodeId {
        self.nodes.push(Node { value: Value::Borrowed(t), op: Op::Leaf, requires_grad: false, param: None });
        NodeId(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, t: Tensor<T>) -> NodeId {
        self.nodes.push(Node { value: Value::Owned(t), op: Op::Leaf, requires_grad: false, param: None });
        NodeId(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let out = crate::tensor::matmul(self.value(a), self.value(b))?;
        Ok(self.push(Value::Owned(out), Op::MatMul { a, b }))
    }

    /// `x · w + b` with `x` n×in, `w` in×out, `b` of length out.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        let (n, d_in) = (xv.rows(), xv.cols());
        if wv.shape().len() != 2 || wv.shape()[0] != d_in || bv.len() != wv.shape()[1] {
            bail!(
                Dimension,
                "linear shapes incompatible: x {:?}, w {:?}, b {:?}",
                xv.shape(),
                wv.shape(),
                bv.shape()
            );
        }
        let d_out = wv.shape()[1];
        let mut data = Vec::with_capacity(n * d_out);
        for _ in 0..n {
            data.extend_from_slice(bv.data());
        }
        gemm_acc(xv.data(), wv.data(), &mut data, n, d_in, d_out);
        let out = Tensor::new(&[n, d_out], data)?;
        Ok(self.push(Value::Owned(out), Op::Linear { x, w, b }))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            bail!(Dimension, "add shapes differ: {:?} vs {:?}", av.shape(), bv.shape());
        }
        let mut out = av.clone();
        out.add_assign(bv);
        Ok(self.push(Value::Owned(out), Op::Add { a, b }))
    }

    /// Elementwise product of same-shape tensors.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            bail!(Dimension, "mul shapes differ: {:?} vs {:?}", av.shape(), bv.shape());
        }
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| x * y).collect();
        let out = Tensor::new(av.shape(), data)?;
        Ok(self.push(Value::Owned(out), Op::Mul { a, b }))
    }

    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId, eps: T) -> Result<NodeId> {
        if eps <= T::zero() {
            bail!(Input, "layer norm eps must be positive");
        }
        let (xv, gv, bv) = (self.value(x), self.value(gain), self.value(bias));
        let d = xv.cols();
        if gv.len() != d || bv.len() != d {
            bail!(
                Dimension,
                "layer norm width {d} vs gain {:?} / bias {:?}",
                gv.shape(),
                bv.shape()
            );
        }
        let n = xv.rows();
        let inv_d = T::one() / T::of(d as f64);
        let mut xhat = Vec::with_capacity(n * d);
        let mut rstd = Vec::with_capacity(n);
        let mut out = Vec::with_capacity(n * d);
        for r in 0..n {
            let row = xv.row(r);
            let mean = row.iter().fold(T::zero(), |a, &v| a + v) * inv_d;
            let var = row.iter().fold(T::zero(), |a, &v| a + (v - mean) * (v - mean)) * inv_d;
            let rs = T::one() / (var + eps).sqrt();
            rstd.push(rs);
            for (j, &v) in row.iter().enumerate() {
                let h = (v - mean) * rs;
                xhat.push(h);
                out.push(h * gv.data()[j] + bv.data()[j]);
            }
        }
        let out = Tensor::new(xv.shape(), out)?;
        Ok(self.push(Value::Owned(out), Op::LayerNorm { x, gain, bias, xhat, rstd }))
    }

    pub fn gelu(&mut self, x: NodeId, variant: GeluVariant) -> NodeId {
        let xv = self.value(x);
        let data = xv.data().iter().map(|&v| variant.apply(v)).collect();
        let out = Tensor::new(xv.shape(), data).expect("same shape");
        self.push(Value::Owned(out), Op::Gelu { x, variant })
    }

    pub fn softmax_rows(&mut self, x: NodeId) -> Result<NodeId> {
        let out = crate::tensor::softmax_rows(self.value(x))?;
        Ok(self.push(Value::Owned(out), Op::Softmax { x }))
    }

    /// Builds an n×d tensor whose row `i` is row `picks[i].1` of source
    /// `sources[picks[i].0]`. All sources must share the trailing width.
    pub fn gather(&mut self, sources: &[NodeId], picks: &[(u32, u32)]) -> Result<NodeId> {
        let Some(&first) = sources.first() else {
            bail!(Dimension, "gather needs at least one source");
        };
        let d = self.value(first).cols();
        for &s in sources {
            if self.value(s).cols() != d {
                bail!(
                    Dimension,
                    "gather sources differ in width: {d} vs {}",
                    self.value(s).cols()
                );
            }
        }
        if picks.is_empty() {
            bail!(Dimension, "gather needs at least one row");
        }
        let mut data = Vec::with_capacity(picks.len() * d);
        for &(s, r) in picks {
            let Some(&src) = sources.get(s as usize) else {
                bail!(Index, "gather source {s} out of range");
            };
            let t = self.value(src);
            if r as usize >= t.rows() {
                bail!(Index, "row {r} out of range for source with {} rows", t.rows());
            }
            data.extend_from_slice(t.row(r as usize));
        }
        let out = Tensor::new(&[picks.len(), d], data)?;
        Ok(self.push(Value::Owned(out), Op::Gather { sources: sources.to_vec(), picks: picks.to_vec() }))
    }

    /// Row gather from a single table.
    pub fn embedding_lookup(&mut self, table: NodeId, ids: &[u32]) -> Result<NodeId> {
        let rows = self.value(table).rows();
        if let Some(&bad) = ids.iter().find(|&&i| i as usize >= rows) {
            bail!(Index, "token id {bad} out of range for table of {rows} rows");
        }
        let picks: Vec<(u32, u32)> = ids.iter().map(|&i| (0, i)).collect();
        self.gather(&[table], &picks)
    }

    /// Multi-head scaled dot-product attention over padded sequences.
    /// Keys at positions `>= lens[b]` are masked out; padded query rows
    /// produce zeros.
    pub fn attention(&mut self, q: NodeId, k: NodeId, v: NodeId, shape: AttentionShape) -> Result<NodeId> {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let d = qv.cols();
        let rows = shape.batch * shape.seq;
        if qv.shape() != kv.shape() || qv.shape() != vv.shape() || qv.rows() != rows {
            bail!(
                Dimension,
                "attention q/k/v shapes {:?} {:?} {:?} vs {} rows",
                qv.shape(),
                kv.shape(),
                vv.shape(),
                rows
            );
        }
        if shape.heads == 0 || d % shape.heads != 0 {
            bail!(Dimension, "width {d} not divisible by {} heads", shape.heads);
        }
        if shape.lens.len() != shape.batch || shape.lens.iter().any(|&l| l == 0 || l > shape.seq) {
            bail!(Dimension, "attention lengths {:?} invalid for seq {}", shape.lens, shape.seq);
        }
        let dh = d / shape.heads;
        let scale = T::one() / T::of(dh as f64).sqrt();
        let l = shape.seq;
        let mut out = vec![T::zero(); rows * d];
        let mut probs = vec![T::zero(); shape.batch * shape.heads * l * l];
        let (qd, kd, vd) = (qv.data(), kv.data(), vv.data());
        for b in 0..shape.batch {
            let len = shape.lens[b];
            for h in 0..shape.heads {
                let off = h * dh;
                for i in 0..len {
                    let qi = &qd[(b * l + i) * d + off..(b * l + i) * d + off + dh];
                    let p = &mut probs[((b * shape.heads + h) * l + i) * l..][..len];
                    for (j, pj) in p.iter_mut().enumerate() {
                        let kj = &kd[(b * l + j) * d + off..(b * l + j) * d + off + dh];
                        let s = qi.iter().zip(kj).fold(T::zero(), |a, (&x, &y)| a + x * y);
                        *pj = s * scale;
                    }
                    softmax_in_place(p);
                    let o = &mut out[(b * l + i) * d + off..(b * l + i) * d + off + dh];
                    for (j, &pj) in p.iter().enumerate() {
                        let vj = &vd[(b * l + j) * d + off..(b * l + j) * d + off + dh];
                        for (oo, &vv) in o.iter_mut().zip(vj) {
                            *oo = *oo + pj * vv;
                        }
                    }
                }
            }
        }
        let out = Tensor::new(qv.shape(), out)?;
        Ok(self.push(Value::Owned(out), Op::Attention { q, k, v, shape, probs }))
    }

    /// Attention probabilities saved by an attention node, laid out
    /// `[batch][head][query][key]` with `seq × seq` blocks.
    pub fn attention_probs(&self, id: NodeId) -> Option<(&[T], &AttentionShape)> {
        match &self.nodes[id.0].op {
            Op::Attention { probs, shape, .. } => Some((probs, shape)),
            _ => None,
        }
    }

    /// Mean negative log-likelihood of `targets` under row-wise softmax.
    pub fn cross_entropy(&mut self, logits: NodeId, targets: &[usize]) -> Result<NodeId> {
        let lv = self.value(logits);
        let (n, c) = (lv.rows(), lv.cols());
        if targets.len() != n {
            bail!(Dimension, "{} targets for {n} logit rows", targets.len());
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= c) {
            bail!(Index, "target class {bad} out of range for {c} classes");
        }
        let mut probs = lv.data().to_vec();
        let mut loss = T::zero();
        for (r, &t) in targets.iter().enumerate() {
            let row = &lv.data()[r * c..(r + 1) * c];
            let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
            let lse = row.iter().fold(T::zero(), |a, &v| a + (v - max).exp()).ln() + max;
            loss = loss + (lse - row[t]);
            softmax_in_place(&mut probs[r * c..(r + 1) * c]);
        }
        let out = Tensor::scalar(loss / T::of(n as f64));
        Ok(self.push(Value::Owned(out), Op::CrossEntropy { logits, targets: targets.to_vec(), probs }))
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let out = Tensor::scalar(self.value(x).sum());
        self.push(Value::Owned(out), Op::Sum { x })
    }

    /// Reverse pass from the scalar `loss`. Returns gradients for exactly the
    /// `wanted` parameters. Each tape supports a single backward pass.
    pub fn backward(&mut self, loss: NodeId, wanted: &BTreeSet<ParamId>) -> Result<BTreeMap<ParamId, Tensor<T>>> {
        if self.consumed {
            bail!(State, "backward already ran on this tape");
        }
        self.consumed = true;
        if self.value(loss).len() != 1 {
            bail!(Dimension, "loss must be a scalar, got shape {:?}", self.value(loss).shape());
        }
        let mut seen = BTreeSet::new();
        for node in &self.nodes {
            if let Some(p) = node.param {
                if wanted.contains(&p) {
                    if !node.requires_grad {
                        bail!(State, "parameter {p} was recorded without requires_grad");
                    }
                    seen.insert(p);
                }
            }
        }
        if let Some(missing) = wanted.iter().find(|p| !seen.contains(p)) {
            bail!(State, "parameter {missing} is not on the tape");
        }

        // needs[i]: some path from node i reaches a wanted parameter.
        let mut needs = vec![false; self.nodes.len()];
        for (i, node) in self.nodes.iter().enumerate() {
            needs[i] = match node.op {
                Op::Leaf => node.param.is_some_and(|p| wanted.contains(&p)),
                _ => node.requires_grad && node.op.inputs().iter().any(|j| needs[j.0]),
            };
        }

        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if needs[loss.0] {
            grads[loss.0] = Some(Tensor::filled(self.value(loss).shape(), T::one()));
        }
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !needs[i] {
                continue;
            }
            if let Op::Leaf = self.nodes[i].op {
                grads[i] = Some(g);
                continue;
            }
            self.propagate(i, &g, &needs, &mut grads)?;
        }

        let mut out: BTreeMap<ParamId, Tensor<T>> = BTreeMap::new();
        for (i, node) in self.nodes.iter().enumerate() {
            let Some(p) = node.param.filter(|p| wanted.contains(p)) else { continue };
            let g = grads[i].take().unwrap_or_else(|| Tensor::zeros(node.value.shape()));
            match out.get_mut(&p) {
                Some(acc) => acc.add_assign(&g),
                None => {
                    out.insert(p, g);
                }
            }
        }
        Ok(out)
    }

    fn propagate(&self, i: usize, g: &Tensor<T>, needs: &[bool], grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let node = &self.nodes[i];
        let acc = |grads: &mut [Option<Tensor<T>>], id: NodeId, t: Tensor<T>| match &mut grads[id.0] {
            Some(existing) => existing.add_assign(&t),
            slot @ None => *slot = Some(t),
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                if needs[a.0] {
                    let mut ga = Tensor::zeros(av.shape());
                    gemm_nt_acc(g.data(), bv.data(), ga.data_mut(), m, n, k);
                    acc(grads, *a, ga);
                }
                if needs[b.0] {
                    let mut gb = Tensor::zeros(bv.shape());
                    gemm_tn_acc(av.data(), g.data(), gb.data_mut(), m, k, n);
                    acc(grads, *b, gb);
                }
            }
            Op::Linear { x, w, b } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let (n, d_in, d_out) = (xv.rows(), xv.cols(), wv.cols());
                if needs[x.0] {
                    let mut gx = Tensor::zeros(xv.shape());
                    gemm_nt_acc(g.data(), wv.data(), gx.data_mut(), n, d_out, d_in);
                    acc(grads, *x, gx);
                }
                if needs[w.0] {
                    let mut gw = Tensor::zeros(wv.shape());
                    gemm_tn_acc(xv.data(), g.data(), gw.data_mut(), n, d_in, d_out);
                    acc(grads, *w, gw);
                }
                if needs[b.0] {
                    let mut gb = Tensor::zeros(self.value(*b).shape());
                    for r in 0..n {
                        for (o, &v) in gb.data_mut().iter_mut().zip(g.row(r)) {
                            *o = *o + v;
                        }
                    }
                    acc(grads, *b, gb);
                }
            }
            Op::Add { a, b } => {
                if needs[a.0] {
                    acc(grads, *a, g.clone());
                }
                if needs[b.0] {
                    acc(grads, *b, g.clone());
                }
            }
            Op::Mul { a, b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if needs[a.0] {
                    let data = g.data().iter().zip(bv.data()).map(|(&x, &y)| x * y).collect();
                    acc(grads, *a, Tensor::new(av.shape(), data)?);
                }
                if needs[b.0] {
                    let data = g.data().iter().zip(av.data()).map(|(&x, &y)| x * y).collect();
                    acc(grads, *b, Tensor::new(bv.shape(), data)?);
                }
            }
            Op::LayerNorm { x, gain, bias, xhat, rstd } => {
                let gv = self.value(*gain);
                let d = gv.len();
                let n = rstd.len();
                if needs[x.0] {
                    let inv_d = T::one() / T::of(d as f64);
                    let mut gx = Tensor::zeros(self.value(*x).shape());
                    for r in 0..n {
                        let gr = g.row(r);
                        let xh = &xhat[r * d..(r + 1) * d];
                        let mut mean_dy = T::zero();
                        let mut mean_dy_xh = T::zero();
                        for j in 0..d {
                            let dxh = gr[j] * gv.data()[j];
                            mean_dy = mean_dy + dxh;
                            mean_dy_xh = mean_dy_xh + dxh * xh[j];
                        }
                        mean_dy = mean_dy * inv_d;
                        mean_dy_xh = mean_dy_xh * inv_d;
                        let out = gx.row_mut(r);
                        for j in 0..d {
                            let dxh = gr[j] * gv.data()[j];
                            out[j] = rstd[r] * (dxh - mean_dy - xh[j] * mean_dy_xh);
                        }
                    }
                    acc(grads, *x, gx);
                }
                if needs[gain.0] {
                    let mut gg = Tensor::zeros(gv.shape());
                    for r in 0..n {
                        let gr = g.row(r);
                        for j in 0..d {
                            gg.data_mut()[j] = gg.data()[j] + gr[j] * xhat[r * d + j];
                        }
                    }
                    acc(grads, *gain, gg);
                }
                if needs[bias.0] {
                    let mut gb = Tensor::zeros(self.value(*bias).shape());
                    for r in 0..n {
                        for (o, &v) in gb.data_mut().iter_mut().zip(g.row(r)) {
                            *o = *o + v;
                        }
                    }
                    acc(grads, *bias, gb);
                }
            }
            Op::Gelu { x, variant } => {
                if needs[x.0] {
                    let xv = self.value(*x);
                    let data = xv
                        .data()
                        .iter()
                        .zip(g.data())
                        .map(|(&v, &gv)| gv * variant.derivative(v))
                        .collect();
                    acc(grads, *x, Tensor::new(xv.shape(), data)?);
                }
            }
            Op::Softmax { x } => {
                if needs[x.0] {
                    let p = &node.value;
                    let c = p.cols();
                    let mut gx = Tensor::zeros(p.shape());
                    for r in 0..p.rows() {
                        let (pr, gr) = (p.row(r), g.row(r));
                        let dot = pr.iter().zip(gr).fold(T::zero(), |a, (&pp, &gg)| a + pp * gg);
                        let out = gx.row_mut(r);
                        for j in 0..c {
                            out[j] = pr[j] * (gr[j] - dot);
                        }
                    }
                    acc(grads, *x, gx);
                }
            }
            Op::Gather { sources, picks } => {
                let mut partial: BTreeMap<usize, Tensor<T>> = BTreeMap::new();
                for (row, &(s, r)) in picks.iter().enumerate() {
                    let src = sources[s as usize];
                    if !needs[src.0] {
                        continue;
                    }
                    let t = partial.entry(s as usize).or_insert_with(|| Tensor::zeros(self.value(src).shape()));
                    let dst = t.row_mut(r as usize);
                    for (o, &v) in dst.iter_mut().zip(g.row(row)) {
                        *o = *o + v;
                    }
                }
                for (s, t) in partial {
                    acc(grads, sources[s], t);
                }
            }
            Op::Attention { q, k, v, shape, probs } => {
                let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
                let d = qv.cols();
                let l = shape.seq;
                let dh = d / shape.heads;
                let scale = T::one() / T::of(dh as f64).sqrt();
                let mut gq = vec![T::zero(); qv.len()];
                let mut gk = vec![T::zero(); kv.len()];
                let mut gv = vec![T::zero(); vv.len()];
                let (qd, kd, vd, gd) = (qv.data(), kv.data(), vv.data(), g.data());
                let mut dp = vec![T::zero(); l];
                for b in 0..shape.batch {
                    let len = shape.lens[b];
                    for h in 0..shape.heads {
                        let off = h * dh;
                        for i in 0..len {
                            let p = &probs[((b * shape.heads + h) * l + i) * l..][..len];
                            let go = &gd[(b * l + i) * d + off..][..dh];
                            let mut dot = T::zero();
                            for j in 0..len {
                                let vj = &vd[(b * l + j) * d + off..][..dh];
                                let s = go.iter().zip(vj).fold(T::zero(), |a, (&x, &y)| a + x * y);
                                dp[j] = s;
                                dot = dot + p[j] * s;
                                let gvj = &mut gv[(b * l + j) * d + off..][..dh];
                                for (o, &x) in gvj.iter_mut().zip(go) {
                                    *o = *o + p[j] * x;
                                }
                            }
                            let qi = &qd[(b * l + i) * d + off..][..dh];
                            for j in 0..len {
                                let ds = p[j] * (dp[j] - dot) * scale;
                                if ds == T::zero() {
                                    continue;
                                }
                                let kj = &kd[(b * l + j) * d + off..][..dh];
                                let gqi = &mut gq[(b * l + i) * d + off..][..dh];
                                for (o, &x) in gqi.iter_mut().zip(kj) {
                                    *o = *o + ds * x;
                                }
                                let gkj = &mut gk[(b * l + j) * d + off..][..dh];
                                for (o, &x) in gkj.iter_mut().zip(qi) {
                                    *o = *o + ds * x;
                                }
                            }
                        }
                    }
                }
                if needs[q.0] {
                    acc(grads, *q, Tensor::new(qv.shape(), gq)?);
                }
                if needs[k.0] {
                    acc(grads, *k, Tensor::new(kv.shape(), gk)?);
                }
                if needs[v.0] {
                    acc(grads, *v, Tensor::new(vv.shape(), gv)?);
                }
            }
            Op::CrossEntropy { logits, targets, probs } => {
                if needs[logits.0] {
                    let lv = self.value(*logits);
                    let c = lv.cols();
                    let scale = g.data()[0] / T::of(targets.len() as f64);
                    let mut gl = probs.clone();
                    for (r, &t) in targets.iter().enumerate() {
                        gl[r * c + t] = gl[r * c + t] - T::one();
                    }
                    for v in &mut gl {
                        *v = *v * scale;
                    }
                    acc(grads, *logits, Tensor::new(lv.shape(), gl)?);
                }
            }
            Op::Sum { x } => {
                if needs[x.0] {
                    acc(grads, *x, Tensor::filled(self.value(*x).shape(), g.data()[0]));
                }
            }
        }
        Ok(())
    }
}
