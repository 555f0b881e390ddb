//! Central finite-difference checks of every differentiable op, in f64.

use std::collections::BTreeSet;

use entail_core::encoder::{encode_batch, Binder, EncoderConfig, Model, SequenceInput};
use entail_core::tape::{AttentionShape, NodeId, Tape};
use entail_core::tensor::{GeluVariant, Tensor};
use entail_core::vocab::{CLS, SEP};

const EPS: f64 = 1e-4;

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-6)
}

fn pseudo_random(n: usize, seed: u64) -> Vec<f64> {
    let mut s = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
    (0..n)
        .map(|_| {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
        })
        .collect()
}

/// Checks d(loss)/d(inputs[i]) for every input of a graph builder.
/// `build` records the op on a fresh tape from leaf inputs and returns a
/// scalar loss node.
fn check_op<F>(inputs: &[Tensor<f64>], tol: f64, build: F) -> f64
where
    F: Fn(&mut Tape<'_, f64>, &[NodeId]) -> NodeId,
{
    let loss_of = |ins: &[Tensor<f64>]| {
        let mut tape = Tape::new();
        let nodes: Vec<NodeId> = ins.iter().enumerate().map(|(i, t)| tape.param(i, t, false)).collect();
        let l = build(&mut tape, &nodes);
        tape.value(l).data()[0]
    };
    let mut tape = Tape::new();
    let nodes: Vec<NodeId> = inputs.iter().enumerate().map(|(i, t)| tape.param(i, t, true)).collect();
    let loss = build(&mut tape, &nodes);
    let wanted: BTreeSet<usize> = (0..inputs.len()).collect();
    let grads = tape.backward(loss, &wanted).unwrap();

    let mut worst = 0.0f64;
    for (i, input) in inputs.iter().enumerate() {
        for j in 0..input.len() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += EPS;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= EPS;
            let numeric = (loss_of(&plus) - loss_of(&minus)) / (2.0 * EPS);
            let analytic = grads[&i].data()[j];
            worst = worst.max(rel_err(analytic, numeric));
        }
    }
    assert!(worst < tol, "max relative error {worst} >= {tol}");
    worst
}

fn t(shape: &[usize], seed: u64) -> Tensor<f64> {
    Tensor::new(shape, pseudo_random(shape.iter().product(), seed)).unwrap()
}

/// Weighted sum so every output element gets a distinct upstream gradient.
fn weighted_sum(tape: &mut Tape<'_, f64>, x: NodeId) -> NodeId {
    let shape = tape.value(x).shape().to_vec();
    let w = tape.constant(t(&shape, 99));
    let prod = tape.mul(x, w).unwrap();
    tape.sum(prod)
}

#[test]
fn mul_gradients() {
    check_op(&[t(&[2, 3], 17), t(&[2, 3], 18)], 1e-4, |tape, n| {
        let m = tape.mul(n[0], n[1]).unwrap();
        weighted_sum(tape, m)
    });
}

#[test]
fn matmul_gradients() {
    check_op(&[t(&[3, 4], 1), t(&[4, 2], 2)], 1e-3, |tape, n| {
        let m = tape.matmul(n[0], n[1]).unwrap();
        weighted_sum(tape, m)
    });
}

#[test]
fn linear_gradients() {
    check_op(&[t(&[3, 4], 3), t(&[4, 5], 4), t(&[5], 5)], 1e-3, |tape, n| {
        let m = tape.linear(n[0], n[1], n[2]).unwrap();
        weighted_sum(tape, m)
    });
}

#[test]
fn softmax_gradients() {
    check_op(&[t(&[3, 5], 6)], 1e-3, |tape, n| {
        let s = tape.softmax_rows(n[0]).unwrap();
        weighted_sum(tape, s)
    });
}

#[test]
fn layer_norm_gradients() {
    check_op(&[t(&[2, 8], 7), t(&[8], 8), t(&[8], 9)], 1e-3, |tape, n| {
        let y = tape.layer_norm(n[0], n[1], n[2], 1e-5).unwrap();
        weighted_sum(tape, y)
    });
}

#[test]
fn gelu_gradients_both_variants() {
    for variant in [GeluVariant::Tanh, GeluVariant::Erf] {
        let x = Tensor::new(&[2, 6], pseudo_random(12, 10).iter().map(|v| v * 3.0).collect()).unwrap();
        check_op(&[x], 1e-4, |tape, n| {
            let y = tape.gelu(n[0], variant);
            weighted_sum(tape, y)
        });
    }
}

#[test]
fn embedding_lookup_gradients() {
    check_op(&[t(&[5, 4], 11)], 1e-4, |tape, n| {
        let e = tape.embedding_lookup(n[0], &[3, 0, 3, 4]).unwrap();
        weighted_sum(tape, e)
    });
}

#[test]
fn cross_entropy_gradients() {
    check_op(&[t(&[4, 2], 12)], 1e-4, |tape, n| tape.cross_entropy(n[0], &[0, 1, 1, 0]).unwrap());
}

#[test]
fn cross_entropy_matches_f64_reference() {
    let logits = t(&[4, 2], 13);
    let targets = [1usize, 0, 0, 1];
    let mut want = 0.0;
    for (r, &tg) in targets.iter().enumerate() {
        let row = logits.row(r);
        let lse = (row[0].exp() + row[1].exp()).ln();
        want += lse - row[tg];
    }
    want /= 4.0;
    let l32: Tensor<f32> = logits.cast();
    let mut tape = Tape::new();
    let n = tape.borrowed(&l32);
    let ce = tape.cross_entropy(n, &targets).unwrap();
    assert!((tape.value(ce).data()[0] as f64 - want).abs() < 1e-6);
}

#[test]
fn attention_gradients_with_padding() {
    let shape = AttentionShape { batch: 2, seq: 4, heads: 2, lens: vec![4, 2] };
    check_op(&[t(&[8, 6], 14), t(&[8, 6], 15), t(&[8, 6], 16)], 1e-3, move |tape, n| {
        let a = tape.attention(n[0], n[1], n[2], shape.clone()).unwrap();
        // padded rows of the output are zero; restrict the loss to real rows
        let real = tape.gather(&[a], &[(0, 0), (0, 1), (0, 2), (0, 3), (0, 4), (0, 5)]).unwrap();
        weighted_sum(tape, real)
    });
}

#[test]
fn full_encoder_loss_all_parameters() {
    let cfg = EncoderConfig {
        d_model: 8,
        n_layers: 2,
        n_heads: 2,
        d_ff: 12,
        max_seq: 10,
        vocab_size: 12,
        pseudo_capacity: 2,
        ..EncoderConfig::default()
    };
    // larger init so gradients are not dominated by round-off
    let mut model = Model::<f64>::init(&cfg, 21).unwrap();
    for p in model.params_mut() {
        for v in p.data_mut() {
            *v *= 10.0;
        }
    }
    let batch = vec![
        SequenceInput::plain(vec![CLS, 6, 7, SEP, 12, 9]),
        SequenceInput::plain(vec![CLS, 8, SEP, 13]),
    ];
    let targets = [1usize, 0];
    let all: BTreeSet<usize> = (0..model.params().len()).collect();

    let loss_of = |m: &Model<f64>| {
        let mut tape = Tape::new();
        let mut binder = Binder::frozen(m);
        let enc = encode_batch(&mut tape, &mut binder, &batch, &[]).unwrap();
        let cls = enc.cls_rows(&mut tape).unwrap();
        let w = binder.node(&mut tape, m.layout().head_weight);
        let b = binder.node(&mut tape, m.layout().head_bias);
        let logits = tape.linear(cls, w, b).unwrap();
        let l = tape.cross_entropy(logits, &targets).unwrap();
        tape.value(l).data()[0]
    };

    let grads = {
        let mut tape = Tape::new();
        let mut binder = Binder::new(&model, all.clone());
        binder.bind_trainable(&mut tape);
        let enc = encode_batch(&mut tape, &mut binder, &batch, &[]).unwrap();
        let cls = enc.cls_rows(&mut tape).unwrap();
        let w = binder.node(&mut tape, model.layout().head_weight);
        let b = binder.node(&mut tape, model.layout().head_bias);
        let logits = tape.linear(cls, w, b).unwrap();
        let l = tape.cross_entropy(logits, &targets).unwrap();
        tape.backward(l, &all).unwrap()
    };
    assert_eq!(grads.len(), all.len());

    let mut worst = 0.0f64;
    let mut probe = model.clone();
    for id in 0..model.params().len() {
        for j in 0..model.param(id).len() {
            let orig = model.param(id).data()[j];
            probe.params_mut()[id].data_mut()[j] = orig + EPS;
            let up = loss_of(&probe);
            probe.params_mut()[id].data_mut()[j] = orig - EPS;
            let down = loss_of(&probe);
            probe.params_mut()[id].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * EPS);
            worst = worst.max(rel_err(grads[&id].data()[j], numeric));
        }
    }
    assert!(worst < 1e-3, "max relative error {worst}");
}
