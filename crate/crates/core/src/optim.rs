//! Adam with decoupled weight decay.

use alloc::collections::BTreeMap;

use crate::error::{bail, Result};
use crate::tape::ParamId;
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamWConfig {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Self { lr, weight_decay, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// First/second moment estimates per parameter plus the shared step count.
#[derive(Clone, Debug, Default)]
pub struct AdamState<T> {
    step: u64,
    first: BTreeMap<ParamId, Tensor<T>>,
    second: BTreeMap<ParamId, Tensor<T>>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new() -> Self {
        Self { step: 0, first: BTreeMap::new(), second: BTreeMap::new() }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// One update of every parameter present in `grads`. Parameters without a
/// gradient are untouched, including by weight decay.
pub fn adamw_step<T: Scalar>(
    params: &mut [Tensor<T>],
    grads: &BTreeMap<ParamId, Tensor<T>>,
    state: &mut AdamState<T>,
    cfg: &AdamWConfig,
) -> Result<()> {
    for (&id, g) in grads {
        let Some(p) = params.get(id) else {
            bail!(Index, "gradient for unknown parameter {id}");
        };
        if p.shape() != g.shape() {
            bail!(Dimension, "parameter {id} shape {:?} vs gradient {:?}", p.shape(), g.shape());
        }
        for moments in [&state.first, &state.second] {
            if let Some(m) = moments.get(&id) {
                if m.shape() != p.shape() {
                    bail!(Dimension, "moment shape {:?} vs parameter {id} {:?}", m.shape(), p.shape());
                }
            }
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (T::of(cfg.beta1), T::of(cfg.beta2));
    let bias1 = T::one() - b1.powi(t);
    let bias2 = T::one() - b2.powi(t);
    let lr = T::of(cfg.lr);
    let eps = T::of(cfg.eps);
    let decay = T::one() - lr * T::of(cfg.weight_decay);
    for (&id, g) in grads {
        let p = &mut params[id];
        let m = state.first.entry(id).or_insert_with(|| Tensor::zeros(p.shape()));
        let v = state.second.entry(id).or_insert_with(|| Tensor::zeros(p.shape()));
        for (((w, &gi), mi), vi) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut().iter_mut())
            .zip(v.data_mut().iter_mut())
        {
            *mi = b1 * *mi + (T::one() - b1) * gi;
            *vi = b2 * *vi + (T::one() - b2) * gi * gi;
            let mhat = *mi / bias1;
            let vhat = *vi / bias2;
            *w = *w * decay - lr * mhat / (vhat.sqrt() + eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn zero_gradient_no_decay_leaves_params() {
        let mut params = vec![Tensor::<f64>::new(&[3], vec![1.0, -2.0, 0.5]).unwrap()];
        let before = params.clone();
        let grads = BTreeMap::from([(0, Tensor::zeros(&[3]))]);
        let mut st = AdamState::new();
        adamw_step(&mut params, &grads, &mut st, &AdamWConfig::new(0.01, 0.0)).unwrap();
        assert_eq!(params, before);
    }

    #[test]
    fn decoupled_decay_scales_params() {
        let mut params = vec![Tensor::<f64>::new(&[2], vec![1.0, -3.0]).unwrap()];
        let grads = BTreeMap::from([(0, Tensor::zeros(&[2]))]);
        let mut st = AdamState::new();
        adamw_step(&mut params, &grads, &mut st, &AdamWConfig::new(0.01, 0.1)).unwrap();
        let f = 1.0 - 0.01 * 0.1;
        assert_eq!(params[0].data(), &[1.0 * f, -3.0 * f]);
    }

    #[test]
    fn three_steps_on_square_match_hand_stepping() {
        // hand-stepped reference for f(w) = w², w0 = 1, lr = 0.1, no decay
        let (b1, b2, eps, lr) = (0.9f64, 0.999f64, 1e-8f64, 0.1f64);
        let (mut w, mut m, mut v) = (1.0f64, 0.0f64, 0.0f64);
        for t in 1..=3 {
            let g = 2.0 * w;
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mh = m / (1.0 - b1.powi(t));
            let vh = v / (1.0 - b2.powi(t));
            w -= lr * mh / (vh.sqrt() + eps);
        }

        let mut params = vec![Tensor::<f64>::scalar(1.0)];
        let mut st = AdamState::new();
        for _ in 0..3 {
            let g = Tensor::scalar(2.0 * params[0].data()[0]);
            adamw_step(&mut params, &BTreeMap::from([(0, g)]), &mut st, &AdamWConfig::new(lr, 0.0)).unwrap();
        }
        assert!((params[0].data()[0] - w).abs() < 1e-6);
        assert_eq!(st.step_count(), 3);
    }

    #[test]
    fn shape_mismatch_is_dimension_error() {
        let mut params = vec![Tensor::<f32>::zeros(&[2])];
        let grads = BTreeMap::from([(0, Tensor::zeros(&[3]))]);
        let mut st = AdamState::new();
        let err = adamw_step(&mut params, &grads, &mut st, &AdamWConfig::new(0.1, 0.0));
        assert!(matches!(err, Err(crate::Error::Dimension(_))));
    }
}
