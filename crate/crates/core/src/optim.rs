//! Adam with bias correction.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::pointnet::ModelParams;
use crate::tensor::{Real, Tensor};

/// Gradients by parameter name.
pub type Grads<T> = BTreeMap<String, Tensor<T>>;

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T: Real = f32> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    moments: BTreeMap<String, (Vec<T>, Vec<T>)>,
}

impl<T: Real> Default for AdamState<T> {
    fn default() -> Self {
        Self::new(1e-3)
    }
}

impl<T: Real> AdamState<T> {
    pub fn new(lr: f64) -> Self {
        AdamState {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// One Adam update of every trainable parameter. All gradients must be
/// present; `grads` is cleared afterwards.
pub fn adam_step<T: Real>(
    params: &mut ModelParams<T>,
    grads: &mut Grads<T>,
    state: &mut AdamState<T>,
) -> Result<()> {
    for (name, p) in params.iter() {
        if !ModelParams::<T>::is_trainable(name) {
            continue;
        }
        match grads.get(name) {
            None => return Err(Error::Contract(format!("no gradient for parameter {name}"))),
            Some(g) if g.shape() != p.shape() => {
                return Err(Error::Dimension {
                    op: "adam_step",
                    lhs: p.shape().to_vec(),
                    rhs: g.shape().to_vec(),
                })
            }
            Some(g) if !g.all_finite() => {
                return Err(Error::NonFinite(format!("gradient of {name}")))
            }
            _ => {}
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (state.beta1, state.beta2);
    let c1 = 1.0 - num_traits::Float::powi(b1, t);
    let c2 = 1.0 - num_traits::Float::powi(b2, t);
    let (b1t, b2t) = (T::lit(b1), T::lit(b2));
    let (one_b1, one_b2) = (T::lit(1.0 - b1), T::lit(1.0 - b2));
    let (inv_c1, inv_c2) = (T::lit(1.0 / c1), T::lit(1.0 / c2));
    let (lr, eps) = (T::lit(state.lr), T::lit(state.eps));
    for (name, p) in params.iter_mut() {
        if !ModelParams::<T>::is_trainable(name) {
            continue;
        }
        let g = &grads[name];
        let (m, v) = state
            .moments
            .entry(String::from(name))
            .or_insert_with(|| (vec![T::zero(); g.numel()], vec![T::zero(); g.numel()]));
        for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
            *mi = b1t * *mi + one_b1 * gi;
            *vi = b2t * *vi + one_b2 * gi * gi;
            let m_hat = *mi * inv_c1;
            let v_hat = *vi * inv_c2;
            *w -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    grads.clear();
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(value: f64) -> ModelParams<f64> {
        let mut p = ModelParams::new();
        p.insert("w", Tensor::scalar(value));
        p
    }

    fn grad(g: f64) -> Grads<f64> {
        let mut m = Grads::new();
        m.insert("w".into(), Tensor::scalar(g));
        m
    }

    #[test]
    fn first_step_matches_hand_computation() {
        let mut p = single(0.5);
        let mut st = AdamState::new(1e-3);
        let g = 0.2;
        adam_step(&mut p, &mut grad(g), &mut st).unwrap();
        // m = 0.1·g, v = 0.001·g²; corrected m̂ = g, v̂ = g²
        let m_hat = (0.1 * g) / (1.0 - 0.9);
        let v_hat = (0.001 * g * g) / (1.0 - 0.999);
        let expect = 0.5 - 1e-3 * m_hat / (v_hat.sqrt() + 1e-8);
        assert!((p.get("w").unwrap().data()[0] - expect).abs() < 1e-15);
        assert_eq!(st.step_count(), 1);
    }

    #[test]
    fn constant_gradient_moves_by_lr_per_step() {
        let mut p = single(0.0);
        let mut st = AdamState::new(1e-3);
        for _ in 0..50 {
            adam_step(&mut p, &mut grad(-3.0), &mut st).unwrap();
        }
        // m̂ = g and v̂ = g² exactly for a constant gradient
        let w = p.get("w").unwrap().data()[0];
        assert!((w - 50.0 * 1e-3).abs() < 1e-9, "{w}");
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut p = single(1.25);
        let mut st = AdamState::new(1e-3);
        let mut g = grad(0.0);
        adam_step(&mut p, &mut g, &mut st).unwrap();
        assert_eq!(p.get("w").unwrap().data()[0], 1.25);
        assert!(g.is_empty());
    }

    #[test]
    fn missing_gradient_is_a_contract_error() {
        let mut p = single(1.0);
        let mut st = AdamState::<f64>::new(1e-3);
        assert!(matches!(
            adam_step(&mut p, &mut Grads::new(), &mut st),
            Err(Error::Contract(_))
        ));
        assert_eq!(st.step_count(), 0);
    }
}
