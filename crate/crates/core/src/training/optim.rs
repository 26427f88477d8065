//! Bias-corrected Adam over the named parameter store.

use std::collections::BTreeMap;

use crate::params::Params;
use crate::tensor::Tensor;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// First/second moment estimates plus the shared step counter.
#[derive(Debug, Clone, Default)]
pub struct AdamState {
    pub m: BTreeMap<String, Tensor<f32>>,
    pub v: BTreeMap<String, Tensor<f32>>,
    pub step: u64,
}

impl AdamState {
    pub fn new() -> Self {
        Self::default()
    }
}

/// Standard bias-corrected Adam update for one tensor. `step` is the
/// 1-based step count *after* this update. Per-element arithmetic runs
/// in f64 and is quantized to f32 on store, so the update is exactly
/// the textbook rule at f32 storage precision.
pub fn adam_update_tensor(
    param: &mut [f32],
    grad: &[f32],
    m: &mut [f32],
    v: &mut [f32],
    step: u64,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
) {
    debug_assert_eq!(param.len(), grad.len());
    let bc1 = 1.0 - beta1.powi(step as i32);
    let bc2 = 1.0 - beta2.powi(step as i32);
    for i in 0..param.len() {
        let g = grad[i] as f64;
        m[i] = (beta1 * m[i] as f64 + (1.0 - beta1) * g) as f32;
        v[i] = (beta2 * v[i] as f64 + (1.0 - beta2) * g * g) as f32;
        let m_hat = m[i] as f64 / bc1;
        let v_hat = v[i] as f64 / bc2;
        param[i] = (param[i] as f64 - lr * m_hat / (v_hat.sqrt() + eps)) as f32;
    }
}

/// Applies one Adam step across all named parameters (sorted order, so
/// updates are bit-reproducible). Missing moment tensors are created
/// zeroed on first use.
pub fn adam_step(
    params: &mut Params<f32>,
    grads: &BTreeMap<String, Tensor<f32>>,
    state: &mut AdamState,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
) {
    state.step += 1;
    let step = state.step;
    for (name, param) in params.iter_mut() {
        let grad = grads
            .get(name)
            .unwrap_or_else(|| panic!("missing gradient for {name}"));
        let shape = param.shape().to_vec();
        let m = state
            .m
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros(&shape));
        let v = state
            .v
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros(&shape));
        adam_update_tensor(
            param.data_mut(),
            grad.data(),
            m.data_mut(),
            v.data_mut(),
            step,
            lr,
            beta1,
            beta2,
            eps,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_parameters_unchanged_but_decays_moments() {
        let mut params = Params::new();
        params.insert("w", Tensor::new(&[2], vec![1.0f32, -2.0]).unwrap());
        let mut state = AdamState::new();
        state.m.insert("w".into(), Tensor::new(&[2], vec![0.5f32, 0.5]).unwrap());
        state.v.insert("w".into(), Tensor::new(&[2], vec![0.25f32, 0.25]).unwrap());
        let mut grads = BTreeMap::new();
        grads.insert("w".to_string(), Tensor::zeros(&[2]));

        // bias-corrected m is nonzero on the first steps, so run from a
        // large step count where the correction is ~1 and check decay
        state.step = 1000;
        let before = params.get("w").unwrap().clone();
        adam_step(&mut params, &grads, &mut state, 0.0, ADAM_BETA1, ADAM_BETA2, ADAM_EPS);
        assert_eq!(params.get("w").unwrap().data(), before.data());
        assert!((state.m["w"].data()[0] - 0.45).abs() < 1e-6);
        assert!((state.v["w"].data()[0] - 0.2497502).abs() < 1e-6);
    }

    #[test]
    fn first_step_moves_by_roughly_lr_times_sign() {
        let mut params = Params::new();
        params.insert("w", Tensor::new(&[1], vec![1.0f32]).unwrap());
        let mut state = AdamState::new();
        let mut grads = BTreeMap::new();
        grads.insert("w".to_string(), Tensor::new(&[1], vec![0.37f32]).unwrap());
        adam_step(&mut params, &grads, &mut state, 1e-2, ADAM_BETA1, ADAM_BETA2, ADAM_EPS);
        // update ≈ -lr * sign(g) for |g| >> eps
        let got = params.get("w").unwrap().data()[0];
        assert!((got - (1.0 - 0.01)).abs() < 1e-5, "{got}");
    }

    #[test]
    fn five_steps_on_a_parabola_match_a_reference_implementation() {
        // minimize f(x) = x^2 from x = 1 with lr 0.1
        let (lr, b1, b2, eps) = (0.1, ADAM_BETA1, ADAM_BETA2, ADAM_EPS);
        let mut params = Params::new();
        params.insert("x", Tensor::new(&[1], vec![1.0f32]).unwrap());
        let mut state = AdamState::new();

        // independent scalar reference, written directly from the update
        // rule (f64 arithmetic, f32 storage)
        let mut x_ref = 1.0f32;
        let (mut m_ref, mut v_ref) = (0.0f32, 0.0f32);
        for t in 1..=5u64 {
            let g = (2.0 * x_ref) as f64;
            m_ref = (0.9 * m_ref as f64 + 0.1 * g) as f32;
            v_ref = (0.999 * v_ref as f64 + 0.001 * g * g) as f32;
            let m_hat = m_ref as f64 / (1.0 - b1.powi(t as i32));
            let v_hat = v_ref as f64 / (1.0 - b2.powi(t as i32));
            x_ref = (x_ref as f64 - lr * m_hat / (v_hat.sqrt() + eps)) as f32;

            let g_store = {
                let x = params.get("x").unwrap().data()[0];
                let mut m = BTreeMap::new();
                m.insert("x".to_string(), Tensor::new(&[1], vec![2.0 * x]).unwrap());
                m
            };
            adam_step(&mut params, &g_store, &mut state, lr, b1, b2, eps);
        }
        let got = params.get("x").unwrap().data()[0];
        assert!((got as f64 - x_ref as f64).abs() < 1e-10, "{got} vs {x_ref}");
    }
}
