use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second moment estimates, one buffer per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: u64,
}

impl AdamState {
    pub fn new(params: &[Tensor]) -> Self {
        AdamState {
            m: params.iter().map(|t| vec![0.0; t.numel()]).collect(),
            v: params.iter().map(|t| vec![0.0; t.numel()]).collect(),
            step: 0,
        }
    }

    pub fn step(&self) -> u64 {
        self.step
    }
}

/// One bias-corrected Adam update using each tensor's gradient slot. A
/// tensor without a gradient is treated as having a zero gradient.
pub fn adam_step(params: &mut [Tensor], state: &mut AdamState, cfg: &AdamConfig) -> Result<()> {
    if params.len() != state.m.len() {
        return Err(Error::Contract(format!(
            "optimizer state tracks {} tensors, got {}",
            state.m.len(),
            params.len()
        )));
    }
    for (i, t) in params.iter().enumerate() {
        if t.numel() != state.m[i].len() {
            return Err(Error::Contract(format!(
                "optimizer moment {i} has {} entries, tensor has {}",
                state.m[i].len(),
                t.numel()
            )));
        }
    }
    state.step += 1;
    let bc1 = 1.0 - cfg.beta1.powi(state.step as i32);
    let bc2 = 1.0 - cfg.beta2.powi(state.step as i32);
    for (i, t) in params.iter_mut().enumerate() {
        let grad = t.grad().map(<[f64]>::to_vec);
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        let data = t.data_mut();
        for j in 0..data.len() {
            let g = grad.as_ref().map_or(0.0, |g| g[j]);
            m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g;
            v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g * g;
            let m_hat = m[j] / bc1;
            let v_hat = v[j] / bc2;
            data[j] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}

/// Rescales all gradients so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(params: &mut [Tensor], max_norm: f64) -> Result<f64> {
    let norm = params
        .iter()
        .filter_map(Tensor::grad)
        .flatten()
        .map(|g| g * g)
        .sum::<f64>()
        .sqrt();
    if !norm.is_finite() {
        return Err(Error::NonFinite("gradient norm"));
    }
    if norm > max_norm {
        let scale = max_norm / norm;
        params.iter_mut().for_each(|t| t.scale_grad(scale));
    }
    Ok(norm)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_learning_rate_against_gradient_sign() {
        let mut params = vec![Tensor::vector(vec![0.5, -0.5, 2.0])];
        params[0].accumulate_grad(&[3.0, -0.01, 1e-3]).unwrap();
        let mut state = AdamState::new(&params);
        let cfg = AdamConfig {
            lr: 1e-3,
            ..AdamConfig::default()
        };
        adam_step(&mut params, &mut state, &cfg).unwrap();
        let moved: Vec<f64> = params[0].data().iter().zip([0.5, -0.5, 2.0]).map(|(a, b)| a - b).collect();
        // m̂ = g, v̂ = g², so the step is lr·g/(|g| + eps).
        for (d, g) in moved.iter().zip([3.0f64, -0.01, 1e-3]) {
            let want = -1e-3 * g / (g.abs() + 1e-8);
            assert!((d - want).abs() < 1e-15, "{d} vs {want}");
            assert!((d.abs() - 1e-3).abs() < 1e-7);
        }
        assert_eq!(state.step(), 1);
    }

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let mut params = vec![Tensor::vector(vec![0.25, 1.0])];
        params[0].accumulate_grad(&[0.0, 0.0]).unwrap();
        let before = params.clone();
        let mut state = AdamState::new(&params);
        adam_step(&mut params, &mut state, &AdamConfig::default()).unwrap();
        assert_eq!(params[0].data(), before[0].data());
    }

    #[test]
    fn shape_mismatch_is_a_contract_error() {
        let mut params = vec![Tensor::vector(vec![1.0, 2.0])];
        let mut state = AdamState::new(&[Tensor::vector(vec![1.0])]);
        assert!(matches!(
            adam_step(&mut params, &mut state, &AdamConfig::default()),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn clipping_caps_global_norm() {
        let mut params = vec![Tensor::vector(vec![0.0; 2]), Tensor::vector(vec![0.0])];
        params[0].accumulate_grad(&[3.0, 0.0]).unwrap();
        params[1].accumulate_grad(&[4.0]).unwrap();
        let before = clip_grad_norm(&mut params, 1.0).unwrap();
        assert!((before - 5.0).abs() < 1e-12);
        assert!((params[0].grad().unwrap()[0] - 0.6).abs() < 1e-12);
        assert!((params[1].grad().unwrap()[0] - 0.8).abs() < 1e-12);
        let again = clip_grad_norm(&mut params, 1.0).unwrap();
        assert!((again - 1.0).abs() < 1e-12);
    }
}
