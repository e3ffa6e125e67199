use serde::{Deserialize, Serialize};

use super::{Result, Tensor, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
        }
    }
}

/// First/second moments and step count for one parameter tensor.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Moments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

/// Optimizer state, one [`Moments`] per parameter in store order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AdamWState {
    pub moments: Vec<Moments>,
}

impl AdamWState {
    pub fn new(sizes: impl IntoIterator<Item = usize>) -> Self {
        Self {
            moments: sizes
                .into_iter()
                .map(|n| Moments {
                    m: vec![0.0; n],
                    v: vec![0.0; n],
                    step: 0,
                })
                .collect(),
        }
    }

    /// One AdamW update of parameter `index` with decoupled weight decay.
    pub fn update(&mut self, index: usize, param: &mut [f64], grad: &[f64], lr: f64, cfg: &AdamWConfig) -> Result<()> {
        if !(lr > 0.0) || !lr.is_finite() {
            return Err(TensorError::Config(format!("learning rate must be positive, got {lr}")));
        }
        let st = &mut self.moments[index];
        if st.m.len() != param.len() || grad.len() != param.len() {
            return Err(TensorError::ShapeMismatch {
                op: "adamw_step",
                lhs: vec![param.len()],
                rhs: vec![grad.len()],
            });
        }
        st.step += 1;
        let bc1 = 1.0 - cfg.beta1.powi(st.step as i32);
        let bc2 = 1.0 - cfg.beta2.powi(st.step as i32);
        let decay = 1.0 - lr * cfg.weight_decay;
        for i in 0..param.len() {
            let g = grad[i];
            st.m[i] = cfg.beta1 * st.m[i] + (1.0 - cfg.beta1) * g;
            st.v[i] = cfg.beta2 * st.v[i] + (1.0 - cfg.beta2) * g * g;
            let mhat = st.m[i] / bc1;
            let vhat = st.v[i] / bc2;
            param[i] = param[i] * decay - lr * mhat / (vhat.sqrt() + cfg.eps);
        }
        Ok(())
    }
}

/// Applies one AdamW step to every parameter, `lrs[i]` being the rate for `params[i]`.
pub fn adamw_step(
    params: &mut [Tensor],
    grads: &[Vec<f64>],
    lrs: &[f64],
    cfg: &AdamWConfig,
    state: &mut AdamWState,
) -> Result<()> {
    if grads.len() != params.len() || lrs.len() != params.len() || state.moments.len() != params.len() {
        return Err(TensorError::ShapeMismatch {
            op: "adamw_step",
            lhs: vec![params.len()],
            rhs: vec![grads.len(), lrs.len(), state.moments.len()],
        });
    }
    if let Some(bad) = lrs.iter().find(|lr| !(**lr > 0.0)) {
        return Err(TensorError::Config(format!("learning rate must be positive, got {bad}")));
    }
    for (i, p) in params.iter_mut().enumerate() {
        state.update(i, p.data_mut(), &grads[i], lrs[i], cfg)?;
    }
    Ok(())
}

/// Rescales `grads` in place so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut [Vec<f64>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let k = max_norm / (norm + 1e-6);
        grads.iter_mut().flat_map(|g| g.iter_mut()).for_each(|v| *v *= k);
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one(v: f64) -> Vec<Tensor> {
        vec![Tensor::vector(vec![v])]
    }

    #[test]
    fn zero_gradient_without_decay_is_noop() {
        let mut p = one(0.37);
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut st = AdamWState::new([1]);
        adamw_step(&mut p, &[vec![0.0]], &[0.1], &cfg, &mut st).unwrap();
        assert_eq!(p[0].data()[0], 0.37);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = one(1.0);
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut st = AdamWState::new([1]);
        adamw_step(&mut p, &[vec![1.0]], &[0.1], &cfg, &mut st).unwrap();
        // m_hat = v_hat = 1, so the step is lr / (1 + eps)
        let expected = 1.0 - 0.1 / (1.0 + 1e-8);
        assert!((p[0].data()[0] - expected).abs() < 1e-15);
        assert!((p[0].data()[0] - 0.9).abs() < 1e-8);
    }

    #[test]
    fn decoupled_decay() {
        let mut p = one(2.0);
        let cfg = AdamWConfig {
            weight_decay: 0.1,
            ..Default::default()
        };
        let mut st = AdamWState::new([1]);
        adamw_step(&mut p, &[vec![0.0]], &[0.1], &cfg, &mut st).unwrap();
        assert!((p[0].data()[0] - 2.0 * (1.0 - 0.01)).abs() < 1e-15);
    }

    #[test]
    fn non_positive_lr_rejected() {
        let mut p = one(1.0);
        let mut st = AdamWState::new([1]);
        for lr in [0.0, -1e-3, f64::NAN] {
            let r = adamw_step(&mut p, &[vec![1.0]], &[lr], &AdamWConfig::default(), &mut st);
            assert!(matches!(r, Err(TensorError::Config(_))));
        }
    }

    #[test]
    fn clipping_caps_global_norm() {
        let mut g = vec![vec![3.0], vec![4.0]];
        let n = clip_grad_norm(&mut g, 0.1);
        assert_eq!(n, 5.0);
        let after = (g[0][0].powi(2) + g[1][0].powi(2)).sqrt();
        assert!((after - 0.1).abs() < 1e-6);
        let mut small = vec![vec![0.01]];
        clip_grad_norm(&mut small, 0.1);
        assert_eq!(small[0][0], 0.01);
    }
}
