//! AdamW with decoupled weight decay.

use crate::error::{CoreError, Result};

/// Optimizer state: step count plus first/second moment buffers aligned with
/// the parameter list they were created for.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub weight_decay: f32,
    pub step_count: u64,
    pub first_moment: Vec<Vec<f32>>,
    pub second_moment: Vec<Vec<f32>>,
}

impl AdamW {
    /// Defaults mirror constant-lr AdamW training for diffusion transformers:
    /// lr 1e-4, betas (0.9, 0.999), eps 1e-8, weight decay 0.
    pub fn new(lr: f32, param_lens: &[usize]) -> Self {
        AdamW {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            step_count: 0,
            first_moment: param_lens.iter().map(|&n| vec![0.0; n]).collect(),
            second_moment: param_lens.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    /// One update over all parameters. `step_count` is incremented before
    /// the bias correction. A non-finite gradient aborts, naming the
    /// offending parameter.
    pub fn step(
        &mut self,
        names: &[String],
        params: &mut [Vec<f32>],
        grads: &[Vec<f32>],
    ) -> Result<()> {
        assert_eq!(params.len(), grads.len());
        assert_eq!(params.len(), self.first_moment.len());
        for (name, grad) in names.iter().zip(grads) {
            if grad.iter().any(|g| !g.is_finite()) {
                return Err(CoreError::NonFinite(format!(
                    "gradient of parameter '{name}' is not finite"
                )));
            }
        }
        self.step_count += 1;
        let t = self.step_count as f64;
        let bc1 = 1.0 - (self.beta1 as f64).powf(t);
        let bc2 = 1.0 - (self.beta2 as f64).powf(t);
        let inv_bc1 = (1.0 / bc1) as f32;
        let inv_bc2 = (1.0 / bc2) as f32;

        for ((param, grad), (m, v)) in params.iter_mut().zip(grads).zip(
            self.first_moment
                .iter_mut()
                .zip(self.second_moment.iter_mut()),
        ) {
            debug_assert_eq!(param.len(), grad.len());
            for i in 0..param.len() {
                let g = grad[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                let m_hat = m[i] * inv_bc1;
                let v_hat = v[i] * inv_bc2;
                // decoupled decay, then the Adam step
                param[i] -= self.lr * self.weight_decay * param[i];
                param[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn names(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("p{i}")).collect()
    }

    #[test]
    fn zero_grad_zero_decay_leaves_params_unchanged() {
        let mut opt = AdamW::new(0.1, &[3]);
        let mut params = vec![vec![1.0f32, -2.0, 0.5]];
        let grads = vec![vec![0.0f32; 3]];
        opt.step(&names(1), &mut params, &grads).unwrap();
        assert_eq!(params[0], vec![1.0, -2.0, 0.5]);
        assert_eq!(opt.step_count, 1);
    }

    #[test]
    fn single_step_with_unit_grad_moves_by_lr() {
        // After one step, m_hat = v_hat = 1, so the update is lr/(1 + eps).
        let mut opt = AdamW::new(0.1, &[1]);
        opt.eps = 0.0;
        let mut params = vec![vec![1.0f32]];
        let grads = vec![vec![1.0f32]];
        opt.step(&names(1), &mut params, &grads).unwrap();
        assert!((params[0][0] - 0.9).abs() < 1e-6, "got {}", params[0][0]);
    }

    #[test]
    fn decoupled_decay_scales_by_one_minus_lr_wd() {
        let mut opt = AdamW::new(0.1, &[1]);
        opt.weight_decay = 0.1;
        let mut params = vec![vec![2.0f32]];
        let grads = vec![vec![0.0f32]];
        opt.step(&names(1), &mut params, &grads).unwrap();
        assert!((params[0][0] - 2.0 * (1.0 - 0.01)).abs() < 1e-6);
    }

    #[test]
    fn non_finite_grad_names_parameter() {
        let mut opt = AdamW::new(0.1, &[1, 1]);
        let mut params = vec![vec![0.0f32], vec![0.0f32]];
        let grads = vec![vec![0.0f32], vec![f32::NAN]];
        let err = opt.step(&names(2), &mut params, &grads).unwrap_err();
        let msg = err.to_string();
        assert!(
            msg.contains("p1"),
            "message should name the parameter: {msg}"
        );
    }
}
