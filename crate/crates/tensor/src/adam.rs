//! Adam with decoupled weight decay.

use crate::error::{Result, TensorError};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
        }
    }
}

/// Optimizer state: first/second moment buffers per parameter plus the step
/// counter. Buffers are created lazily on the first step and shape-checked
/// on every step after that.
#[derive(Clone, Debug)]
pub struct Adam<E: Scalar> {
    pub config: AdamConfig,
    step: u64,
    moments: Vec<(Tensor<E>, Tensor<E>)>,
}

impl<E: Scalar> Adam<E> {
    pub fn new(config: AdamConfig) -> Adam<E> {
        Adam {
            config,
            step: 0,
            moments: Vec::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Applies one update. `params` and `grads` must line up index for index
    /// across every call of this optimizer's lifetime.
    pub fn step(&mut self, params: &mut [&mut Tensor<E>], grads: &[Tensor<E>]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(TensorError::Config {
                detail: format!("{} params but {} grads", params.len(), grads.len()),
            });
        }
        if self.moments.is_empty() {
            self.moments = params
                .iter()
                .map(|p| (Tensor::zeros(p.shape()), Tensor::zeros(p.shape())))
                .collect();
        }
        if self.moments.len() != params.len() {
            return Err(TensorError::Config {
                detail: format!(
                    "optimizer state tracks {} params, got {}",
                    self.moments.len(),
                    params.len()
                ),
            });
        }
        self.step += 1;
        let t = self.step as i32;
        let c = &self.config;
        let bias1 = 1.0 - c.beta1.powi(t);
        let bias2 = 1.0 - c.beta2.powi(t);
        let lr = E::from_f64(c.lr);
        let b1 = E::from_f64(c.beta1);
        let b2 = E::from_f64(c.beta2);
        let one_m_b1 = E::from_f64(1.0 - c.beta1);
        let one_m_b2 = E::from_f64(1.0 - c.beta2);
        let inv_bias1 = E::from_f64(1.0 / bias1);
        let inv_bias2 = E::from_f64(1.0 / bias2);
        let eps = E::from_f64(c.eps);
        let wd = E::from_f64(c.weight_decay);

        for ((param, grad), (m, v)) in params.iter_mut().zip(grads).zip(&mut self.moments) {
            if param.shape() != grad.shape() || param.shape() != m.shape() {
                return Err(TensorError::DimMismatch {
                    op: "adam_step",
                    lhs: param.shape().to_vec(),
                    rhs: grad.shape().to_vec(),
                });
            }
            let pd = param.data_mut();
            let gd = grad.data();
            let md = m.data_mut();
            let vd = v.data_mut();
            for i in 0..pd.len() {
                let g = gd[i];
                md[i] = b1 * md[i] + one_m_b1 * g;
                vd[i] = b2 * vd[i] + one_m_b2 * g * g;
                let m_hat = md[i] * inv_bias1;
                let v_hat = vd[i] * inv_bias2;
                pd[i] = pd[i] - lr * (m_hat / (v_hat.sqrt() + eps) + wd * pd[i]);
            }
        }
        Ok(())
    }

    /// Moment buffers for checkpointing, in parameter order.
    pub fn moments(&self) -> &[(Tensor<E>, Tensor<E>)] {
        &self.moments
    }

    /// Restores checkpointed state.
    pub fn restore(&mut self, step: u64, moments: Vec<(Tensor<E>, Tensor<E>)>) {
        self.step = step;
        self.moments = moments;
    }
}
