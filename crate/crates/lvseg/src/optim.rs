//! Rectified Adam with decoupled weight decay.
//!
//! Follows the optimizer's published update rule: biased first/second
//! moments, the variance-rectification term rho_t derived from
//! rho_inf = 2 / (1 - beta2) - 1, a rectified adaptive step while rho_t > 4
//! and a plain bias-corrected momentum step otherwise. Weight decay is
//! decoupled: parameters shrink by (1 - lr * weight_decay) before the update.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct RAdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
}

impl Default for RAdamConfig {
    fn default() -> Self {
        RAdamConfig {
            learning_rate: 0.001,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 0.0005,
        }
    }
}

/// Per-parameter moment accumulators plus the shared step counter.
#[derive(Debug, Clone)]
pub struct RAdamState {
    pub config: RAdamConfig,
    step: u64,
    first_moment: Vec<Vec<f64>>,
    second_moment: Vec<Vec<f64>>,
}

impl RAdamState {
    /// `param_lens` gives the flat length of each parameter tensor, in the
    /// same order `step` will receive them.
    pub fn new(config: RAdamConfig, param_lens: &[usize]) -> Self {
        RAdamState {
            config,
            step: 0,
            first_moment: param_lens.iter().map(|&n| vec![0.0; n]).collect(),
            second_moment: param_lens.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One optimizer step over all parameter tensors.
    pub fn step(&mut self, params: &mut [&mut [f64]], grads: &[&[f64]]) -> Result<()> {
        if params.len() != self.first_moment.len() || grads.len() != params.len() {
            return Err(Error::contract(format!(
                "optimizer state tracks {} tensors, got {} params / {} grads",
                self.first_moment.len(),
                params.len(),
                grads.len()
            )));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.len() != self.first_moment[i].len() || g.len() != p.len() {
                return Err(Error::dimension(format!(
                    "tensor {} length mismatch: state {}, param {}, grad {}",
                    i,
                    self.first_moment[i].len(),
                    p.len(),
                    g.len()
                )));
            }
        }

        self.step += 1;
        let t = self.step as f64;
        let c = self.config;
        let beta1_t = c.beta1.powf(t);
        let beta2_t = c.beta2.powf(t);
        let rho_inf = 2.0 / (1.0 - c.beta2) - 1.0;
        let rho_t = rho_inf - 2.0 * t * beta2_t / (1.0 - beta2_t);
        let rectified = rho_t > 4.0;
        let rect = if rectified {
            (((rho_t - 4.0) * (rho_t - 2.0) * rho_inf)
                / ((rho_inf - 4.0) * (rho_inf - 2.0) * rho_t))
                .sqrt()
        } else {
            0.0
        };
        let decay = 1.0 - c.learning_rate * c.weight_decay;

        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let m = &mut self.first_moment[i];
            let v = &mut self.second_moment[i];
            for j in 0..p.len() {
                p[j] *= decay;
                m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * g[j];
                v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * g[j] * g[j];
                let m_hat = m[j] / (1.0 - beta1_t);
                if rectified {
                    let v_hat = (v[j] / (1.0 - beta2_t)).sqrt();
                    p[j] -= c.learning_rate * rect * m_hat / (v_hat + c.epsilon);
                } else {
                    p[j] -= c.learning_rate * m_hat;
                }
            }
        }
        Ok(())
    }
}
