//! Adamax: Adam with an infinity-norm second moment.

use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamaxConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamaxConfig {
    fn default() -> Self {
        Self {
            lr: 5e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone)]
pub struct AdamaxState {
    pub config: AdamaxConfig,
    pub step: u64,
    first_moment: Vec<Tensor>,
    inf_norm: Vec<Tensor>,
}

impl AdamaxState {
    pub fn new(config: AdamaxConfig) -> Self {
        Self {
            config,
            step: 0,
            first_moment: Vec::new(),
            inf_norm: Vec::new(),
        }
    }

    pub fn inf_norm(&self) -> &[Tensor] {
        &self.inf_norm
    }

    /// One update. `params` and `grads` are matched by position.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Tensor]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::InvalidArgument(format!(
                "{} parameters but {} gradients",
                params.len(),
                grads.len()
            )));
        }
        for (p, g) in params.iter().zip(grads) {
            if p.shape() != g.shape() {
                return Err(Error::ShapeMismatch {
                    op: "adamax",
                    lhs: p.shape().to_vec(),
                    rhs: g.shape().to_vec(),
                });
            }
            if !g.is_finite() {
                return Err(Error::NonFinite("adamax gradient".into()));
            }
        }
        if self.first_moment.is_empty() {
            self.first_moment = grads.iter().map(|g| Tensor::zeros(g.shape())).collect();
            self.inf_norm = self.first_moment.clone();
        } else if self.first_moment.len() != grads.len() {
            return Err(Error::InvalidArgument(
                "parameter set changed between steps".into(),
            ));
        }

        self.step += 1;
        let AdamaxConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        let step_size = lr / (1.0 - beta1.powi(self.step as i32));
        for (k, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let m = self.first_moment[k].data_mut();
            let u = self.inf_norm[k].data_mut();
            for (i, gi) in g.data().iter().enumerate() {
                m[i] = beta1 * m[i] + (1.0 - beta1) * gi;
                u[i] = (beta2 * u[i]).max(gi.abs());
                p.data_mut()[i] -= step_size * m[i] / (u[i] + eps);
            }
        }
        Ok(())
    }
}
