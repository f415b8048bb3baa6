//! Adaptive-moment optimizer with decoupled weight decay and linear warm-up.

use super::tensor::Tensor;
use crate::error::{Error, Result};

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const EPS: f64 = 1e-8;

/// Per-parameter moment estimates plus schedule state.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub first_moment: Vec<Tensor>,
    pub second_moment: Vec<Tensor>,
    pub step_count: u64,
    pub learning_rate: f64,
    pub warmup_steps: u64,
    pub weight_decay: f64,
}

impl OptimizerState {
    /// Zero moments shaped like `params`.
    pub fn new(params: &[&Tensor], learning_rate: f64, warmup_steps: u64, weight_decay: f64) -> Result<Self> {
        if learning_rate <= 0.0 {
            return Err(Error::Parameter(format!("learning rate must be positive, got {learning_rate}")));
        }
        if weight_decay < 0.0 {
            return Err(Error::Parameter(format!("weight decay must be non-negative, got {weight_decay}")));
        }
        Ok(OptimizerState {
            first_moment: params.iter().map(|p| Tensor::zeros(p.shape.clone())).collect(),
            second_moment: params.iter().map(|p| Tensor::zeros(p.shape.clone())).collect(),
            step_count: 0,
            learning_rate,
            warmup_steps,
            weight_decay,
        })
    }

    /// Learning rate in effect for the upcoming step: scaled linearly during
    /// warm-up ((step_count / warmup_steps) * lr, capped at lr), constant after.
    pub fn effective_lr(&self) -> f64 {
        if self.warmup_steps == 0 {
            return self.learning_rate;
        }
        let frac = (self.step_count as f64 / self.warmup_steps as f64).min(1.0);
        frac * self.learning_rate
    }

    /// One update over all parameters. Bias-corrected moments; weight decay
    /// is applied directly to the parameter (decoupled from the moments).
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Tensor]) -> Result<()> {
        if params.len() != grads.len() || params.len() != self.first_moment.len() {
            return Err(Error::Contract(format!(
                "optimizer got {} params, {} grads, {} moment slots",
                params.len(),
                grads.len(),
                self.first_moment.len()
            )));
        }
        for ((p, g), (m, v)) in params
            .iter()
            .zip(grads)
            .zip(self.first_moment.iter().zip(&self.second_moment))
        {
            if p.shape != g.shape || p.shape != m.shape || p.shape != v.shape {
                return Err(Error::Contract(format!(
                    "optimizer shape mismatch: param {:?}, grad {:?}, moments {:?}/{:?}",
                    p.shape, g.shape, m.shape, v.shape
                )));
            }
        }

        let lr = self.effective_lr();
        let t = (self.step_count + 1) as i32;
        let bc1 = 1.0 - BETA1.powi(t);
        let bc2 = 1.0 - BETA2.powi(t);

        for (idx, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let m = &mut self.first_moment[idx].data;
            let v = &mut self.second_moment[idx].data;
            for i in 0..g.data.len() {
                let gi = g.data[i];
                m[i] = BETA1 * m[i] + (1.0 - BETA1) * gi;
                v[i] = BETA2 * v[i] + (1.0 - BETA2) * gi * gi;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                p.data[i] -= lr * (m_hat / (v_hat.sqrt() + EPS) + self.weight_decay * p.data[i]);
            }
        }
        self.step_count += 1;
        Ok(())
    }
}
