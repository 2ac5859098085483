use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autodiff::ParameterSet;
use crate::error::{Error, Result};

/// `eta_min + (lr_max - eta_min) (1 + cos(pi step / total)) / 2`; steps
/// past the horizon stay at `eta_min`.
pub fn cosine_lr(step: u64, total_steps: u64, lr_max: f64, eta_min: f64) -> f64 {
    if total_steps == 0 || step >= total_steps {
        return eta_min;
    }
    let progress = step as f64 / total_steps as f64;
    eta_min + 0.5 * (lr_max - eta_min) * (1.0 + (std::f64::consts::PI * progress).cos())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// L2 penalty added to the gradient; 0 disables it.
    pub weight_decay: f64,
    /// Rescale gradients whose global norm exceeds this; 0 disables it.
    pub grad_clip: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            grad_clip: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Moments {
    pub m: Vec<f32>,
    pub v: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    pub step: u64,
    pub moments: BTreeMap<String, Moments>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Adam {
            config,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    /// One bias-corrected update of every parameter. Missing or non-finite
    /// gradients are rejected before anything is modified.
    pub fn update(&mut self, params: &mut ParameterSet, lr: f64) -> Result<()> {
        let mut sq_norm = 0f64;
        for (name, t) in params.iter() {
            let g = t
                .grad()
                .ok_or_else(|| Error::Validation(format!("parameter {name} has no gradient")))?;
            if let Some(i) = g.iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("gradient {name}[{i}] = {}", g[i])));
            }
            sq_norm += g.iter().map(|&v| f64::from(v) * f64::from(v)).sum::<f64>();
        }
        if !(lr >= 0.0 && lr.is_finite()) {
            return Err(Error::Numerical(format!("learning rate {lr}")));
        }
        let c = self.config;
        let clip = if c.grad_clip > 0.0 && sq_norm.sqrt() > c.grad_clip {
            (c.grad_clip / sq_norm.sqrt()) as f32
        } else {
            1.0
        };
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let (b1, b2) = (c.beta1 as f32, c.beta2 as f32);
        let (step_size, inv_bc2_sqrt, eps) = ((lr / bc1) as f32, (1.0 / bc2.sqrt()) as f32, c.eps as f32);
        let wd = c.weight_decay as f32;
        for (name, t) in params.iter_mut() {
            let grad = t.grad().expect("checked above").to_vec();
            let st = self.moments.entry(name.to_string()).or_insert_with(|| Moments {
                m: vec![0.0; grad.len()],
                v: vec![0.0; grad.len()],
            });
            let theta = t.data_mut();
            for i in 0..theta.len() {
                let g = grad[i] * clip + wd * theta[i];
                st.m[i] = b1 * st.m[i] + (1.0 - b1) * g;
                st.v[i] = b2 * st.v[i] + (1.0 - b2) * g * g;
                theta[i] -= step_size * st.m[i] / (st.v[i].sqrt() * inv_bc2_sqrt + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tensor;

    #[test]
    fn schedule_endpoints() {
        assert_eq!(cosine_lr(0, 100, 1e-3, 0.0), 1e-3);
        assert!((cosine_lr(50, 100, 1e-3, 0.0) - 5e-4).abs() < 1e-15);
        assert_eq!(cosine_lr(100, 100, 1e-3, 0.0), 0.0);
        assert_eq!(cosine_lr(150, 100, 1e-3, 1e-5), 1e-5);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = ParameterSet::new();
        p.insert("w", Tensor::scalar(2.0f32)).unwrap();
        p.get_mut("w").unwrap().accumulate_grad(&[1.0]).unwrap();
        let mut adam = Adam::new(AdamConfig::default());
        adam.update(&mut p, 1e-3).unwrap();
        assert!((p.get("w").unwrap().data()[0] - (2.0 - 1e-3)).abs() < 1e-7);
    }
}
