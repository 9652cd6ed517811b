use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fmt::Display;

use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{Error, Result};

/// Learning-rate multiplier as a function of the optimizer step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LrSchedule {
    Constant,
    /// Linear ramp from `warmup_start_factor` to 1 over `warmup_steps`, then
    /// cosine annealing to zero at `total_steps`.
    WarmupCosine {
        warmup_steps: u64,
        total_steps: u64,
        warmup_start_factor: f64,
    },
}

impl LrSchedule {
    pub fn factor(&self, step: u64) -> f64 {
        match *self {
            LrSchedule::Constant => 1.0,
            LrSchedule::WarmupCosine {
                warmup_steps,
                total_steps,
                warmup_start_factor,
            } => {
                if step < warmup_steps {
                    let frac = step as f64 / warmup_steps as f64;
                    warmup_start_factor + (1.0 - warmup_start_factor) * frac
                } else {
                    let span = total_steps.saturating_sub(warmup_steps).max(1);
                    let progress = ((step - warmup_steps) as f64 / span as f64).min(1.0);
                    0.5 * (1.0 + (PI * progress).cos())
                }
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// AdamW-style decay applied to the weights directly instead of being
    /// folded into the gradient.
    pub decoupled: bool,
}

impl AdamConfig {
    pub fn adam(lr: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            decoupled: false,
        }
    }

    pub fn adamw(lr: f64, weight_decay: f64) -> Self {
        Self {
            decoupled: true,
            ..Self::adam(lr, weight_decay)
        }
    }
}

/// Adam / AdamW with per-parameter moment buffers keyed by `K`.
#[derive(Clone, Debug)]
pub struct Adam<K> {
    config: AdamConfig,
    schedule: LrSchedule,
    step: u64,
    moments: BTreeMap<K, (Vec<f64>, Vec<f64>)>,
}

impl<K: Ord + Clone + Display> Adam<K> {
    pub fn new(config: AdamConfig, schedule: LrSchedule) -> Self {
        Self {
            config,
            schedule,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn current_lr(&self) -> f64 {
        self.config.lr * self.schedule.factor(self.step)
    }

    /// Applies one update to every parameter using its stored gradient.
    /// Fails before touching anything if a gradient is missing.
    pub fn step<'a, I>(&mut self, params: I) -> Result<()>
    where
        I: IntoIterator<Item = (&'a K, &'a mut Tensor)>,
        K: 'a,
    {
        let params: Vec<(&K, &mut Tensor)> = params.into_iter().collect();
        if let Some((k, _)) = params.iter().find(|(_, t)| t.grad().is_none()) {
            return Err(Error::MissingGradient(k.to_string()));
        }
        let lr = self.current_lr();
        self.step += 1;
        let t = self.step as i32;
        let c = &self.config;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        for (key, tensor) in params {
            let grad = tensor.grad().expect("checked above").to_vec();
            let (m, v) = self
                .moments
                .entry(key.clone())
                .or_insert_with(|| (vec![0.0; grad.len()], vec![0.0; grad.len()]));
            let w = tensor.data_mut();
            for i in 0..w.len() {
                let mut g = grad[i];
                if c.decoupled {
                    w[i] -= lr * c.weight_decay * w[i];
                } else {
                    g += c.weight_decay * w[i];
                }
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g;
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g * g;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                w[i] -= lr * m_hat / (v_hat.sqrt() + c.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn param(v: f64, g: f64) -> Tensor {
        let mut t = Tensor::scalar(v);
        t.set_grad(vec![g]).unwrap();
        t
    }

    #[test]
    fn zero_gradient_zero_decay_is_fixed_point() {
        for decoupled in [false, true] {
            let cfg = AdamConfig {
                decoupled,
                ..AdamConfig::adam(0.1, 0.0)
            };
            let mut opt = Adam::new(cfg, LrSchedule::Constant);
            let mut w = param(1.25, 0.0);
            let key = "w".to_string();
            for _ in 0..3 {
                opt.step([(&key, &mut w)]).unwrap();
            }
            assert_eq!(w.item(), 1.25);
        }
    }

    #[test]
    fn single_adam_step_matches_recurrence() {
        let mut opt = Adam::new(AdamConfig::adam(0.1, 0.0), LrSchedule::Constant);
        let mut w = param(0.5, 1.0);
        let key = "w".to_string();
        opt.step([(&key, &mut w)]).unwrap();
        // m = 0.1, v = 0.001; bias-corrected both give 1.0 → step = 0.1/(1+1e-8)
        let m_hat = 0.1 / (1.0 - 0.9);
        let v_hat = 0.001 / (1.0 - 0.999);
        let expected = 0.5 - 0.1 * m_hat / (f64::sqrt(v_hat) + 1e-8);
        assert!((w.item() - expected).abs() < 1e-15);
    }

    #[test]
    fn adamw_decay_only_step() {
        let (lr, decay) = (0.01, 0.3);
        let mut opt = Adam::new(AdamConfig::adamw(lr, decay), LrSchedule::Constant);
        let mut w = param(2.0, 0.0);
        let key = "w".to_string();
        opt.step([(&key, &mut w)]).unwrap();
        assert!((w.item() - (2.0 - lr * decay * 2.0)).abs() < 1e-15);
    }

    #[test]
    fn missing_gradient_rejected() {
        let mut opt = Adam::new(AdamConfig::adam(0.1, 0.0), LrSchedule::Constant);
        let mut w = Tensor::scalar(1.0);
        let key = "blocks.0.qkv.weight".to_string();
        let err = opt.step([(&key, &mut w)]).unwrap_err();
        assert!(err.to_string().contains("blocks.0.qkv.weight"));
        assert_eq!(w.item(), 1.0);
    }

    #[test]
    fn warmup_cosine_shape() {
        let s = LrSchedule::WarmupCosine {
            warmup_steps: 10,
            total_steps: 110,
            warmup_start_factor: 0.033,
        };
        assert!((s.factor(0) - 0.033).abs() < 1e-15);
        assert!(s.factor(5) > s.factor(0) && s.factor(5) < 1.0);
        assert!((s.factor(10) - 1.0).abs() < 1e-15);
        assert!((s.factor(60) - 0.5).abs() < 1e-12);
        assert!(s.factor(110).abs() < 1e-15);
        assert!(s.factor(500).abs() < 1e-15);
    }
}
