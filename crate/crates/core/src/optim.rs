//! AdamW with decoupled weight decay.
//!
//! After each update every parameter's mask and constraint are re-applied, so
//! masked codec slots stay at exactly zero and λ stays in `[0, 1]`.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::param::Parameterized;

fn default_lr() -> f64 {
    1e-3
}
fn default_wd() -> f64 {
    0.1
}
fn default_betas() -> (f64, f64) {
    (0.9, 0.999)
}
fn default_eps() -> f64 {
    1e-8
}
fn default_batch() -> usize {
    4
}
fn default_steps() -> usize {
    1000
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_wd")]
    pub weight_decay: f64,
    #[serde(default = "default_betas")]
    pub betas: (f64, f64),
    #[serde(default = "default_eps")]
    pub eps: f64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_steps")]
    pub steps: usize,
    /// Linear warmup length; the rate is constant afterwards.
    #[serde(default)]
    pub warmup_steps: usize,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            learning_rate: default_lr(),
            weight_decay: default_wd(),
            betas: default_betas(),
            eps: default_eps(),
            batch_size: default_batch(),
            steps: default_steps(),
            warmup_steps: 0,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "optimizer.learning_rate {} must be positive",
                self.learning_rate
            )));
        }
        if self.weight_decay.is_nan() || self.weight_decay < 0.0 {
            return Err(Error::Config(
                "optimizer.weight_decay must be non-negative".into(),
            ));
        }
        let (b1, b2) = self.betas;
        if !(0.0..1.0).contains(&b1) || !(0.0..1.0).contains(&b2) {
            return Err(Error::Config("optimizer.betas must lie in [0, 1)".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config(
                "optimizer.batch_size must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn lr_at(&self, step: usize) -> f64 {
        if self.warmup_steps > 0 && step < self.warmup_steps {
            self.learning_rate * (step + 1) as f64 / self.warmup_steps as f64
        } else {
            self.learning_rate
        }
    }
}

#[derive(Debug)]
pub struct AdamW {
    config: OptimizerConfig,
    t: u64,
    moments: HashMap<String, (Vec<f64>, Vec<f64>)>,
}

impl AdamW {
    pub fn new(config: OptimizerConfig) -> Self {
        Self {
            config,
            t: 0,
            moments: HashMap::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    /// One update of every trainable parameter in `modules` at rate `lr`.
    ///
    /// Fails without touching any parameter if a gradient is non-finite.
    pub fn step(&mut self, modules: &mut [&mut dyn Parameterized], lr: f64) -> Result<()> {
        for m in modules.iter() {
            let mut bad = None;
            m.visit_params(&mut |p| {
                if bad.is_none() && p.trainable {
                    if let Some(i) = p.grad.data().iter().position(|g| !g.is_finite()) {
                        bad = Some(format!(
                            "non-finite gradient in {}[{i}]: {}",
                            p.name,
                            p.grad.data()[i]
                        ));
                    }
                }
            });
            if let Some(msg) = bad {
                return Err(Error::Numeric(msg));
            }
        }

        self.t += 1;
        let (b1, b2) = self.config.betas;
        let bc1 = 1.0 - b1.powi(self.t as i32);
        let bc2 = 1.0 - b2.powi(self.t as i32);
        let (eps, wd) = (self.config.eps, self.config.weight_decay);
        let moments = &mut self.moments;
        for m in modules.iter_mut() {
            m.visit_params_mut(&mut |p| {
                if !p.trainable {
                    return;
                }
                let n = p.numel();
                let (mom, vel) = moments
                    .entry(p.name.clone())
                    .or_insert_with(|| (vec![0.0; n], vec![0.0; n]));
                let grad = p.grad.data().to_vec();
                for (i, w) in p.value.data_mut().iter_mut().enumerate() {
                    let g = grad[i];
                    mom[i] = b1 * mom[i] + (1.0 - b1) * g;
                    vel[i] = b2 * vel[i] + (1.0 - b2) * g * g;
                    let mhat = mom[i] / bc1;
                    let vhat = vel[i] / bc2;
                    *w -= lr * wd * *w;
                    *w -= lr * mhat / (vhat.sqrt() + eps);
                }
                p.enforce();
            });
        }
        Ok(())
    }
}
