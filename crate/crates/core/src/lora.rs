//! Minimal LoRA baseline on the attention query and value projections.
//!
//! `q = x·W_q + b_q + (alpha / rank) · (x·A)·B`, likewise for `v`. `A` is
//! Kaiming-initialized and `B` starts at zero, so a fresh adapter is exactly
//! neutral.

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::gpt::{MiniGpt, ModelConfig};
use crate::param::{Param, ParamRole, Parameterized};
use crate::rng::{stream, Stream, StreamRng};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LoraConfig {
    pub rank: usize,
    pub alpha: f64,
}

impl Default for LoraConfig {
    fn default() -> Self {
        Self {
            rank: 4,
            alpha: 8.0,
        }
    }
}

impl LoraConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rank == 0 {
            return Err(Error::Config("lora.rank must be at least 1".into()));
        }
        if !self.alpha.is_finite() {
            return Err(Error::Config("lora.alpha must be finite".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct LoraPair {
    pub a: Param,
    pub b: Param,
    pub scale: f64,
}

impl LoraPair {
    fn new(prefix: &str, d: usize, cfg: &LoraConfig, rng: &mut StreamRng) -> Self {
        let dist = Normal::new(0.0, (2.0 / d as f64).sqrt()).expect("finite std");
        let a = Tensor::new(
            vec![d, cfg.rank],
            (0..d * cfg.rank).map(|_| dist.sample(rng)).collect(),
        )
        .expect("shape matches");
        Self {
            a: Param::new(format!("{prefix}.a"), a, ParamRole::LoraA),
            b: Param::new(
                format!("{prefix}.b"),
                Tensor::zeros(&[cfg.rank, d]),
                ParamRole::LoraB,
            ),
            scale: cfg.alpha / cfg.rank as f64,
        }
    }

    /// `base + scale · (x·A)·B`.
    pub fn apply(&self, tape: &mut Tape, x: Var, base: Var) -> Result<Var> {
        let a = tape.param(&self.a);
        let b = tape.param(&self.b);
        let h = tape.matmul(x, a)?;
        let h = tape.matmul(h, b)?;
        let h = tape.scale(h, self.scale);
        tape.add(base, h)
    }
}

#[derive(Clone, Debug)]
pub struct LoraBlock {
    pub q: LoraPair,
    pub v: LoraPair,
}

#[derive(Clone, Debug)]
pub struct LoraAdapterSet {
    pub config: LoraConfig,
    pub blocks: Vec<LoraBlock>,
    d_model: usize,
}

impl LoraAdapterSet {
    pub fn build(model_cfg: &ModelConfig, cfg: &LoraConfig, seed: u64) -> Result<Self> {
        model_cfg.validate()?;
        cfg.validate()?;
        let mut rng = stream(seed, Stream::AdapterInit);
        let d = model_cfg.d_model;
        let blocks = (0..model_cfg.n_layers)
            .map(|i| LoraBlock {
                q: LoraPair::new(&format!("lora.b{i}.q"), d, cfg, &mut rng),
                v: LoraPair::new(&format!("lora.b{i}.v"), d, cfg, &mut rng),
            })
            .collect();
        Ok(Self {
            config: cfg.clone(),
            blocks,
            d_model: d,
        })
    }

    pub fn d_model(&self) -> usize {
        self.d_model
    }

    pub fn check_geometry(&self, cfg: &ModelConfig) -> Result<()> {
        if cfg.d_model != self.d_model || cfg.n_layers != self.blocks.len() {
            return Err(Error::Config(format!(
                "LoRA adapter built for d_model={}, n_layers={} but model has d_model={}, n_layers={}",
                self.d_model,
                self.blocks.len(),
                cfg.d_model,
                cfg.n_layers
            )));
        }
        Ok(())
    }
}

/// Freezes the base model and returns a fresh LoRA adapter for it.
pub fn lora_baseline_attach(
    model: &mut MiniGpt,
    rank: usize,
    alpha: f64,
    seed: u64,
) -> Result<LoraAdapterSet> {
    let set = LoraAdapterSet::build(model.config(), &LoraConfig { rank, alpha }, seed)?;
    model.freeze_base();
    Ok(set)
}

impl Parameterized for LoraAdapterSet {
    fn visit_params(&self, f: &mut dyn FnMut(&Param)) {
        for b in &self.blocks {
            for p in [&b.q.a, &b.q.b, &b.v.a, &b.v.b] {
                f(p);
            }
        }
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        for b in &mut self.blocks {
            for p in [&mut b.q.a, &mut b.q.b, &mut b.v.a, &mut b.v.b] {
                f(p);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gpt::Adapter;

    fn cfg() -> ModelConfig {
        ModelConfig {
            vocab_size: 10,
            d_model: 8,
            n_layers: 3,
            n_heads: 2,
            d_ff: 16,
            max_seq_len: 8,
            dropout_rate: 0.0,
        }
    }

    #[test]
    fn fresh_lora_is_neutral() {
        let mut m = MiniGpt::new(cfg(), 0).unwrap();
        let base = m.logits(&[vec![1, 2, 3, 4]], Adapter::None).unwrap();
        let lora = lora_baseline_attach(&mut m, 2, 4.0, 1).unwrap();
        let adapted = m.logits(&[vec![1, 2, 3, 4]], Adapter::Lora(&lora)).unwrap();
        assert!(base.bit_eq(&adapted));
        assert_eq!(m.trainable_param_count(), 0);
    }

    #[test]
    fn per_block_count() {
        let lora = LoraAdapterSet::build(
            &cfg(),
            &LoraConfig {
                rank: 2,
                alpha: 4.0,
            },
            0,
        )
        .unwrap();
        let d = 8;
        assert_eq!(lora.trainable_param_count(), 3 * 2 * (d * 2 + 2 * d));
    }

    #[test]
    fn zero_rank_rejected() {
        assert!(LoraAdapterSet::build(
            &cfg(),
            &LoraConfig {
                rank: 0,
                alpha: 1.0
            },
            0
        )
        .is_err());
    }
}
