//! Parameter accounting: the closed-form solo budget and an enumeration of
//! what is actually trainable.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gpt::{Adapter, MiniGpt};
use crate::param::{ParamRole, Parameterized};
use crate::solo::{kept_count, GateVariant, SoloAdapterSet};

/// `n · floor((1 − s) · d · r) + r · T + d · T`.
///
/// The floor is taken per codec matrix, matching how masks are built.
pub fn budget_formula(d: usize, r: usize, s: f64, n: usize, t: usize) -> Result<usize> {
    if !(0.0..1.0).contains(&s) {
        return Err(Error::Config(format!("sparsity {s} outside [0, 1)")));
    }
    if d == 0 || r == 0 || n == 0 {
        return Err(Error::Config("d, r and n must be positive".into()));
    }
    Ok(n * kept_count(d * r, s) + r * t + d * t)
}

/// Trainable scalar counts grouped by role.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Enumeration {
    pub by_role: BTreeMap<ParamRole, usize>,
    pub trainable_total: usize,
    /// Every scalar in the base model, trainable or not.
    pub base_total: usize,
}

impl Enumeration {
    pub fn role(&self, role: ParamRole) -> usize {
        self.by_role.get(&role).copied().unwrap_or(0)
    }

    /// Trainable fraction of base plus adapter parameters.
    pub fn trainable_fraction(&self) -> f64 {
        let adapter_total: usize = self
            .by_role
            .iter()
            .filter(|(r, _)| r.is_adapter())
            .map(|(_, n)| n)
            .sum();
        self.trainable_total as f64 / (self.base_total + adapter_total) as f64
    }
}

/// Walks every trainable tensor of the model and adapter. Masked slots and
/// frozen tensors are excluded.
pub fn enumerate_trainables(model: &MiniGpt, adapter: Adapter<'_>) -> Enumeration {
    let mut e = Enumeration {
        base_total: model.total_param_count(),
        ..Default::default()
    };
    let mut add = |p: &crate::param::Param| {
        if p.trainable {
            *e.by_role.entry(p.role).or_default() += p.free_count();
            e.trainable_total += p.free_count();
        }
    };
    model.visit_params(&mut add);
    match adapter {
        Adapter::None => {}
        Adapter::Solo(s) => s.visit_params(&mut add),
        Adapter::Lora(l) => l.visit_params(&mut add),
    }
    e
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamBudget {
    pub d: usize,
    pub r: usize,
    pub s: f64,
    pub n: usize,
    /// Number of solo connections.
    pub t: usize,
    pub formula_total: usize,
    /// λ scalars, which the closed form does not include.
    pub lambda_correction: usize,
    pub enumerated_total: usize,
    pub codec: usize,
    pub encoding_vectors: usize,
    pub gate_vectors: usize,
    pub lambdas: usize,
    pub base_trainable: usize,
}

impl ParamBudget {
    pub fn for_solo(model: &MiniGpt, set: &SoloAdapterSet) -> Result<Self> {
        let cfg = &set.config;
        let d = set.d_model();
        let t = set.connections.len();
        let formula_total = budget_formula(d, cfg.rank, cfg.sparsity, 2, t)?;
        let e = enumerate_trainables(model, Adapter::Solo(set));
        Ok(Self {
            d,
            r: cfg.rank,
            s: cfg.sparsity,
            n: 2,
            t,
            formula_total,
            lambda_correction: if cfg.gate_variant == GateVariant::Homotopy {
                t
            } else {
                0
            },
            enumerated_total: e.trainable_total,
            codec: e.role(ParamRole::Codec),
            encoding_vectors: e.role(ParamRole::EncodingVector),
            gate_vectors: e.role(ParamRole::GateVector),
            lambdas: e.role(ParamRole::Lambda),
            base_trainable: e.role(ParamRole::Base),
        })
    }

    /// True when enumeration equals the closed form plus the λ line.
    pub fn reconciles(&self) -> bool {
        self.enumerated_total == self.formula_total + self.lambda_correction
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gpt::ModelConfig;
    use crate::solo::SoloConfig;

    #[test]
    fn worked_example() {
        assert_eq!(budget_formula(1024, 32, 0.7, 2, 11).unwrap(), 31_276);
    }

    #[test]
    fn no_sparsity_closed_form() {
        assert_eq!(budget_formula(4, 2, 0.0, 2, 1).unwrap(), 22);
    }

    #[test]
    fn small_model_settings() {
        // Direct evaluation: 2*floor(0.4*768*128) + 128*5 + 768*5.
        assert_eq!(
            budget_formula(768, 128, 0.6, 2, 5).unwrap(),
            2 * 39_321 + 640 + 3_840
        );
        assert_eq!(budget_formula(768, 128, 0.6, 2, 5).unwrap(), 83_122);
    }

    #[test]
    fn invalid_sparsity() {
        assert!(matches!(
            budget_formula(8, 2, 1.0, 2, 1),
            Err(Error::Config(_))
        ));
        assert!(budget_formula(8, 2, -0.1, 2, 1).is_err());
    }

    #[test]
    fn frozen_bare_model_has_nothing_trainable() {
        let cfg = ModelConfig {
            vocab_size: 10,
            d_model: 8,
            n_layers: 4,
            n_heads: 2,
            d_ff: 16,
            max_seq_len: 8,
            dropout_rate: 0.0,
        };
        let mut m = MiniGpt::new(cfg.clone(), 0).unwrap();
        m.freeze_base();
        assert_eq!(enumerate_trainables(&m, Adapter::None).trainable_total, 0);

        let set = SoloAdapterSet::build(
            &cfg,
            &SoloConfig {
                rank: 3,
                sparsity: 0.4,
                ..Default::default()
            },
            0,
        )
        .unwrap();
        let b = ParamBudget::for_solo(&m, &set).unwrap();
        assert!(b.reconciles(), "{b:?}");
        assert_eq!(b.codec, 2 * kept_count(24, 0.4));
        assert_eq!(b.lambdas, b.t);
    }
}
