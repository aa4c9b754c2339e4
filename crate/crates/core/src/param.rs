//! Named trainable tensors and the visitor trait used by optimizers,
//! checkpoints and parameter accounting.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// What a parameter is for. Drives parameter accounting and checkpoint filtering.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ParamRole {
    Base,
    Codec,
    EncodingVector,
    GateVector,
    Lambda,
    LoraA,
    LoraB,
}

impl ParamRole {
    pub fn is_adapter(self) -> bool {
        !matches!(self, ParamRole::Base)
    }
}

/// Projection applied after every optimizer update.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum Constraint {
    #[default]
    None,
    /// Clamp every element into `[0, 1]`.
    UnitInterval,
}

#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
    pub trainable: bool,
    pub role: ParamRole,
    /// Binary keep-mask with the value's shape. Masked slots stay exactly zero.
    pub mask: Option<Tensor>,
    pub constraint: Constraint,
}

impl Param {
    pub fn new(name: impl Into<String>, value: Tensor, role: ParamRole) -> Self {
        let grad = Tensor::zeros(value.shape());
        Self {
            name: name.into(),
            value,
            grad,
            trainable: true,
            role,
            mask: None,
            constraint: Constraint::None,
        }
    }

    pub fn with_mask(mut self, mask: Tensor) -> Self {
        debug_assert_eq!(mask.shape(), self.value.shape());
        for (v, m) in self.value.data_mut().iter_mut().zip(mask.data()) {
            if *m == 0.0 {
                *v = 0.0;
            }
        }
        self.mask = Some(mask);
        self
    }

    pub fn with_constraint(mut self, constraint: Constraint) -> Self {
        self.constraint = constraint;
        self
    }

    pub fn numel(&self) -> usize {
        self.value.len()
    }

    /// Free (unmasked) scalar count.
    pub fn free_count(&self) -> usize {
        match &self.mask {
            Some(m) => m.data().iter().filter(|&&v| v != 0.0).count(),
            None => self.value.len(),
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad.data_mut().iter_mut().for_each(|g| *g = 0.0);
    }

    pub fn accumulate_grad(&mut self, g: &Tensor) -> Result<()> {
        if g.len() != self.grad.len() {
            return Err(Error::dim(
                "accumulate_grad",
                format!(
                    "{}: gradient {:?} vs value {:?}",
                    self.name,
                    g.shape(),
                    self.value.shape()
                ),
            ));
        }
        for (a, b) in self.grad.data_mut().iter_mut().zip(g.data()) {
            *a += b;
        }
        Ok(())
    }

    /// Re-applies the mask and the constraint to the current value.
    pub fn enforce(&mut self) {
        if let Some(mask) = &self.mask {
            for (v, m) in self.value.data_mut().iter_mut().zip(mask.data()) {
                if *m == 0.0 {
                    *v = 0.0;
                }
            }
        }
        if self.constraint == Constraint::UnitInterval {
            for v in self.value.data_mut() {
                *v = v.clamp(0.0, 1.0);
            }
        }
    }
}

/// Anything that owns [`Param`]s.
///
/// Visit order must be deterministic; checkpoints and optimizers rely on it.
pub trait Parameterized {
    fn visit_params(&self, f: &mut dyn FnMut(&Param));
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param));

    fn total_param_count(&self) -> usize {
        let mut n = 0;
        self.visit_params(&mut |p| n += p.numel());
        n
    }

    /// Trainable scalars, excluding masked slots.
    fn trainable_param_count(&self) -> usize {
        let mut n = 0;
        self.visit_params(&mut |p| {
            if p.trainable {
                n += p.free_count();
            }
        });
        n
    }

    fn zero_grads(&mut self) {
        self.visit_params_mut(&mut |p| p.zero_grad());
    }

    fn param_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        self.visit_params(&mut |p| names.push(p.name.clone()));
        names
    }

    /// Snapshot of every parameter value, in visit order.
    fn snapshot(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        self.visit_params(&mut |p| out.push((p.name.clone(), p.value.clone())));
        out
    }
}
