//! Sparse, shared, gated low-rank connections for adapting a frozen decoder.
//!
//! The crate bundles a small f64 autodiff engine, a decoder-only transformer,
//! the adapter itself, a LoRA baseline, parameter accounting, a training
//! harness and a binary checkpoint format.

pub mod ablate;
pub mod autograd;
pub mod checkpoint;
pub mod cli;
pub mod error;
pub mod gpt;
pub mod gradcheck;
pub mod ledger;
pub mod lora;
pub mod optim;
pub mod param;
pub mod rng;
pub mod solo;
pub mod task;
pub mod tensor;
pub mod train;

pub use autograd::{Gradients, Tape, Var};
pub use checkpoint::{Checkpoint, CheckpointKind};
pub use error::{CheckpointError, Error, Result};
pub use gpt::{Adapter, MiniGpt, ModelConfig};
pub use ledger::{budget_formula, enumerate_trainables, ParamBudget};
pub use lora::{lora_baseline_attach, LoraAdapterSet, LoraConfig};
pub use optim::{AdamW, OptimizerConfig};
pub use param::{Param, ParamRole, Parameterized};
pub use solo::{plan_placement, GateVariant, Placement, SoloAdapterSet, SoloConfig};
pub use task::{TaskKind, TaskSpec};
pub use tensor::Tensor;
pub use train::{RunConfig, TuningMode};
