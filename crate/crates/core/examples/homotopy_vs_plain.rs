//! The homotopy gate starts the adapter almost silent; a plain random gate
//! vector starts it loud. Same seed, same codec, different gate.
//!
//! ```bash
//! cargo run --release -p solo-connection --example homotopy_vs_plain
//! ```

use solo_connection::train::{
    self, logit_perturbation, probe_batch, EvalConfig, RunConfig, TuningMode,
};
use solo_connection::{
    Adapter, GateVariant, MiniGpt, ModelConfig, OptimizerConfig, SoloAdapterSet, SoloConfig,
    TaskKind, TaskSpec,
};

fn main() -> solo_connection::Result<()> {
    let model_cfg = ModelConfig {
        vocab_size: 16,
        d_model: 64,
        n_layers: 12,
        n_heads: 4,
        d_ff: 128,
        max_seq_len: 16,
        dropout_rate: 0.0,
    };
    let model = MiniGpt::new(model_cfg.clone(), 3)?;
    let probe = probe_batch(&TaskSpec::new(TaskKind::Reverse, 14, 6), 32, 4);
    for gate_variant in [GateVariant::Homotopy, GateVariant::PlainVector] {
        let set = SoloAdapterSet::build(
            &model_cfg,
            &SoloConfig {
                gate_variant,
                ..Default::default()
            },
            5,
        )?;
        let p = logit_perturbation(&model, Adapter::Solo(&set), &probe)?;
        println!("{gate_variant:<13} initial relative logit perturbation {p:.3e}");
    }

    let pre = RunConfig {
        model: model_cfg,
        mode: TuningMode::FullFt,
        solo: SoloConfig::default(),
        lora: Default::default(),
        optimizer: OptimizerConfig {
            learning_rate: 3e-3,
            steps: 1500,
            warmup_steps: 50,
            ..Default::default()
        },
        task: TaskSpec::new(TaskKind::Copy, 14, 6),
        eval: EvalConfig {
            every: 250,
            size: 64,
            target_loss: Some(0.05),
        },
        seed: 7,
    };
    let base = train::pretrain(&pre, &mut |_| {})?.checkpoint;
    for gate_variant in [GateVariant::Homotopy, GateVariant::PlainVector] {
        let cfg = RunConfig {
            mode: TuningMode::Solo,
            solo: SoloConfig {
                gate_variant,
                ..Default::default()
            },
            task: TaskSpec::new(TaskKind::ShiftCipher, 14, 6),
            optimizer: OptimizerConfig {
                steps: 600,
                ..pre.optimizer.clone()
            },
            eval: EvalConfig {
                every: 100,
                size: 64,
                target_loss: None,
            },
            ..pre.clone()
        };
        print!("{gate_variant:<13} eval loss:");
        train::finetune(&cfg, &base, &mut |r| print!(" {:.3}", r.eval_loss))?;
        println!();
    }
    Ok(())
}
