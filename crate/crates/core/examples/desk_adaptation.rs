//! Pretrain a base on copying, freeze it, then adapt it to reversal and to a
//! shift cipher in each tuning mode.
//!
//! ```bash
//! cargo run --release -p solo-connection --example desk_adaptation
//! ```
//!
//! Step counts can be shortened with `PRETRAIN_STEPS` and `FINETUNE_STEPS`.

use solo_connection::ledger::enumerate_trainables;
use solo_connection::train::{self, EvalConfig, RunConfig, TuningMode};
use solo_connection::{ModelConfig, OptimizerConfig, SoloConfig, TaskKind, TaskSpec};

fn env_steps(key: &str, default: usize) -> usize {
    std::env::var(key)
        .ok()
        .and_then(|v| v.parse().ok())
        .unwrap_or(default)
}

fn main() -> solo_connection::Result<()> {
    let base_cfg = RunConfig {
        model: ModelConfig {
            vocab_size: 16,
            d_model: 64,
            n_layers: 12,
            n_heads: 4,
            d_ff: 128,
            max_seq_len: 16,
            dropout_rate: 0.0,
        },
        mode: TuningMode::FullFt,
        solo: SoloConfig::default(),
        lora: Default::default(),
        optimizer: OptimizerConfig {
            learning_rate: 3e-3,
            steps: env_steps("PRETRAIN_STEPS", 1500),
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
    let pre = train::pretrain(&base_cfg, &mut |r| {
        println!(
            "pretrain {:>5}  eval {:.4}  acc {:.3}",
            r.step, r.eval_loss, r.eval_accuracy
        )
    })?;

    let steps = env_steps("FINETUNE_STEPS", 2000);
    println!(
        "\n{:<13} {:<8} {:>10} {:>8} {:>10} {:>8}",
        "task", "mode", "trainable", "eval", "accuracy", "seconds"
    );
    for kind in [TaskKind::Reverse, TaskKind::ShiftCipher] {
        for mode in [
            TuningMode::Frozen,
            TuningMode::Solo,
            TuningMode::Lora,
            TuningMode::FullFt,
        ] {
            let cfg = RunConfig {
                mode,
                task: TaskSpec::new(kind, 14, 6),
                optimizer: OptimizerConfig {
                    steps: if mode == TuningMode::Frozen { 0 } else { steps },
                    ..base_cfg.optimizer.clone()
                },
                eval: EvalConfig {
                    every: steps.max(1),
                    size: 64,
                    target_loss: None,
                },
                ..base_cfg.clone()
            };
            let t = std::time::Instant::now();
            let out = train::finetune(&cfg, &pre.checkpoint, &mut |_| {})?;
            let last = out.metrics.last().expect("at least one record");
            let n = enumerate_trainables(&out.model, out.adapter.as_adapter()).trainable_total;
            println!(
                "{:<13} {:<8} {:>10} {:>8.4} {:>10.3} {:>8.1}",
                format!("{kind:?}"),
                format!("{mode:?}"),
                n,
                last.eval_loss,
                last.eval_accuracy,
                t.elapsed().as_secs_f64()
            );
        }
    }
    Ok(())
}
