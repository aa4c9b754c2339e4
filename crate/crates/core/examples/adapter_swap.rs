//! Two adapters trained on different tasks, saved to disk, and swapped in and
//! out of one frozen base. Each load must reproduce its own logits exactly.
//!
//! ```bash
//! cargo run --release -p solo-connection --example adapter_swap
//! ```

use solo_connection::checkpoint::Checkpoint;
use solo_connection::train::{self, EvalConfig, RunConfig, TuningMode};
use solo_connection::{ModelConfig, OptimizerConfig, SoloConfig, TaskKind, TaskSpec};

fn main() -> solo_connection::Result<()> {
    let pre_cfg = RunConfig {
        model: ModelConfig {
            vocab_size: 12,
            d_model: 32,
            n_layers: 6,
            n_heads: 4,
            d_ff: 64,
            max_seq_len: 16,
            dropout_rate: 0.0,
        },
        mode: TuningMode::FullFt,
        solo: SoloConfig {
            rank: 8,
            sparsity: 0.5,
            ..Default::default()
        },
        lora: Default::default(),
        optimizer: OptimizerConfig {
            learning_rate: 3e-3,
            steps: 600,
            ..Default::default()
        },
        task: TaskSpec::new(TaskKind::Copy, 10, 5),
        eval: EvalConfig {
            every: 200,
            size: 32,
            target_loss: None,
        },
        seed: 1,
    };
    let base = train::pretrain(&pre_cfg, &mut |_| {})?.checkpoint;
    let dir = std::env::temp_dir().join("solo-adapter-swap");
    std::fs::create_dir_all(&dir).map_err(|e| solo_connection::Error::Io {
        path: dir.clone(),
        source: e,
    })?;

    let probe = train::probe_batch(&pre_cfg.task, 8, 2);
    let mut adapters = Vec::new();
    let mut reference = Vec::new();
    let mut model = None;
    for (i, kind) in [TaskKind::Reverse, TaskKind::ShiftCipher]
        .into_iter()
        .enumerate()
    {
        let cfg = RunConfig {
            mode: TuningMode::Solo,
            task: TaskSpec::new(kind, 10, 5),
            optimizer: OptimizerConfig {
                steps: 300,
                ..pre_cfg.optimizer.clone()
            },
            seed: 10 + i as u64,
            ..pre_cfg.clone()
        };
        let out = train::finetune(&cfg, &base, &mut |_| {})?;
        let path = dir.join(format!("{kind:?}.ckpt"));
        out.checkpoint.save(&path)?;
        println!(
            "{kind:?}: eval loss {:.4}, saved {}",
            out.metrics.last().unwrap().eval_loss,
            path.display()
        );
        reference.push(out.model.logits(&probe, out.adapter.as_adapter())?);
        adapters.push(Checkpoint::load(&path)?);
        model.get_or_insert(out.model);
    }
    for c in train::swap_test(&model.unwrap(), &adapters, &reference, &probe, 3)? {
        println!(
            "cycle {} adapter {}: bit-exact {}",
            c.cycle, c.adapter, c.bit_exact
        );
    }
    Ok(())
}
