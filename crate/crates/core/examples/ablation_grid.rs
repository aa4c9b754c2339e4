//! A small rank x sparsity x span x gate grid over a quickly pretrained base,
//! printed as a table and as JSON lines. Span 7 does not fit in 8 blocks, so
//! those cells report a failure while the rest of the grid runs.
//!
//! ```bash
//! cargo run --release -p solo-connection --example ablation_grid
//! ```

use solo_connection::ablate::{self, AblationGrid};
use solo_connection::train::{EvalConfig, RunConfig, TuningMode};
use solo_connection::{GateVariant, ModelConfig, OptimizerConfig, SoloConfig, TaskKind, TaskSpec};

fn main() -> solo_connection::Result<()> {
    let run = RunConfig {
        model: ModelConfig {
            vocab_size: 12,
            d_model: 32,
            n_layers: 8,
            n_heads: 4,
            d_ff: 64,
            max_seq_len: 16,
            dropout_rate: 0.0,
        },
        mode: TuningMode::Solo,
        solo: SoloConfig::default(),
        lora: Default::default(),
        optimizer: OptimizerConfig {
            learning_rate: 3e-3,
            steps: 150,
            ..Default::default()
        },
        task: TaskSpec::new(TaskKind::ShiftCipher, 10, 5),
        eval: EvalConfig {
            every: 150,
            size: 32,
            target_loss: None,
        },
        seed: 3,
    };
    let pretrain = RunConfig {
        mode: TuningMode::FullFt,
        task: TaskSpec::new(TaskKind::Copy, 10, 5),
        optimizer: OptimizerConfig {
            steps: 500,
            ..run.optimizer.clone()
        },
        ..run.clone()
    };
    let grid = AblationGrid {
        ranks: vec![4, 16],
        sparsities: vec![0.0, 0.6],
        spans: vec![1, 3, 7],
        gate_variants: vec![GateVariant::Homotopy, GateVariant::PlainVector],
        codec_trainable: vec![true],
        learning_rates: vec![],
        probe_size: 8,
        run,
        pretrain: Some(pretrain),
        base_checkpoint: None,
        out: None,
    };
    let base = ablate::resolve_base(&grid)?;
    let rows = ablate::run_grid(&grid, &base)?;
    print!("{}", ablate::render_table(&rows));
    println!();
    print!("{}", ablate::rows_to_jsonl(&rows[..2]));
    Ok(())
}
