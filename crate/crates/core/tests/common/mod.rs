#![allow(dead_code)]

use solo_connection::autograd::Tape;
use solo_connection::solo::apply_block_with_solo;
use solo_connection::train::{EvalConfig, RunConfig, TuningMode};
use solo_connection::{
    Adapter, MiniGpt, ModelConfig, OptimizerConfig, Result, SoloAdapterSet, SoloConfig, TaskKind,
    TaskSpec,
};

/// Desk geometry used for the adaptation runs.
pub fn desk_model() -> ModelConfig {
    ModelConfig {
        vocab_size: 16,
        d_model: 64,
        n_layers: 12,
        n_heads: 4,
        d_ff: 128,
        max_seq_len: 16,
        dropout_rate: 0.0,
    }
}

pub fn desk_pretrain() -> RunConfig {
    RunConfig {
        model: desk_model(),
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
    }
}

pub fn desk_finetune(mode: TuningMode, kind: TaskKind, lr: f64, steps: usize) -> RunConfig {
    RunConfig {
        mode,
        solo: SoloConfig {
            rank: 16,
            sparsity: 0.6,
            ..Default::default()
        },
        optimizer: OptimizerConfig {
            learning_rate: lr,
            steps,
            warmup_steps: 50,
            ..Default::default()
        },
        task: TaskSpec::new(kind, 14, 6),
        eval: EvalConfig {
            every: 500,
            size: 64,
            target_loss: None,
        },
        ..desk_pretrain()
    }
}

/// Small geometry for quick checks.
pub fn tiny_model(n_layers: usize) -> ModelConfig {
    ModelConfig {
        vocab_size: 10,
        d_model: 8,
        n_layers,
        n_heads: 2,
        d_ff: 16,
        max_seq_len: 12,
        dropout_rate: 0.0,
    }
}

pub struct CodecGrads {
    pub shared_encoder: Vec<f64>,
    pub shared_decoder: Vec<f64>,
    pub cloned_encoder_sum: Vec<f64>,
    pub cloned_decoder_sum: Vec<f64>,
    pub clones: usize,
}

/// Codec gradients with one shared codec, and the sum of gradients when every
/// connection gets its own independent copy of the codec.
pub fn codec_gradients(
    model: &MiniGpt,
    set: &SoloAdapterSet,
    batch: &[Vec<usize>],
    targets: &[Option<usize>],
) -> Result<CodecGrads> {
    let mut tape = Tape::new();
    let logits = model.forward(&mut tape, batch, Adapter::Solo(set), None)?;
    let loss = tape.cross_entropy(logits, targets)?;
    let g = tape.backward(loss)?;
    let get = |tape: &Tape, g: &solo_connection::Gradients, name: &str| {
        g.get(tape.param_var(name).expect("bound"))
            .expect("has grad")
            .into_data()
    };
    let shared_encoder = get(&tape, &g, &set.codec.encoder.name);
    let shared_decoder = get(&tape, &g, &set.codec.decoder.name);

    let mut tape = Tape::new();
    let (mut h, seq_len) = model.embed(&mut tape, batch)?;
    let unused = set.codec.bind(&mut tape)?;
    let mut clones = Vec::new();
    let mut i = 0;
    while i < model.blocks.len() {
        let vars = match set.connection_starting_at(i) {
            Some(c) => {
                let clone = set.codec.renamed(&format!("clone{}", c.placement_index()));
                let v = clone.bind(&mut tape)?;
                clones.push(clone);
                v
            }
            None => unused,
        };
        let (out, consumed) =
            apply_block_with_solo(&mut tape, model, set, &vars, i, h, seq_len, None)?;
        h = out;
        i += consumed;
    }
    let logits = model.head(&mut tape, h)?;
    let loss = tape.cross_entropy(logits, targets)?;
    let g = tape.backward(loss)?;
    let mut enc = vec![0.0; shared_encoder.len()];
    let mut dec = vec![0.0; shared_decoder.len()];
    for c in &clones {
        for (a, b) in enc.iter_mut().zip(get(&tape, &g, &c.encoder.name)) {
            *a += b;
        }
        for (a, b) in dec.iter_mut().zip(get(&tape, &g, &c.decoder.name)) {
            *a += b;
        }
    }
    Ok(CodecGrads {
        shared_encoder,
        shared_decoder,
        cloned_encoder_sum: enc,
        cloned_decoder_sum: dec,
        clones: clones.len(),
    })
}

/// `max |a − b| / max(|a|, |b|)` with both maxima taken over all coordinates.
pub fn max_rel_diff(a: &[f64], b: &[f64]) -> f64 {
    let diff = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max);
    let scale = a.iter().chain(b).map(|v| v.abs()).fold(0.0, f64::max);
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}
