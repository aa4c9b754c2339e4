//! Trainable parameter counts for the adapter and a rank-4 LoRA on the query
//! and value projections, across model widths.
//!
//! ```bash
//! cargo run -p solo-connection --example lora_vs_solo
//! ```

use solo_connection::ledger::{enumerate_trainables, ParamBudget};
use solo_connection::{
    lora_baseline_attach, Adapter, MiniGpt, ModelConfig, SoloAdapterSet, SoloConfig,
};

fn main() -> solo_connection::Result<()> {
    println!(
        "{:>5} {:>3} {:>5} {:>10} {:>10} {:>7}",
        "d", "L", "rank", "solo", "lora", "ratio"
    );
    for (d, layers) in [(64, 12), (128, 12), (256, 24)] {
        let cfg = ModelConfig {
            vocab_size: 16,
            d_model: d,
            n_layers: layers,
            n_heads: 4,
            d_ff: 2 * d,
            max_seq_len: 16,
            dropout_rate: 0.0,
        };
        // 128 at width 768, scaled with the width.
        let rank = (128 * d).div_ceil(768);
        let mut model = MiniGpt::new(cfg.clone(), 0)?;
        let lora = lora_baseline_attach(&mut model, 4, 8.0, 0)?;
        let solo = SoloAdapterSet::build(
            &cfg,
            &SoloConfig {
                rank,
                sparsity: 0.6,
                ..Default::default()
            },
            0,
        )?;
        let s = ParamBudget::for_solo(&model, &solo)?.enumerated_total;
        let l = enumerate_trainables(&model, Adapter::Lora(&lora)).trainable_total;
        println!(
            "{d:>5} {layers:>3} {rank:>5} {s:>10} {l:>10} {:>7.3}",
            s as f64 / l as f64
        );
    }
    Ok(())
}
