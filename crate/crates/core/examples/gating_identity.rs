//! With every gate's λ at zero the adapted model is the frozen base, bit for
//! bit, no matter what the rest of the adapter holds.
//!
//! ```bash
//! cargo run -p solo-connection --example gating_identity
//! ```

use solo_connection::param::ParamRole;
use solo_connection::train::{logit_perturbation, probe_batch};
use solo_connection::{
    Adapter, MiniGpt, ModelConfig, Parameterized, SoloAdapterSet, SoloConfig, TaskKind, TaskSpec,
};

fn main() -> solo_connection::Result<()> {
    let cfg = ModelConfig {
        vocab_size: 16,
        max_seq_len: 16,
        ..ModelConfig::default()
    };
    let model = MiniGpt::new(cfg.clone(), 1)?;
    let mut set = SoloAdapterSet::build(&cfg, &SoloConfig::default(), 2)?;

    // Scramble the encoding and gate vectors so only λ keeps the branch silent.
    let mut k = 0.0_f64;
    set.visit_params_mut(&mut |p| {
        if matches!(p.role, ParamRole::EncodingVector | ParamRole::GateVector) {
            for v in p.value.data_mut() {
                k += 1.0;
                *v = (k * 0.7).sin() * 3.0;
            }
        }
    });
    let probe = probe_batch(&TaskSpec::new(TaskKind::Reverse, 14, 6), 100, 3);
    let base = model.logits(&probe, Adapter::None)?;

    for lambda in [0.0, 1e-6, 1e-3, 0.1, 1.0] {
        set.set_all_lambdas(lambda);
        let adapted = model.logits(&probe, Adapter::Solo(&set))?;
        println!(
            "λ = {lambda:<7} bit-identical: {:<5}  relative perturbation {:.3e}",
            adapted.bit_eq(&base),
            logit_perturbation(&model, Adapter::Solo(&set), &probe)?
        );
    }
    Ok(())
}
