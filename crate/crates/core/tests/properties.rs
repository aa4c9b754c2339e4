use proptest::prelude::*;
use solo_connection::checkpoint::{self, Checkpoint, CheckpointKind};
use solo_connection::ledger::{budget_formula, ParamBudget};
use solo_connection::solo::kept_count;
use solo_connection::tensor::Tensor;
use solo_connection::{CheckpointError, Error, MiniGpt, ModelConfig, SoloAdapterSet, SoloConfig};

fn tiny(d: usize, layers: usize) -> ModelConfig {
    ModelConfig {
        vocab_size: 6,
        d_model: d,
        n_layers: layers,
        n_heads: 2,
        d_ff: 2 * d,
        max_seq_len: 8,
        dropout_rate: 0.0,
    }
}

fn sparsity() -> impl Strategy<Value = f64> {
    (0u32..95).prop_map(|p| p as f64 / 100.0)
}

proptest! {
    #[test]
    fn budget_increases_in_rank(d in 1usize..2048, r in 1usize..256, s in sparsity(), t in 0usize..24) {
        let a = budget_formula(d, r, s, 2, t).unwrap();
        let b = budget_formula(d, r + 1, s, 2, t).unwrap();
        prop_assert!(b > a);
    }

    #[test]
    fn budget_decreases_in_sparsity(d in 8usize..2048, r in 8usize..256, s in 0u32..90, t in 0usize..24) {
        // Steps of 0.05 over d·r ≥ 64 always drop at least one kept entry.
        let lo = s as f64 / 100.0;
        let hi = lo + 0.05;
        prop_assert!(budget_formula(d, r, hi, 2, t).unwrap() < budget_formula(d, r, lo, 2, t).unwrap());
    }

    #[test]
    fn kept_count_is_the_floor(n in 1usize..100_000, pct in 0u32..100) {
        // Integer oracle for s = pct / 100.
        prop_assert_eq!(kept_count(n, pct as f64 / 100.0), n * (100 - pct as usize) / 100);
    }

    #[test]
    fn enumeration_reconciles_with_the_closed_form(
        half_d in 1usize..12, r in 1usize..10, s in sparsity(), layers in 3usize..9, plain in any::<bool>()
    ) {
        let cfg = tiny(2 * half_d, layers);
        let mut model = MiniGpt::new(cfg.clone(), 0).unwrap();
        model.freeze_base();
        let gate_variant = if plain { solo_connection::GateVariant::PlainVector } else { Default::default() };
        let set = SoloAdapterSet::build(&cfg, &SoloConfig { rank: r, sparsity: s, gate_variant, ..Default::default() }, 1).unwrap();
        let b = ParamBudget::for_solo(&model, &set).unwrap();
        prop_assert!(b.reconciles());
        prop_assert_eq!(b.codec, 2 * kept_count(cfg.d_model * r, s));
        let population = |p: &solo_connection::Param| p.mask.as_ref().unwrap().data().iter().filter(|&&m| m == 1.0).count();
        prop_assert_eq!(population(&set.codec.encoder), kept_count(cfg.d_model * r, s));
        prop_assert_eq!(population(&set.codec.decoder), kept_count(cfg.d_model * r, s));
    }

    #[test]
    fn checkpoint_roundtrip_is_bit_exact(
        shapes in prop::collection::vec(prop::collection::vec(1usize..5, 0..3), 0..5),
        seed in any::<u64>(),
    ) {
        let mut x = seed;
        let records: Vec<(String, Tensor)> = shapes
            .iter()
            .enumerate()
            .map(|(i, shape)| {
                let n: usize = shape.iter().product();
                let data = (0..n)
                    .map(|_| {
                        x = solo_connection::rng::derive_seed(x, 1);
                        f64::from_bits(x >> 2)
                    })
                    .collect();
                (format!("t{i}"), Tensor::new(shape.clone(), data).unwrap())
            })
            .collect();
        let ck = Checkpoint { kind: CheckpointKind::Solo, config: serde_json::json!({"seed": seed}), records };
        let back = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
        prop_assert_eq!(back.kind, ck.kind);
        prop_assert_eq!(&back.config, &ck.config);
        prop_assert_eq!(back.records.len(), ck.records.len());
        for ((n1, a), (n2, b)) in back.records.iter().zip(&ck.records) {
            prop_assert_eq!(n1, n2);
            prop_assert!(a.bit_eq(b));
        }
    }

    #[test]
    fn any_corruption_is_rejected(pos in any::<prop::sample::Index>(), bit in 0u8..8) {
        let cfg = tiny(4, 4);
        let set = SoloAdapterSet::build(&cfg, &SoloConfig { rank: 2, sparsity: 0.5, ..Default::default() }, 3).unwrap();
        let mut bytes = checkpoint::save_solo(&set).to_bytes();
        let i = pos.index(bytes.len());
        bytes[i] ^= 1 << bit;
        prop_assert!(Checkpoint::from_bytes(&bytes).is_err());
    }

    #[test]
    fn truncation_is_rejected(cut in any::<prop::sample::Index>()) {
        let set = SoloAdapterSet::build(&tiny(4, 4), &SoloConfig { rank: 2, sparsity: 0.5, ..Default::default() }, 3).unwrap();
        let bytes = checkpoint::save_solo(&set).to_bytes();
        let n = cut.index(bytes.len());
        prop_assert!(Checkpoint::from_bytes(&bytes[..n]).is_err());
    }
}

#[test]
fn adapter_roundtrip_reproduces_logits() {
    let cfg = tiny(8, 6);
    let model = MiniGpt::new(cfg.clone(), 5).unwrap();
    let mut set = SoloAdapterSet::build(
        &cfg,
        &SoloConfig {
            rank: 3,
            sparsity: 0.4,
            ..Default::default()
        },
        6,
    )
    .unwrap();
    set.set_all_lambdas(0.37);
    let probe = vec![vec![0, 1, 2, 3, 4], vec![5, 4, 3, 2, 1]];
    let before = model
        .logits(&probe, solo_connection::Adapter::Solo(&set))
        .unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("a.ckpt");
    checkpoint::save_solo(&set).save(&path).unwrap();
    let loaded = checkpoint::load_solo(&Checkpoint::load(&path).unwrap(), &cfg).unwrap();
    let after = model
        .logits(&probe, solo_connection::Adapter::Solo(&loaded))
        .unwrap();
    assert!(before.bit_eq(&after));
    assert_eq!(loaded.codec.encoder.mask, set.codec.encoder.mask);

    let base = checkpoint::save_base(&model);
    let model2 = checkpoint::load_base(&Checkpoint::from_bytes(&base.to_bytes()).unwrap()).unwrap();
    assert!(model2
        .logits(&probe, solo_connection::Adapter::None)
        .unwrap()
        .bit_eq(
            &model
                .logits(&probe, solo_connection::Adapter::None)
                .unwrap()
        ));
}

#[test]
fn loading_onto_a_different_width_is_a_geometry_error() {
    let set = SoloAdapterSet::build(
        &tiny(8, 6),
        &SoloConfig {
            rank: 3,
            sparsity: 0.4,
            ..Default::default()
        },
        6,
    )
    .unwrap();
    let ck = checkpoint::save_solo(&set);
    let err = checkpoint::load_solo(&ck, &tiny(12, 6)).unwrap_err();
    assert!(
        matches!(err, Error::Checkpoint(CheckpointError::Geometry(_))),
        "{err}"
    );
}
