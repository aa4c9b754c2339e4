mod common;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use solo_connection::autograd::Tape;
use solo_connection::param::ParamRole;
use solo_connection::rng::{stream, Stream};
use solo_connection::solo::Gate;
use solo_connection::tensor::Tensor;
use solo_connection::train::logit_perturbation;
use solo_connection::{Adapter, MiniGpt, ModelConfig, Parameterized, SoloAdapterSet, SoloConfig};

fn randomize(set: &mut SoloAdapterSet, seed: u64) {
    let mut rng = stream(seed, Stream::Probe);
    set.visit_params_mut(&mut |p| {
        if matches!(p.role, ParamRole::EncodingVector | ParamRole::GateVector) {
            p.value
                .data_mut()
                .iter_mut()
                .for_each(|v| *v = StandardNormal.sample(&mut rng));
        }
    });
}

fn random_batch(seed: u64, batch: usize, len: usize, vocab: usize) -> Vec<Vec<usize>> {
    let mut rng = stream(seed, Stream::Data);
    (0..batch)
        .map(|_| (0..len).map(|_| rng.random_range(0..vocab)).collect())
        .collect()
}

#[test]
fn perturbing_a_later_token_leaves_earlier_logits_untouched() {
    let cfg = common::tiny_model(6);
    let model = MiniGpt::new(cfg.clone(), 3).unwrap();
    let mut set = SoloAdapterSet::build(&cfg, &SoloConfig::default(), 4).unwrap();
    randomize(&mut set, 5);
    set.set_all_lambdas(0.8);
    let len = 10;
    let mut rng = stream(6, Stream::Probe);
    for trial in 0..20 {
        let batch = random_batch(trial, 1, len, cfg.vocab_size);
        let t = rng.random_range(0..len - 1);
        let mut changed = batch.clone();
        changed[0][t + 1] =
            (changed[0][t + 1] + 1 + rng.random_range(0..cfg.vocab_size - 1)) % cfg.vocab_size;
        for adapter in [Adapter::None, Adapter::Solo(&set)] {
            let a = model.logits(&batch, adapter).unwrap();
            let b = model.logits(&changed, adapter).unwrap();
            let v = cfg.vocab_size;
            let prefix = (t + 1) * v;
            assert!(
                a.data()[..prefix]
                    .iter()
                    .zip(&b.data()[..prefix])
                    .all(|(x, y)| x.to_bits() == y.to_bits()),
                "trial {trial}: position ≤ {t} changed"
            );
            assert_ne!(a.data()[prefix..], b.data()[prefix..]);
        }
    }
}

#[test]
fn untrained_loss_is_near_uniform_entropy() {
    let cfg = ModelConfig::default();
    let model = MiniGpt::new(cfg.clone(), 11).unwrap();
    let batch = random_batch(12, 8, 32, cfg.vocab_size);
    let mut rng = stream(13, Stream::Data);
    let targets: Vec<Option<usize>> = (0..8 * 32)
        .map(|_| Some(rng.random_range(0..cfg.vocab_size)))
        .collect();
    let mut tape = Tape::new();
    let logits = model
        .forward(&mut tape, &batch, Adapter::None, None)
        .unwrap();
    let loss = tape.cross_entropy(logits, &targets).unwrap();
    let l = tape.value(loss).item();
    let expected = (cfg.vocab_size as f64).ln();
    assert!(
        (l - expected).abs() < 0.1 * expected,
        "{l} vs ln(V) = {expected}"
    );
}

fn naive_matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            c[i * n + j] = (0..k).map(|p| a[i * k + p] * b[p * n + j]).sum();
        }
    }
    c
}

#[test]
fn single_connection_matches_straight_line_composition() {
    let cfg = common::tiny_model(4);
    let model = MiniGpt::new(cfg.clone(), 21).unwrap();
    let scfg = SoloConfig {
        rank: 3,
        sparsity: 0.5,
        dropout_rate: 0.0,
        ..Default::default()
    };
    let mut set = SoloAdapterSet::build(&cfg, &scfg, 22).unwrap();
    randomize(&mut set, 23);
    set.set_all_lambdas(0.7);
    assert_eq!(set.connections.len(), 1);
    let conn = &set.connections[0];
    assert_eq!((conn.input_index(), conn.placement_index()), (1, 2));

    let batch = random_batch(24, 2, 6, cfg.vocab_size);
    let expected = model.logits(&batch, Adapter::Solo(&set)).unwrap();

    // Blocks come from the model; the connection is recomputed by hand.
    let mut tape = Tape::new();
    let (mut h, seq_len) = model.embed(&mut tape, &batch).unwrap();
    for b in &model.blocks[..2] {
        h = b.forward(&mut tape, h, seq_len, None, None).unwrap();
    }
    let x_in = tape.value(h).clone();
    let (d, r, rows) = (cfg.d_model, scfg.rank, x_in.rows());
    let masked = |p: &solo_connection::Param| -> Vec<f64> {
        let m = p.mask.as_ref().unwrap();
        p.value
            .data()
            .iter()
            .zip(m.data())
            .map(|(w, m)| w * m)
            .collect()
    };
    let we = masked(&set.codec.encoder);
    let wd = masked(&set.codec.decoder);
    let mut e = naive_matmul(x_in.data(), &we, rows, d, r);
    for row in e.chunks_mut(r) {
        for (v, b) in row.iter_mut().zip(conn.encoding.value.data()) {
            *v += b;
        }
    }
    let z = naive_matmul(&e, &wd, rows, r, d);
    let Gate::Homotopy(g) = &conn.gate else {
        unreachable!()
    };
    let lam = g.lambda.value.item();
    let solo: Vec<f64> = z
        .chunks(d)
        .flat_map(|row| {
            row.iter()
                .zip(g.vector.value.data())
                .map(|(z, v)| lam * (v * z))
                .collect::<Vec<_>>()
        })
        .collect();
    h = model.blocks[2]
        .forward(&mut tape, h, seq_len, None, None)
        .unwrap();
    let s = tape.constant(Tensor::new(vec![rows, d], solo).unwrap());
    h = tape.add(h, s).unwrap();
    h = model.blocks[3]
        .forward(&mut tape, h, seq_len, None, None)
        .unwrap();
    let logits = model.head(&mut tape, h).unwrap();
    let got = tape.value(logits);
    let scale = expected.data().iter().map(|v| v.abs()).fold(0.0, f64::max);
    assert!(
        got.max_abs_diff(&expected) / scale < 1e-12,
        "{}",
        got.max_abs_diff(&expected)
    );
}

#[test]
fn codec_gradient_is_the_sum_of_cloned_codec_gradients() {
    let cfg = common::tiny_model(8);
    let model = MiniGpt::new(cfg.clone(), 31).unwrap();
    let scfg = SoloConfig {
        rank: 3,
        sparsity: 0.3,
        dropout_rate: 0.0,
        ..Default::default()
    };
    let mut set = SoloAdapterSet::build(&cfg, &scfg, 32).unwrap();
    randomize(&mut set, 33);
    set.set_all_lambdas(0.4);
    let batch = random_batch(34, 3, 5, cfg.vocab_size);
    let targets: Vec<Option<usize>> = (0..15).map(|i| Some(i % cfg.vocab_size)).collect();
    let g = common::codec_gradients(&model, &set, &batch, &targets).unwrap();
    assert_eq!(g.clones, 3);
    assert!(common::max_rel_diff(&g.shared_encoder, &g.cloned_encoder_sum) < 1e-10);
    assert!(common::max_rel_diff(&g.shared_decoder, &g.cloned_decoder_sum) < 1e-10);
}

#[test]
fn zeroing_one_gate_equals_dropping_that_connection() {
    let cfg = common::tiny_model(8);
    let model = MiniGpt::new(cfg.clone(), 41).unwrap();
    let mut set = SoloAdapterSet::build(
        &cfg,
        &SoloConfig {
            rank: 4,
            sparsity: 0.2,
            ..Default::default()
        },
        42,
    )
    .unwrap();
    randomize(&mut set, 43);
    set.set_all_lambdas(0.6);
    let batch = random_batch(44, 2, 7, cfg.vocab_size);
    let full = model.logits(&batch, Adapter::Solo(&set)).unwrap();
    for k in 0..set.connections.len() {
        let placement = set.connections[k].placement_index();
        let mut zeroed = set.clone();
        let Gate::Homotopy(g) = &mut zeroed.connections[k].gate else {
            unreachable!()
        };
        g.lambda.value.data_mut()[0] = 0.0;
        let a = model.logits(&batch, Adapter::Solo(&zeroed)).unwrap();
        let b = model
            .logits(&batch, Adapter::Solo(&set.without_connection(placement)))
            .unwrap();
        let scale = b.data().iter().map(|v| v.abs()).fold(0.0, f64::max);
        assert!(a.max_abs_diff(&b) / scale < 1e-12);
        assert!(a.max_abs_diff(&full) > 0.0, "connection {k} contributes");
    }
}

#[test]
fn encoder_variance_matches_kaiming() {
    let cfg = ModelConfig {
        d_model: 1024,
        ..ModelConfig::default()
    };
    let set = SoloAdapterSet::build(
        &cfg,
        &SoloConfig {
            rank: 64,
            sparsity: 0.0,
            ..Default::default()
        },
        51,
    )
    .unwrap();
    let w = set.codec.encoder.value.data();
    let n = w.len() as f64;
    let mean = w.iter().sum::<f64>() / n;
    let var = w.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    let target = 2.0 / 1024.0;
    assert!((var - target).abs() < 0.2 * target, "{var} vs {target}");
}

#[test]
fn fresh_adapter_perturbs_logits_by_under_one_percent() {
    let cfg = common::desk_model();
    let model = MiniGpt::new(cfg.clone(), 61).unwrap();
    let set = SoloAdapterSet::build(&cfg, &SoloConfig::default(), 62).unwrap();
    let probe = random_batch(63, 16, 13, cfg.vocab_size);
    let p = logit_perturbation(&model, Adapter::Solo(&set), &probe).unwrap();
    assert!(p < 0.01, "{p}");
}

#[test]
fn forward_and_gradients_are_deterministic() {
    let cfg = common::tiny_model(4);
    let run = || {
        let model = MiniGpt::new(cfg.clone(), 71).unwrap();
        let set = SoloAdapterSet::build(&cfg, &SoloConfig::default(), 72).unwrap();
        let batch = random_batch(73, 2, 6, cfg.vocab_size);
        let targets: Vec<Option<usize>> = (0..12).map(|i| Some(i % 7)).collect();
        let mut tape = Tape::new();
        let mut rng = stream(74, Stream::Dropout);
        let logits = model
            .forward(&mut tape, &batch, Adapter::Solo(&set), Some(&mut rng))
            .unwrap();
        let loss = tape.cross_entropy(logits, &targets).unwrap();
        let g = tape.backward(loss).unwrap();
        let enc = g
            .get(tape.param_var("solo.codec.encoder").unwrap())
            .unwrap();
        let wte = g.get(tape.param_var("wte").unwrap()).unwrap();
        (tape.value(logits).clone(), enc, wte)
    };
    let (a, b) = (run(), run());
    assert!(a.0.bit_eq(&b.0) && a.1.bit_eq(&b.1) && a.2.bit_eq(&b.2));
}
