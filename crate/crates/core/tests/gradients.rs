mod common;

use rand_distr::{Distribution, StandardNormal};
use solo_connection::autograd::Tape;
use solo_connection::gradcheck::{check_params, grad_check, run_suite, DEFAULT_EPS};
use solo_connection::rng::{stream, Stream};
use solo_connection::tensor::Tensor;
use solo_connection::{Adapter, MiniGpt, SoloAdapterSet, SoloConfig, TaskKind, TaskSpec};

fn randn(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = stream(seed, Stream::Probe);
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| StandardNormal.sample(&mut rng)).collect(),
    )
    .unwrap()
}

#[test]
fn every_op_passes_on_ten_seeds() {
    for seed in 0..10 {
        let entries = run_suite(seed, false).unwrap();
        assert!(entries.len() >= 10);
        for e in entries.iter().filter(|e| !e.name.starts_with("model.")) {
            assert!(e.max_rel_error < 1e-6, "seed {seed}: {e:?}");
        }
        for e in entries.iter().filter(|e| e.name.starts_with("model.")) {
            assert!(e.max_rel_error < 1e-4, "seed {seed}: {e:?}");
        }
    }
}

#[test]
fn sum_of_matmul_against_lhs() {
    let b = randn(&[3, 2], 1);
    let e = grad_check(
        |t, x| {
            let b = t.constant(b.clone());
            let y = t.matmul(x, b)?;
            Ok(t.sum(y))
        },
        &randn(&[4, 3], 2),
        DEFAULT_EPS,
    )
    .unwrap();
    assert!(e < 1e-6, "{e}");
}

#[test]
fn layer_norm_on_a_length_eight_vector() {
    let g = randn(&[8], 3);
    let b = randn(&[8], 4);
    let w = randn(&[1, 8], 5);
    let e = grad_check(
        |t, x| {
            let (g, b, w) = (
                t.constant(g.clone()),
                t.constant(b.clone()),
                t.constant(w.clone()),
            );
            let y = t.layer_norm(x, g, b)?;
            let y = t.mul(y, w)?;
            Ok(t.sum(y))
        },
        &randn(&[1, 8], 6),
        DEFAULT_EPS,
    )
    .unwrap();
    assert!(e < 1e-6, "{e}");
}

#[test]
fn softmax_of_matmul_chain() {
    let w = randn(&[3, 5], 7);
    let p = randn(&[2, 5], 8);
    let e = grad_check(
        |t, x| {
            let (w, p) = (t.constant(w.clone()), t.constant(p.clone()));
            let y = t.matmul(x, w)?;
            let y = t.softmax(y)?;
            let y = t.mul(y, p)?;
            Ok(t.sum(y))
        },
        &randn(&[2, 3], 9),
        DEFAULT_EPS,
    )
    .unwrap();
    assert!(e < 1e-6, "{e}");
}

#[test]
fn three_block_model_every_parameter() {
    let mut model = MiniGpt::new(common::tiny_model(3), 10).unwrap();
    let batch = vec![vec![1, 5, 2, 9], vec![0, 0, 7, 3]];
    let targets: Vec<Option<usize>> = (0..8).map(|i| Some((3 * i + 1) % 10)).collect();
    let r = check_params(&mut model, DEFAULT_EPS, |m, t: &mut Tape| {
        let logits = m.forward(t, &batch, Adapter::None, None)?;
        t.cross_entropy(logits, &targets)
    })
    .unwrap();
    assert!(r.max_rel_error < 1e-4, "{r:?}");
    assert!(r.coordinates > 1000);
}

#[test]
fn adapter_gradients_on_desk_geometry() {
    let cfg = common::desk_model();
    let mut model = MiniGpt::new(cfg.clone(), 20).unwrap();
    model.freeze_base();
    let mut set = SoloAdapterSet::build(
        &cfg,
        &SoloConfig {
            dropout_rate: 0.0,
            ..Default::default()
        },
        21,
    )
    .unwrap();
    set.set_all_lambdas(0.3);
    let batch = TaskSpec::new(TaskKind::Reverse, 14, 6).eval_batch(1);
    let mut pair = (model, set);
    let r = check_params(&mut pair, DEFAULT_EPS, |(m, s), t: &mut Tape| {
        let logits = m.forward(t, &batch.inputs, Adapter::Solo(s), None)?;
        t.cross_entropy(logits, &batch.targets)
    })
    .unwrap();
    assert!(r.max_rel_error < 1e-4, "{r:?}");
    // Unmasked codec entries plus the per-connection vectors and λs.
    assert_eq!(r.coordinates, 2 * 409 + 5 * (16 + 64 + 1));
}
