//! Central finite-difference gradient checking.
//!
//! Relative error is `|analytic - numeric| / max(1, |analytic| + |numeric|)`.

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::param::Parameterized;
use crate::tensor::Tensor;

pub const DEFAULT_EPS: f64 = 1e-5;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1.0)
}

/// Worst coordinate found by a check.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct CheckResult {
    pub max_rel_error: f64,
    /// `(tensor name, flat index)` of the worst coordinate.
    pub worst: Option<(String, usize)>,
    pub coordinates: usize,
}

impl CheckResult {
    fn record(&mut self, name: &str, idx: usize, analytic: f64, numeric: f64) -> Result<()> {
        if !analytic.is_finite() || !numeric.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite gradient at {name}[{idx}]: analytic {analytic}, numeric {numeric}"
            )));
        }
        self.coordinates += 1;
        let e = relative_error(analytic, numeric);
        if self.worst.is_none() || e > self.max_rel_error {
            self.max_rel_error = e;
            self.worst = Some((name.to_string(), idx));
        }
        Ok(())
    }
}

/// Checks `d f / d point` for a scalar-valued tape function `f`.
///
/// `f` receives a fresh tape and the leaf holding the (perturbed) point.
pub fn grad_check<F>(f: F, point: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    grad_check_with(f, point, eps, |_| {}).map(|r| r.max_rel_error)
}

/// Like [`grad_check`], with a hook that may tamper with the analytic gradient
/// before comparison (used for negative controls).
pub fn grad_check_with<F, H>(f: F, point: &Tensor, eps: f64, tamper: H) -> Result<CheckResult>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
    H: Fn(&mut [f64]),
{
    if eps.is_nan() || eps <= 0.0 {
        return Err(Error::Config(format!(
            "finite-difference step must be positive, got {eps}"
        )));
    }
    let mut tape = Tape::new();
    let x = tape.leaf(point.clone(), true);
    let y = f(&mut tape, x)?;
    let grads = tape.backward(y)?;
    let mut analytic = grads
        .get(x)
        .map(Tensor::into_data)
        .unwrap_or_else(|| vec![0.0; point.len()]);
    tamper(&mut analytic);

    let eval = |p: Tensor| -> Result<f64> {
        let mut t = Tape::new();
        let x = t.leaf(p, false);
        let y = f(&mut t, x)?;
        Ok(t.value(y).item())
    };
    let mut result = CheckResult::default();
    for (i, &a) in analytic.iter().enumerate() {
        let mut plus = point.clone();
        plus.data_mut()[i] += eps;
        let mut minus = point.clone();
        minus.data_mut()[i] -= eps;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * eps);
        result.record("input", i, a, numeric)?;
    }
    Ok(result)
}

/// Checks every free trainable scalar of `module` against a scalar loss.
///
/// Masked slots are skipped.
pub fn check_params<M, F>(module: &mut M, eps: f64, loss: F) -> Result<CheckResult>
where
    M: Parameterized,
    F: Fn(&M, &mut Tape) -> Result<Var>,
{
    check_params_with(module, eps, loss, |_, _| {})
}

pub fn check_params_with<M, F, H>(
    module: &mut M,
    eps: f64,
    loss: F,
    tamper: H,
) -> Result<CheckResult>
where
    M: Parameterized,
    F: Fn(&M, &mut Tape) -> Result<Var>,
    H: Fn(&str, &mut [f64]),
{
    if eps.is_nan() || eps <= 0.0 {
        return Err(Error::Config(format!(
            "finite-difference step must be positive, got {eps}"
        )));
    }
    let mut tape = Tape::new();
    let l = loss(module, &mut tape)?;
    let grads = tape.backward(l)?;

    // (name, analytic gradient, free mask)
    let mut targets: Vec<(String, Vec<f64>, Vec<bool>)> = Vec::new();
    module.visit_params(&mut |p| {
        if !p.trainable {
            return;
        }
        let mut g = tape
            .param_var(&p.name)
            .and_then(|v| grads.get(v))
            .map(Tensor::into_data)
            .unwrap_or_else(|| vec![0.0; p.numel()]);
        tamper(&p.name, &mut g);
        let free = match &p.mask {
            Some(m) => m.data().iter().map(|&v| v != 0.0).collect(),
            None => vec![true; p.numel()],
        };
        targets.push((p.name.clone(), g, free));
    });

    let mut result = CheckResult::default();
    for (name, analytic, free) in &targets {
        for (i, &a) in analytic.iter().enumerate() {
            if !free[i] {
                continue;
            }
            let numeric = {
                let f_plus = eval_perturbed(module, name, i, eps, &loss)?;
                let f_minus = eval_perturbed(module, name, i, -eps, &loss)?;
                (f_plus - f_minus) / (2.0 * eps)
            };
            result.record(name, i, a, numeric)?;
        }
    }
    Ok(result)
}

fn eval_perturbed<M, F>(module: &mut M, name: &str, idx: usize, delta: f64, loss: &F) -> Result<f64>
where
    M: Parameterized,
    F: Fn(&M, &mut Tape) -> Result<Var>,
{
    let mut original = 0.0;
    module.visit_params_mut(&mut |p| {
        if p.name == name {
            original = p.value.data()[idx];
            p.value.data_mut()[idx] = original + delta;
        }
    });
    let mut tape = Tape::new();
    let out = loss(module, &mut tape).map(|v| tape.value(v).item());
    module.visit_params_mut(&mut |p| {
        if p.name == name {
            p.value.data_mut()[idx] = original;
        }
    });
    out
}

/// `sum(w ⊙ y)` for a fixed pseudo-random `w`, turning any tensor output into a
/// scalar whose gradient exercises the full Jacobian.
pub fn random_projection(tape: &mut Tape, y: Var, salt: u64) -> Result<Var> {
    let shape = tape.value(y).shape().to_vec();
    let n = tape.value(y).len();
    let w: Vec<f64> = (0..n)
        .map(|i| {
            let h = crate::rng::derive_seed(salt, i as u64);
            (h >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
        })
        .collect();
    let w = tape.constant(Tensor::new(shape, w)?);
    let p = tape.mul(y, w)?;
    Ok(tape.sum(p))
}

/// Tolerance used by the suite.
pub const SUITE_TOLERANCE: f64 = 1e-4;

/// One line of the suite report.
#[derive(Clone, Debug, PartialEq, serde::Serialize)]
pub struct SuiteEntry {
    pub name: String,
    pub max_rel_error: f64,
    pub worst: Option<(String, usize)>,
    pub coordinates: usize,
    pub passed: bool,
}

fn randn(shape: &[usize], rng: &mut crate::rng::StreamRng) -> Tensor {
    use rand_distr::{Distribution, StandardNormal};
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| StandardNormal.sample(rng)).collect(),
    )
    .expect("shape matches")
}

fn flip(g: &mut [f64]) {
    g.iter_mut().for_each(|v| *v = -*v);
}

/// Finite-difference checks of every tape op and of full adapted models.
///
/// With `sign_flip` every analytic gradient is negated first, so every entry
/// should fail; that is the suite's negative control.
pub fn run_suite(seed: u64, sign_flip: bool) -> Result<Vec<SuiteEntry>> {
    use crate::gpt::{Adapter, MiniGpt, ModelConfig};
    use crate::lora::{LoraAdapterSet, LoraConfig};
    use crate::rng::{stream, Stream};
    use crate::solo::{SoloAdapterSet, SoloConfig};

    type Op = Box<dyn Fn(&mut Tape, Var) -> Result<Var>>;

    let mut rng = stream(seed, Stream::Probe);
    let tamper = |g: &mut [f64]| {
        if sign_flip {
            flip(g)
        }
    };
    let mut entries = Vec::new();
    let mut push = |name: &str, r: CheckResult| {
        entries.push(SuiteEntry {
            name: name.to_string(),
            passed: r.max_rel_error < SUITE_TOLERANCE,
            max_rel_error: r.max_rel_error,
            worst: r.worst,
            coordinates: r.coordinates,
        })
    };

    // Each op is checked through a random projection of its output so the full
    // Jacobian contributes. Binary ops are checked in each argument.
    let (rows, d, k, r) = (6, 4, 3, 5);
    let a = randn(&[rows, d], &mut rng);
    let b = randn(&[d, k], &mut rng);
    let same = randn(&[rows, d], &mut rng);
    let row = randn(&[d], &mut rng);
    let scalar = Tensor::scalar(0.7);
    let table = randn(&[r, d], &mut rng);
    let ids = vec![0, 3, 1, 3, 4, 2];
    let targets = vec![Some(1), None, Some(0), Some(3), Some(2), Some(1)];
    let (heads, seq_len) = (2, 3);
    let q = randn(&[rows, d], &mut rng);
    let kk = randn(&[rows, d], &mut rng);
    let v = randn(&[rows, d], &mut rng);

    let c = |t: &Tensor| t.clone();
    let ops: Vec<(&str, Tensor, Op)> = vec![
        ("matmul.lhs", c(&a), {
            let b = c(&b);
            Box::new(move |t, x| {
                let y = t.constant(b.clone());
                t.matmul(x, y)
            })
        }),
        ("matmul.rhs", c(&b), {
            let a = c(&a);
            Box::new(move |t, x| {
                let y = t.constant(a.clone());
                t.matmul(y, x)
            })
        }),
        ("transpose", c(&a), Box::new(|t, x| t.transpose(x))),
        ("add", c(&a), {
            let o = c(&same);
            Box::new(move |t, x| {
                let y = t.constant(o.clone());
                t.add(x, y)
            })
        }),
        ("add_row.bias", c(&row), {
            let a = c(&a);
            Box::new(move |t, x| {
                let y = t.constant(a.clone());
                t.add_row(y, x)
            })
        }),
        ("mul", c(&a), {
            let o = c(&same);
            Box::new(move |t, x| {
                let y = t.constant(o.clone());
                t.mul(x, y)
            })
        }),
        ("mul.square", c(&a), Box::new(|t, x| t.mul(x, x))),
        ("mul_row.input", c(&a), {
            let o = c(&row);
            Box::new(move |t, x| {
                let y = t.constant(o.clone());
                t.mul_row(x, y)
            })
        }),
        ("mul_row.vector", c(&row), {
            let a = c(&a);
            Box::new(move |t, x| {
                let y = t.constant(a.clone());
                t.mul_row(y, x)
            })
        }),
        ("scale", c(&a), Box::new(|t, x| Ok(t.scale(x, -1.7)))),
        ("scale_by.input", c(&a), {
            let s = c(&scalar);
            Box::new(move |t, x| {
                let y = t.constant(s.clone());
                t.scale_by(x, y)
            })
        }),
        ("scale_by.scalar", c(&scalar), {
            let a = c(&a);
            Box::new(move |t, x| {
                let y = t.constant(a.clone());
                t.scale_by(y, x)
            })
        }),
        ("sum", c(&a), Box::new(|t, x| Ok(t.sum(x)))),
        ("gelu", c(&a), Box::new(|t, x| Ok(t.gelu(x)))),
        ("softmax", c(&a), Box::new(|t, x| t.softmax(x))),
        ("layer_norm.input", c(&a), {
            let g = randn(&[d], &mut rng);
            let bb = randn(&[d], &mut rng);
            Box::new(move |t, x| {
                let g = t.constant(g.clone());
                let bb = t.constant(bb.clone());
                t.layer_norm(x, g, bb)
            })
        }),
        ("layer_norm.gain", c(&row), {
            let a = c(&a);
            let bb = randn(&[d], &mut rng);
            Box::new(move |t, x| {
                let y = t.constant(a.clone());
                let bb = t.constant(bb.clone());
                t.layer_norm(y, x, bb)
            })
        }),
        ("layer_norm.bias", c(&row), {
            let a = c(&a);
            let g = randn(&[d], &mut rng);
            Box::new(move |t, x| {
                let y = t.constant(a.clone());
                let g = t.constant(g.clone());
                t.layer_norm(y, g, x)
            })
        }),
        (
            "dropout",
            c(&a),
            Box::new(move |t, x| {
                let mut r = stream(seed, Stream::Dropout);
                t.dropout(x, 0.3, Some(&mut r))
            }),
        ),
        ("embedding", c(&table), {
            let ids = ids.clone();
            Box::new(move |t, x| t.embedding(x, &ids))
        }),
        ("cross_entropy", randn(&[rows, r], &mut rng), {
            let tg = targets.clone();
            Box::new(move |t, x| t.cross_entropy(x, &tg))
        }),
        ("causal_attention.q", c(&q), {
            let (kk, v) = (c(&kk), c(&v));
            Box::new(move |t, x| {
                let k = t.constant(kk.clone());
                let v = t.constant(v.clone());
                t.causal_attention(x, k, v, heads, seq_len)
            })
        }),
        ("causal_attention.k", c(&kk), {
            let (q, v) = (c(&q), c(&v));
            Box::new(move |t, x| {
                let q = t.constant(q.clone());
                let v = t.constant(v.clone());
                t.causal_attention(q, x, v, heads, seq_len)
            })
        }),
        ("causal_attention.v", c(&v), {
            let (q, kk) = (c(&q), c(&kk));
            Box::new(move |t, x| {
                let q = t.constant(q.clone());
                let k = t.constant(kk.clone());
                t.causal_attention(q, k, x, heads, seq_len)
            })
        }),
    ];
    for (i, (name, point, op)) in ops.into_iter().enumerate() {
        let salt = derive_salt(seed, i);
        let r = grad_check_with(
            |t, x| {
                let y = op(t, x)?;
                if t.value(y).is_scalar() {
                    Ok(y)
                } else {
                    random_projection(t, y, salt)
                }
            },
            &point,
            DEFAULT_EPS,
            tamper,
        )?;
        push(name, r);
    }

    // Full models: d=8, L=4, one connection at block 2, every parameter checked.
    let cfg = ModelConfig {
        vocab_size: 10,
        d_model: 8,
        n_layers: 4,
        n_heads: 2,
        d_ff: 16,
        max_seq_len: 8,
        dropout_rate: 0.0,
    };
    let batch: Vec<Vec<usize>> = vec![vec![0, 4, 7, 2, 9], vec![3, 3, 1, 8, 5]];
    let targets: Vec<Option<usize>> = (0..10)
        .map(|i| (i % 3 != 0).then_some((i * 7) % 10))
        .collect();
    let model = MiniGpt::new(cfg.clone(), seed)?;
    let solo_cfg = SoloConfig {
        rank: 3,
        sparsity: 0.4,
        dropout_rate: 0.0,
        ..Default::default()
    };
    let mut solo = SoloAdapterSet::build(&cfg, &solo_cfg, seed)?;
    // Move off the init point so every adapter path carries signal.
    solo.set_all_lambdas(0.6);
    solo.visit_params_mut(&mut |p| {
        if p.role == crate::param::ParamRole::EncodingVector
            || p.role == crate::param::ParamRole::GateVector
        {
            let n = p.value.shape().to_vec();
            p.value = randn(&n, &mut rng);
        }
    });
    let ce = |m: &MiniGpt, a: Adapter<'_>, t: &mut Tape| -> Result<Var> {
        let logits = m.forward(t, &batch, a, None)?;
        t.cross_entropy(logits, &targets)
    };
    let tamper2 = |_: &str, g: &mut [f64]| tamper(g);

    let mut pair = (model.clone(), solo);
    let r = check_params_with(
        &mut pair,
        DEFAULT_EPS,
        |(m, s), t| ce(m, Adapter::Solo(s), t),
        tamper2,
    )?;
    push("model.solo", r);

    let mut lora = LoraAdapterSet::build(
        &cfg,
        &LoraConfig {
            rank: 2,
            alpha: 4.0,
        },
        seed,
    )?;
    lora.visit_params_mut(&mut |p| {
        if p.role == crate::param::ParamRole::LoraB {
            let n = p.value.shape().to_vec();
            p.value = randn(&n, &mut rng);
        }
    });
    let mut pair = (model.clone(), lora);
    pair.0.freeze_base();
    let r = check_params_with(
        &mut pair,
        DEFAULT_EPS,
        |(m, l), t| ce(m, Adapter::Lora(l), t),
        tamper2,
    )?;
    push("model.lora", r);

    Ok(entries)
}

fn derive_salt(seed: u64, i: usize) -> u64 {
    crate::rng::derive_seed(seed ^ 0x5eed, i as u64)
}
