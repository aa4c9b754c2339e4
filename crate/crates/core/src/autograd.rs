//! Reverse-mode automatic differentiation on a linear tape.
//!
//! Every op appends a node holding its forward value and enough saved state to
//! replay the chain rule. Nodes are only ever appended, so index order is a
//! topological order and [`Tape::backward`] is a single reverse sweep.

use std::collections::HashMap;

use rand::Rng;

use crate::error::{Error, Result};
use crate::param::{Param, Parameterized};
use crate::rng::StreamRng;
use crate::tensor::{gemm, Tensor};

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    ScaleBy(Var, Var),
    Sum(Var),
    Gelu(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Dropout {
        x: Var,
        mask: Vec<f64>,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<Option<usize>>,
        probs: Vec<f64>,
        count: usize,
    },
    CausalAttention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        seq_len: usize,
        probs: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// The computation record for one forward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<String, Var>,
}

/// Gradients produced by one backward sweep, indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    shapes: Vec<Vec<usize>>,
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<Tensor> {
        let g = self.grads.get(v.0)?.as_ref()?;
        Some(Tensor::new(self.shapes[v.0].clone(), g.clone()).expect("gradient matches shape"))
    }

    pub fn get_mut(&mut self, v: Var) -> Option<&mut [f64]> {
        self.grads.get_mut(v.0)?.as_deref_mut()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Leaf for a named parameter. Repeated calls with the same name return the
    /// same node, which is how weight sharing is expressed.
    pub fn param(&mut self, p: &Param) -> Var {
        if let Some(&v) = self.params.get(&p.name) {
            return v;
        }
        let v = self.leaf(p.value.clone(), p.trainable);
        self.params.insert(p.name.clone(), v);
        v
    }

    pub fn param_var(&self, name: &str) -> Option<Var> {
        self.params.get(name).copied()
    }

    /// Adds each bound parameter's gradient into its `grad` buffer.
    pub fn accumulate_grads(
        &self,
        grads: &Gradients,
        module: &mut dyn Parameterized,
    ) -> Result<()> {
        let mut result = Ok(());
        module.visit_params_mut(&mut |p| {
            if result.is_err() || !p.trainable {
                return;
            }
            if let Some(g) = self.param_var(&p.name).and_then(|v| grads.get(v)) {
                result = p.accumulate_grad(&g);
            }
        });
        result
    }

    // ---- ops -------------------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).transpose()?;
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::Transpose(a), rg))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::dim(op, format!("shapes differ: {sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    fn row_compatible(&self, op: &'static str, x: Var, row: Var) -> Result<()> {
        let (sx, sr) = (self.value(x).shape(), self.value(row).shape());
        if sr.len() != 1 || sr[0] != *sx.last().unwrap() {
            return Err(Error::dim(
                op,
                format!("row vector {sr:?} does not match last axis of {sx:?}"),
            ));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let (va, vb) = (self.value(a), self.value(b));
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(x, y)| x + y)
            .collect();
        let out = Tensor::new(va.shape().to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    /// `x + bias` with `bias` broadcast over rows.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        self.row_compatible("add_row", x, bias)?;
        let (vx, vb) = (self.value(x), self.value(bias));
        let n = vb.len();
        let data = vx
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v + vb.data()[i % n])
            .collect();
        let out = Tensor::new(vx.shape().to_vec(), data)?;
        let rg = self.rg(&[x, bias]);
        Ok(self.push(out, Op::AddRow(x, bias), rg))
    }

    /// Hadamard product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let (va, vb) = (self.value(a), self.value(b));
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(x, y)| x * y)
            .collect();
        let out = Tensor::new(va.shape().to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    /// `x ⊙ v` with `v` broadcast over rows.
    pub fn mul_row(&mut self, x: Var, v: Var) -> Result<Var> {
        self.row_compatible("mul_row", x, v)?;
        let (vx, vv) = (self.value(x), self.value(v));
        let n = vv.len();
        let data = vx
            .data()
            .iter()
            .enumerate()
            .map(|(i, a)| a * vv.data()[i % n])
            .collect();
        let out = Tensor::new(vx.shape().to_vec(), data)?;
        let rg = self.rg(&[x, v]);
        Ok(self.push(out, Op::MulRow(x, v), rg))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let va = self.value(a);
        let out = Tensor::new(
            va.shape().to_vec(),
            va.data().iter().map(|x| x * c).collect(),
        )
        .expect("same shape");
        let rg = self.rg(&[a]);
        self.push(out, Op::Scale(a, c), rg)
    }

    /// `a * s` where `s` is a one-element tensor.
    pub fn scale_by(&mut self, a: Var, s: Var) -> Result<Var> {
        if !self.value(s).is_scalar() {
            return Err(Error::dim(
                "scale_by",
                format!("scale must be scalar, got {:?}", self.value(s).shape()),
            ));
        }
        let c = self.value(s).item();
        let va = self.value(a);
        let out = Tensor::new(
            va.shape().to_vec(),
            va.data().iter().map(|x| x * c).collect(),
        )?;
        let rg = self.rg(&[a, s]);
        Ok(self.push(out, Op::ScaleBy(a, s), rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        let rg = self.rg(&[a]);
        self.push(out, Op::Sum(a), rg)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let data = va
            .data()
            .iter()
            .map(|&x| 0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh()))
            .collect();
        let out = Tensor::new(va.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(&[a]);
        self.push(out, Op::Gelu(a), rg)
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let va = self.value(a);
        let n = va.last_dim();
        let mut data = va.data().to_vec();
        for row in data.chunks_mut(n) {
            softmax_in_place(row);
        }
        let out = Tensor::new(va.shape().to_vec(), data)?;
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::Softmax(a), rg))
    }

    /// Layer normalization over the last axis with affine `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        self.row_compatible("layer_norm", x, gain)?;
        self.row_compatible("layer_norm", x, bias)?;
        let vx = self.value(x);
        let n = vx.last_dim();
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let mut xhat = Vec::with_capacity(vx.len());
        let mut rstd = Vec::with_capacity(vx.rows());
        let mut out = Vec::with_capacity(vx.len());
        for row in vx.data().chunks(n) {
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let r = 1.0 / (var + LN_EPS).sqrt();
            rstd.push(r);
            for (j, v) in row.iter().enumerate() {
                let h = (v - mean) * r;
                xhat.push(h);
                out.push(g[j] * h + b[j]);
            }
        }
        let out = Tensor::new(vx.shape().to_vec(), out)?;
        let rg = self.rg(&[x, gain, bias]);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    /// Inverted dropout. `rng = None` means evaluation mode, which is the identity
    /// and returns `x` itself. A zero rate is also the identity.
    pub fn dropout(&mut self, x: Var, rate: f64, rng: Option<&mut StreamRng>) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Config(format!("dropout rate {rate} outside [0, 1)")));
        }
        let Some(rng) = rng else { return Ok(x) };
        if rate == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - rate);
        let vx = self.value(x);
        let mask: Vec<f64> = (0..vx.len())
            .map(|_| {
                if rng.random::<f64>() < rate {
                    0.0
                } else {
                    keep
                }
            })
            .collect();
        let data = vx.data().iter().zip(&mask).map(|(a, m)| a * m).collect();
        let out = Tensor::new(vx.shape().to_vec(), data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::Dropout { x, mask }, rg))
    }

    /// Gathers rows of a `[vocab, d]` table.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (rows, d) = self.value(table).matrix_dims("embedding")?;
        if ids.is_empty() {
            return Err(Error::Input("embedding lookup with no ids".into()));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(Error::Input(format!(
                "token id {bad} out of range for vocabulary of {rows}"
            )));
        }
        let t = self.value(table).data();
        let mut data = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            data.extend_from_slice(&t[i * d..(i + 1) * d]);
        }
        let out = Tensor::new(vec![ids.len(), d], data)?;
        let rg = self.rg(&[table]);
        Ok(self.push(
            out,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    /// Mean token cross-entropy over rows whose target is `Some`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<usize>]) -> Result<Var> {
        let vl = self.value(logits);
        let n = vl.last_dim();
        if targets.len() != vl.rows() {
            return Err(Error::dim(
                "cross_entropy",
                format!("{} targets for {} rows", targets.len(), vl.rows()),
            ));
        }
        let count = targets.iter().flatten().count();
        if count == 0 {
            return Err(Error::dim("cross_entropy", "no positions carry a target"));
        }
        if let Some(&bad) = targets.iter().flatten().find(|&&t| t >= n) {
            return Err(Error::Input(format!(
                "target {bad} out of range for {n} classes"
            )));
        }
        let mut probs = vl.data().to_vec();
        let mut loss = 0.0;
        for (row, t) in probs.chunks_mut(n).zip(targets) {
            softmax_in_place(row);
            if let Some(t) = t {
                loss -= row[*t].ln();
            }
        }
        let out = Tensor::scalar(loss / count as f64);
        let rg = self.rg(&[logits]);
        Ok(self.push(
            out,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
                count,
            },
            rg,
        ))
    }

    /// Multi-head causal self-attention over a stack of equal-length sequences.
    ///
    /// `q`, `k`, `v` are `[batch * seq_len, d]`; rows `b*seq_len..(b+1)*seq_len`
    /// form sequence `b`. Position `t` attends to positions `0..=t` of its own
    /// sequence only.
    pub fn causal_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        seq_len: usize,
    ) -> Result<Var> {
        self.same_shape("causal_attention", q, k)?;
        self.same_shape("causal_attention", q, v)?;
        let (rows, d) = self.value(q).matrix_dims("causal_attention")?;
        if heads == 0 || d % heads != 0 {
            return Err(Error::dim(
                "causal_attention",
                format!("{heads} heads do not divide width {d}"),
            ));
        }
        if seq_len == 0 || rows % seq_len != 0 {
            return Err(Error::dim(
                "causal_attention",
                format!("{rows} rows are not a multiple of seq_len {seq_len}"),
            ));
        }
        let batch = rows / seq_len;
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qd, kd, vd) = (
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
        );
        let mut probs = vec![0.0; batch * heads * seq_len * seq_len];
        let mut out = vec![0.0; rows * d];
        for b in 0..batch {
            for h in 0..heads {
                let off = h * dh;
                for t in 0..seq_len {
                    let rt = b * seq_len + t;
                    let qt = &qd[rt * d + off..rt * d + off + dh];
                    let p = &mut probs[((b * heads + h) * seq_len + t) * seq_len..][..=t];
                    for (s, ps) in p.iter_mut().enumerate() {
                        let rs = b * seq_len + s;
                        let ks = &kd[rs * d + off..rs * d + off + dh];
                        *ps = dot(qt, ks) * scale;
                    }
                    softmax_in_place(p);
                    let o = &mut out[rt * d + off..rt * d + off + dh];
                    for (s, ps) in p.iter().enumerate() {
                        let rs = b * seq_len + s;
                        let vs = &vd[rs * d + off..rs * d + off + dh];
                        for (oj, vj) in o.iter_mut().zip(vs) {
                            *oj += ps * vj;
                        }
                    }
                }
            }
        }
        let out = Tensor::new(vec![rows, d], out)?;
        let rg = self.rg(&[q, k, v]);
        Ok(self.push(
            out,
            Op::CausalAttention {
                q,
                k,
                v,
                heads,
                seq_len,
                probs,
            },
            rg,
        ))
    }

    // ---- backward ----------------------------------------------------------

    /// Reverse sweep from a scalar `loss`. Nodes that do not require gradients,
    /// or are unreachable from `loss`, get no entry.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients {
            shapes: self
                .nodes
                .iter()
                .map(|n| n.value.shape().to_vec())
                .collect(),
            grads,
        })
    }

    fn slot<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> Option<&'g mut Vec<f64>> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let n = self.nodes[v.0].value.len();
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; n]))
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.value(*a).matrix_dims("matmul").unwrap();
                let n = self.value(*b).shape()[1];
                let (ad, bd) = (self.value(*a).data(), self.value(*b).data());
                if let Some(ga) = self.slot(grads, *a) {
                    gemm(m, n, k, g, false, bd, true, ga, 1.0);
                }
                if let Some(gb) = self.slot(grads, *b) {
                    gemm(k, m, n, ad, true, g, false, gb, 1.0);
                }
            }
            Op::Transpose(a) => {
                let (m, n) = self.value(*a).matrix_dims("transpose").unwrap();
                if let Some(ga) = self.slot(grads, *a) {
                    for r in 0..m {
                        for c in 0..n {
                            ga[r * n + c] += g[c * m + r];
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(gv) = self.slot(grads, v) {
                        add_into(gv, g);
                    }
                }
            }
            Op::AddRow(x, bias) => {
                if let Some(gx) = self.slot(grads, *x) {
                    add_into(gx, g);
                }
                let n = self.value(*bias).len();
                if let Some(gb) = self.slot(grads, *bias) {
                    for row in g.chunks(n) {
                        add_into(gb, row);
                    }
                }
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (self.value(*a).data(), self.value(*b).data());
                if let Some(ga) = self.slot(grads, *a) {
                    for ((o, gi), bi) in ga.iter_mut().zip(g).zip(bd) {
                        *o += gi * bi;
                    }
                }
                if let Some(gb) = self.slot(grads, *b) {
                    for ((o, gi), ai) in gb.iter_mut().zip(g).zip(ad) {
                        *o += gi * ai;
                    }
                }
            }
            Op::MulRow(x, v) => {
                let (xd, vd) = (self.value(*x).data(), self.value(*v).data());
                let n = vd.len();
                if let Some(gx) = self.slot(grads, *x) {
                    for (j, (o, gi)) in gx.iter_mut().zip(g).enumerate() {
                        *o += gi * vd[j % n];
                    }
                }
                if let Some(gv) = self.slot(grads, *v) {
                    for (j, (gi, xi)) in g.iter().zip(xd).enumerate() {
                        gv[j % n] += gi * xi;
                    }
                }
            }
            Op::Scale(a, c) => {
                if let Some(ga) = self.slot(grads, *a) {
                    for (o, gi) in ga.iter_mut().zip(g) {
                        *o += c * gi;
                    }
                }
            }
            Op::ScaleBy(a, s) => {
                let c = self.value(*s).item();
                let ad = self.value(*a).data();
                if let Some(ga) = self.slot(grads, *a) {
                    for (o, gi) in ga.iter_mut().zip(g) {
                        *o += c * gi;
                    }
                }
                if let Some(gs) = self.slot(grads, *s) {
                    gs[0] += dot(g, ad);
                }
            }
            Op::Sum(a) => {
                if let Some(ga) = self.slot(grads, *a) {
                    ga.iter_mut().for_each(|o| *o += g[0]);
                }
            }
            Op::Gelu(a) => {
                let ad = self.value(*a).data();
                if let Some(ga) = self.slot(grads, *a) {
                    for ((o, gi), &x) in ga.iter_mut().zip(g).zip(ad) {
                        let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
                        let dt = (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x);
                        *o += gi * (0.5 * (1.0 + t) + 0.5 * x * dt);
                    }
                }
            }
            Op::Softmax(a) => {
                let y = node.value.data();
                let n = node.value.last_dim();
                if let Some(ga) = self.slot(grads, *a) {
                    for ((oy, yr), gr) in ga.chunks_mut(n).zip(y.chunks(n)).zip(g.chunks(n)) {
                        let s = dot(yr, gr);
                        for ((o, yi), gi) in oy.iter_mut().zip(yr).zip(gr) {
                            *o += yi * (gi - s);
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let n = self.value(*gain).len();
                let gd = self.value(*gain).data();
                if let Some(gg) = self.slot(grads, *gain) {
                    for (gr, hr) in g.chunks(n).zip(xhat.chunks(n)) {
                        for ((o, gi), hi) in gg.iter_mut().zip(gr).zip(hr) {
                            *o += gi * hi;
                        }
                    }
                }
                if let Some(gb) = self.slot(grads, *bias) {
                    for gr in g.chunks(n) {
                        add_into(gb, gr);
                    }
                }
                if let Some(gx) = self.slot(grads, *x) {
                    let mut dh = vec![0.0; n];
                    for (((ox, gr), hr), r) in gx
                        .chunks_mut(n)
                        .zip(g.chunks(n))
                        .zip(xhat.chunks(n))
                        .zip(rstd)
                    {
                        for j in 0..n {
                            dh[j] = gr[j] * gd[j];
                        }
                        let mean_dh = dh.iter().sum::<f64>() / n as f64;
                        let mean_dh_h = dot(&dh, hr) / n as f64;
                        for j in 0..n {
                            ox[j] += r * (dh[j] - mean_dh - hr[j] * mean_dh_h);
                        }
                    }
                }
            }
            Op::Dropout { x, mask } => {
                if let Some(gx) = self.slot(grads, *x) {
                    for ((o, gi), m) in gx.iter_mut().zip(g).zip(mask) {
                        *o += gi * m;
                    }
                }
            }
            Op::Embedding { table, ids } => {
                let d = self.value(*table).shape()[1];
                if let Some(gt) = self.slot(grads, *table) {
                    for (r, &id) in ids.iter().enumerate() {
                        add_into(&mut gt[id * d..(id + 1) * d], &g[r * d..(r + 1) * d]);
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
                count,
            } => {
                let n = self.value(*logits).last_dim();
                let w = g[0] / *count as f64;
                if let Some(gl) = self.slot(grads, *logits) {
                    for ((o, p), t) in gl.chunks_mut(n).zip(probs.chunks(n)).zip(targets) {
                        if let Some(t) = t {
                            for (oj, pj) in o.iter_mut().zip(p) {
                                *oj += w * pj;
                            }
                            o[*t] -= w;
                        }
                    }
                }
            }
            Op::CausalAttention {
                q,
                k,
                v,
                heads,
                seq_len,
                probs,
            } => self.attention_backward(g, grads, (*q, *k, *v), *heads, *seq_len, probs),
        }
    }

    fn attention_backward(
        &self,
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
        (q, k, v): (Var, Var, Var),
        heads: usize,
        seq_len: usize,
        probs: &[f64],
    ) {
        let (rows, d) = self.value(q).matrix_dims("causal_attention").unwrap();
        let batch = rows / seq_len;
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qd, kd, vd) = (
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
        );
        let mut gq = vec![0.0; rows * d];
        let mut gk = vec![0.0; rows * d];
        let mut gv = vec![0.0; rows * d];
        let mut dp = vec![0.0; seq_len];
        for b in 0..batch {
            for h in 0..heads {
                let off = h * dh;
                for t in 0..seq_len {
                    let rt = b * seq_len + t;
                    let go = &g[rt * d + off..rt * d + off + dh];
                    let p = &probs[((b * heads + h) * seq_len + t) * seq_len..][..=t];
                    for s in 0..=t {
                        let rs = b * seq_len + s;
                        dp[s] = dot(go, &vd[rs * d + off..rs * d + off + dh]);
                        for (o, gi) in gv[rs * d + off..rs * d + off + dh].iter_mut().zip(go) {
                            *o += p[s] * gi;
                        }
                    }
                    let pd = dot(p, &dp[..=t]);
                    for s in 0..=t {
                        let rs = b * seq_len + s;
                        let ds = p[s] * (dp[s] - pd) * scale;
                        if ds == 0.0 {
                            continue;
                        }
                        for j in 0..dh {
                            gq[rt * d + off + j] += ds * kd[rs * d + off + j];
                            gk[rs * d + off + j] += ds * qd[rt * d + off + j];
                        }
                    }
                }
            }
        }
        for (var, buf) in [(q, gq), (k, gk), (v, gv)] {
            if let Some(slot) = self.slot(grads, var) {
                add_into(slot, &buf);
            }
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        z += *v;
    }
    for v in row.iter_mut() {
        *v /= z;
    }
}
