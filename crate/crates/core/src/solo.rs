//! Solo connections: inter-block adapters built from one shared sparse
//! low-rank codec, a per-connection encoding vector, and a homotopy gate.
//!
//! A connection reads the residual stream entering its first spanned block and
//! adds its output to the stream leaving its last spanned block:
//!
//! ```text
//! y = blocks[first..=last](x) + gate(decode(encode(dropout(x)) + b))
//! ```
//!
//! `encode`/`decode` multiply by the masked shared weights `W_e ⊙ M_e` and
//! `W_d ⊙ M_d`; every connection in a set uses the same two matrices.

use rand::seq::index::sample;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::gpt::{MiniGpt, ModelConfig};
use crate::param::{Constraint, Param, ParamRole, Parameterized};
use crate::rng::{stream, Stream, StreamRng};
use crate::tensor::Tensor;

#[derive(
    Clone, Copy, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize,
)]
#[serde(rename_all = "snake_case")]
pub enum GateVariant {
    /// `λ · v ⊙ z` with trainable `λ ∈ [0, 1]`.
    #[default]
    Homotopy,
    /// `v ⊙ z` with randomly initialized `v` and no `λ`.
    PlainVector,
}

impl std::str::FromStr for GateVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "homotopy" => Ok(GateVariant::Homotopy),
            "plain_vector" | "plain-vector" | "plain" => Ok(GateVariant::PlainVector),
            other => Err(Error::Config(format!(
                "unknown gate variant {other:?} (expected homotopy or plain_vector)"
            ))),
        }
    }
}

impl std::fmt::Display for GateVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            GateVariant::Homotopy => "homotopy",
            GateVariant::PlainVector => "plain_vector",
        })
    }
}

fn default_span() -> usize {
    1
}
fn default_dropout() -> f64 {
    0.1
}
fn default_lambda() -> f64 {
    0.001
}
fn default_true() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SoloConfig {
    pub rank: usize,
    pub sparsity: f64,
    #[serde(default = "default_span")]
    pub span: usize,
    #[serde(default = "default_dropout")]
    pub dropout_rate: f64,
    #[serde(default = "default_lambda")]
    pub lambda_init: f64,
    #[serde(default = "default_true")]
    pub codec_trainable: bool,
    #[serde(default)]
    pub gate_variant: GateVariant,
}

impl Default for SoloConfig {
    fn default() -> Self {
        Self {
            rank: 16,
            sparsity: 0.6,
            span: 1,
            dropout_rate: default_dropout(),
            lambda_init: default_lambda(),
            codec_trainable: true,
            gate_variant: GateVariant::Homotopy,
        }
    }
}

impl SoloConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rank == 0 {
            return Err(Error::Config("solo.rank must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.sparsity) {
            return Err(Error::Config(format!(
                "solo.sparsity {} outside [0, 1)",
                self.sparsity
            )));
        }
        if self.span == 0 {
            return Err(Error::Config("solo.span must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config(format!(
                "solo.dropout_rate {} outside [0, 1)",
                self.dropout_rate
            )));
        }
        if !(0.0..=1.0).contains(&self.lambda_init) {
            return Err(Error::Config(format!(
                "solo.lambda_init {} outside [0, 1]",
                self.lambda_init
            )));
        }
        Ok(())
    }
}

/// Number of unmasked entries kept in an `n`-element matrix at sparsity `s`:
/// `floor((1 - s) · n)`.
pub fn kept_count(n: usize, sparsity: f64) -> usize {
    // The epsilon absorbs representation error such as (1 - 0.9) * 10 = 0.999...
    ((1.0 - sparsity) * n as f64 + 1e-9).floor() as usize
}

/// One planned connection, 0-indexed by decoder block.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Placement {
    /// Block whose output feeds the connection (`placement_index - span`).
    pub input_index: usize,
    /// Last spanned block; the connection's output is added after it.
    pub placement_index: usize,
}

impl Placement {
    pub fn first_block(&self) -> usize {
        self.input_index + 1
    }

    pub fn span(&self) -> usize {
        self.placement_index - self.input_index
    }
}

/// Alternate-block placement starting at block 2.
///
/// Spans are disjoint runs of `span` consecutive blocks separated by one
/// unadapted block; the final block is never spanned. With `span = 1` this
/// gives placements `{2, 4, …, n_layers − 2}`.
pub fn plan_placement(n_layers: usize, span: usize) -> Result<Vec<Placement>> {
    if span == 0 {
        return Err(Error::Config("span must be at least 1".into()));
    }
    if n_layers < span + 2 {
        return Err(Error::Config(format!(
            "{n_layers} decoder blocks cannot host a span of {span} (need at least {})",
            span + 2
        )));
    }
    let mut plan = Vec::new();
    let mut first = 2;
    while first + span - 1 <= n_layers - 2 {
        let last = first + span - 1;
        plan.push(Placement {
            input_index: last - span,
            placement_index: last,
        });
        first = last + 2;
    }
    Ok(plan)
}

fn kaiming(shape: &[usize], fan_in: usize, rng: &mut StreamRng) -> Tensor {
    let dist = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("finite std");
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| dist.sample(rng)).collect()).expect("shape matches")
}

fn random_mask(shape: &[usize], kept: usize, rng: &mut StreamRng) -> Tensor {
    let n: usize = shape.iter().product();
    let mut data = vec![0.0; n];
    for i in sample(rng, n, kept) {
        data[i] = 1.0;
    }
    Tensor::new(shape.to_vec(), data).expect("shape matches")
}

/// The encoder (`d×r`) and decoder (`r×d`) shared by every connection.
#[derive(Clone, Debug)]
pub struct SharedCodec {
    pub encoder: Param,
    pub decoder: Param,
}

/// Masked codec weights bound onto a tape.
#[derive(Clone, Copy, Debug)]
pub struct CodecVars {
    pub encoder: Var,
    pub decoder: Var,
}

impl SharedCodec {
    fn new(d: usize, cfg: &SoloConfig, rng: &mut StreamRng) -> Self {
        let r = cfg.rank;
        let we = kaiming(&[d, r], d, rng);
        let wd = kaiming(&[r, d], r, rng);
        let kept = kept_count(d * r, cfg.sparsity);
        let me = random_mask(&[d, r], kept, rng);
        let md = random_mask(&[r, d], kept, rng);
        let mut encoder = Param::new("solo.codec.encoder", we, ParamRole::Codec).with_mask(me);
        let mut decoder = Param::new("solo.codec.decoder", wd, ParamRole::Codec).with_mask(md);
        encoder.trainable = cfg.codec_trainable;
        decoder.trainable = cfg.codec_trainable;
        Self { encoder, decoder }
    }

    pub fn d_model(&self) -> usize {
        self.encoder.value.shape()[0]
    }

    pub fn rank(&self) -> usize {
        self.encoder.value.shape()[1]
    }

    pub fn is_trainable(&self) -> bool {
        self.encoder.trainable
    }

    /// Binds `W ⊙ M` for both matrices. The mask multiply is on the tape, so
    /// masked slots receive exactly zero gradient.
    pub fn bind(&self, tape: &mut Tape) -> Result<CodecVars> {
        let bind_one = |tape: &mut Tape, p: &Param| -> Result<Var> {
            let w = tape.param(p);
            match &p.mask {
                Some(m) => {
                    let m = tape.constant(m.clone());
                    tape.mul(w, m)
                }
                None => Ok(w),
            }
        };
        Ok(CodecVars {
            encoder: bind_one(tape, &self.encoder)?,
            decoder: bind_one(tape, &self.decoder)?,
        })
    }

    /// Copy with parameter names moved under `prefix`; bound separately it acts
    /// as an independent codec.
    pub fn renamed(&self, prefix: &str) -> Self {
        let mut c = self.clone();
        c.encoder.name = format!("{prefix}.{}", self.encoder.name);
        c.decoder.name = format!("{prefix}.{}", self.decoder.name);
        c
    }
}

impl Parameterized for SharedCodec {
    fn visit_params(&self, f: &mut dyn FnMut(&Param)) {
        f(&self.encoder);
        f(&self.decoder);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.encoder);
        f(&mut self.decoder);
    }
}

/// `f_h(z) = λ · v ⊙ z`.
pub fn homotopy_gate(tape: &mut Tape, lambda: Var, vector: Var, z: Var) -> Result<Var> {
    let vz = tape.mul_row(z, vector)?;
    tape.scale_by(vz, lambda)
}

#[derive(Clone, Debug)]
pub struct HomotopyGate {
    /// One-element parameter constrained to `[0, 1]`.
    pub lambda: Param,
    pub vector: Param,
}

#[derive(Clone, Debug)]
pub enum Gate {
    Homotopy(HomotopyGate),
    PlainVector { vector: Param },
}

impl Gate {
    pub fn variant(&self) -> GateVariant {
        match self {
            Gate::Homotopy(_) => GateVariant::Homotopy,
            Gate::PlainVector { .. } => GateVariant::PlainVector,
        }
    }

    pub fn vector(&self) -> &Param {
        match self {
            Gate::Homotopy(h) => &h.vector,
            Gate::PlainVector { vector } => vector,
        }
    }

    pub fn lambda(&self) -> Option<f64> {
        match self {
            Gate::Homotopy(h) => Some(h.lambda.value.item()),
            Gate::PlainVector { .. } => None,
        }
    }

    pub fn apply(&self, tape: &mut Tape, z: Var) -> Result<Var> {
        match self {
            Gate::Homotopy(h) => {
                let l = tape.param(&h.lambda);
                let v = tape.param(&h.vector);
                homotopy_gate(tape, l, v, z)
            }
            Gate::PlainVector { vector } => {
                let v = tape.param(vector);
                tape.mul_row(z, v)
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct SoloConnection {
    pub placement: Placement,
    /// Task-specific bias added in the rank-`r` space.
    pub encoding: Param,
    pub gate: Gate,
}

impl SoloConnection {
    pub fn placement_index(&self) -> usize {
        self.placement.placement_index
    }

    pub fn input_index(&self) -> usize {
        self.placement.input_index
    }

    fn visit(&self, f: &mut dyn FnMut(&Param)) {
        f(&self.encoding);
        match &self.gate {
            Gate::Homotopy(h) => {
                f(&h.vector);
                f(&h.lambda);
            }
            Gate::PlainVector { vector } => f(vector),
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.encoding);
        match &mut self.gate {
            Gate::Homotopy(h) => {
                f(&mut h.vector);
                f(&mut h.lambda);
            }
            Gate::PlainVector { vector } => f(vector),
        }
    }
}

/// `gate(decode(encode(dropout(x)) + b))` for one connection. `x` is `[rows, d]`.
pub fn solo_forward(
    tape: &mut Tape,
    conn: &SoloConnection,
    codec: &CodecVars,
    x: Var,
    dropout_rate: f64,
    rng: Option<&mut StreamRng>,
) -> Result<Var> {
    let d = tape.value(codec.encoder).shape()[0];
    if tape.value(x).last_dim() != d {
        return Err(Error::dim(
            "solo_forward",
            format!(
                "input width {} does not match codec width {d}",
                tape.value(x).last_dim()
            ),
        ));
    }
    let x = tape.dropout(x, dropout_rate, rng)?;
    let e = tape.matmul(x, codec.encoder)?;
    let b = tape.param(&conn.encoding);
    let e = tape.add_row(e, b)?;
    let z = tape.matmul(e, codec.decoder)?;
    conn.gate.apply(tape, z)
}

#[derive(Clone, Debug)]
pub struct SoloAdapterSet {
    pub config: SoloConfig,
    pub codec: SharedCodec,
    pub connections: Vec<SoloConnection>,
    n_layers: usize,
}

impl SoloAdapterSet {
    /// Kaiming-initialized codec with fixed random masks, `b = 0`, and gates at
    /// `λ = lambda_init, v = 1` (homotopy) or Kaiming-random `v` (plain vector).
    pub fn build(model_cfg: &ModelConfig, cfg: &SoloConfig, seed: u64) -> Result<Self> {
        model_cfg.validate()?;
        cfg.validate()?;
        let plan = plan_placement(model_cfg.n_layers, cfg.span)?;
        let d = model_cfg.d_model;
        let mut rng = stream(seed, Stream::AdapterInit);
        let codec = SharedCodec::new(d, cfg, &mut rng);
        let connections = plan
            .into_iter()
            .map(|placement| {
                let tag = format!("solo.conn.b{}", placement.placement_index);
                let encoding = Param::new(
                    format!("{tag}.encoding"),
                    Tensor::zeros(&[cfg.rank]),
                    ParamRole::EncodingVector,
                );
                let gate = match cfg.gate_variant {
                    GateVariant::Homotopy => Gate::Homotopy(HomotopyGate {
                        lambda: Param::new(
                            format!("{tag}.lambda"),
                            Tensor::scalar(cfg.lambda_init),
                            ParamRole::Lambda,
                        )
                        .with_constraint(Constraint::UnitInterval),
                        vector: Param::new(
                            format!("{tag}.gate"),
                            Tensor::ones(&[d]),
                            ParamRole::GateVector,
                        ),
                    }),
                    GateVariant::PlainVector => Gate::PlainVector {
                        vector: Param::new(
                            format!("{tag}.gate"),
                            kaiming(&[d], d, &mut rng),
                            ParamRole::GateVector,
                        ),
                    },
                };
                SoloConnection {
                    placement,
                    encoding,
                    gate,
                }
            })
            .collect();
        Ok(Self {
            config: cfg.clone(),
            codec,
            connections,
            n_layers: model_cfg.n_layers,
        })
    }

    pub fn d_model(&self) -> usize {
        self.codec.d_model()
    }

    pub fn n_layers(&self) -> usize {
        self.n_layers
    }

    pub fn check_geometry(&self, cfg: &ModelConfig) -> Result<()> {
        if cfg.d_model != self.d_model() || cfg.n_layers != self.n_layers {
            return Err(Error::Config(format!(
                "adapter built for d_model={}, n_layers={} but model has d_model={}, n_layers={}",
                self.d_model(),
                self.n_layers,
                cfg.d_model,
                cfg.n_layers
            )));
        }
        Ok(())
    }

    pub fn connection_starting_at(&self, block: usize) -> Option<&SoloConnection> {
        self.connections
            .iter()
            .find(|c| c.placement.first_block() == block)
    }

    /// The same set with the connection at `placement_index` removed.
    pub fn without_connection(&self, placement_index: usize) -> Self {
        let mut s = self.clone();
        s.connections
            .retain(|c| c.placement_index() != placement_index);
        s
    }

    pub fn set_all_lambdas(&mut self, value: f64) {
        for c in &mut self.connections {
            if let Gate::Homotopy(h) = &mut c.gate {
                h.lambda.value.data_mut()[0] = value;
            }
        }
    }

    /// `(min, mean, max)` of the gate λ values; `None` for plain-vector gates.
    pub fn lambda_summary(&self) -> Option<(f64, f64, f64)> {
        let ls: Vec<f64> = self
            .connections
            .iter()
            .filter_map(|c| c.gate.lambda())
            .collect();
        if ls.is_empty() {
            return None;
        }
        let min = ls.iter().copied().fold(f64::INFINITY, f64::min);
        let max = ls.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        Some((min, ls.iter().sum::<f64>() / ls.len() as f64, max))
    }
}

impl Parameterized for SoloAdapterSet {
    fn visit_params(&self, f: &mut dyn FnMut(&Param)) {
        self.codec.visit_params(f);
        for c in &self.connections {
            c.visit(f);
        }
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.codec.visit_params_mut(f);
        for c in &mut self.connections {
            c.visit_mut(f);
        }
    }
}

/// Applies the block(s) starting at `block_index`, adding the solo branch if a
/// connection starts there. Returns the output and the number of blocks consumed.
#[allow(clippy::too_many_arguments)]
pub fn apply_block_with_solo(
    tape: &mut Tape,
    model: &MiniGpt,
    set: &SoloAdapterSet,
    codec: &CodecVars,
    block_index: usize,
    x: Var,
    seq_len: usize,
    mut rng: Option<&mut StreamRng>,
) -> Result<(Var, usize)> {
    let Some(conn) = set.connection_starting_at(block_index) else {
        let y = model.blocks[block_index].forward(tape, x, seq_len, None, rng)?;
        return Ok((y, 1));
    };
    let mut h = x;
    for b in conn.placement.first_block()..=conn.placement_index() {
        h = model.blocks[b].forward(tape, h, seq_len, None, rng.as_deref_mut())?;
    }
    let s = solo_forward(tape, conn, codec, x, set.config.dropout_rate, rng)?;
    Ok((tape.add(h, s)?, conn.placement.span()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model_cfg(d: usize, layers: usize) -> ModelConfig {
        ModelConfig {
            vocab_size: 10,
            d_model: d,
            n_layers: layers,
            n_heads: 2,
            d_ff: 2 * d,
            max_seq_len: 8,
            dropout_rate: 0.0,
        }
    }

    #[test]
    fn placement_counts() {
        assert_eq!(plan_placement(24, 1).unwrap().len(), 11);
        assert_eq!(plan_placement(12, 1).unwrap().len(), 5);
        let p = plan_placement(4, 1).unwrap();
        assert_eq!(p.len(), 1);
        assert_eq!(p[0].placement_index, 2);
        assert_eq!(p[0].input_index, 1);
        let idx: Vec<usize> = plan_placement(12, 1)
            .unwrap()
            .iter()
            .map(|p| p.placement_index)
            .collect();
        assert_eq!(idx, vec![2, 4, 6, 8, 10]);
    }

    #[test]
    fn span_placement_is_disjoint() {
        let p = plan_placement(12, 3).unwrap();
        assert_eq!(p.len(), 2);
        assert_eq!((p[0].first_block(), p[0].placement_index), (2, 4));
        assert_eq!((p[1].first_block(), p[1].placement_index), (6, 8));
        assert_eq!(plan_placement(12, 5).unwrap().len(), 1);
        assert!(matches!(plan_placement(4, 3), Err(Error::Config(_))));
        assert!(plan_placement(3, 1).unwrap().is_empty());
    }

    #[test]
    fn kept_count_floors() {
        assert_eq!(kept_count(1024 * 32, 0.7), 9830);
        assert_eq!(kept_count(10, 0.9), 1);
        assert_eq!(kept_count(7, 0.0), 7);
    }

    #[test]
    fn config_validation() {
        let ok = SoloConfig::default();
        assert!(ok.validate().is_ok());
        for bad in [
            SoloConfig {
                rank: 0,
                ..ok.clone()
            },
            SoloConfig {
                sparsity: 1.0,
                ..ok.clone()
            },
            SoloConfig {
                span: 0,
                ..ok.clone()
            },
            SoloConfig {
                lambda_init: 1.5,
                ..ok.clone()
            },
            SoloConfig {
                dropout_rate: -0.1,
                ..ok.clone()
            },
        ] {
            assert!(matches!(bad.validate(), Err(Error::Config(_))), "{bad:?}");
        }
    }

    #[test]
    fn homotopy_gate_examples() {
        let mut tape = Tape::new();
        let z = tape.constant(Tensor::new(vec![1, 3], vec![1.0, 1.0, 1.0]).unwrap());
        let v = tape.constant(Tensor::vector(vec![2.0, 0.0, -1.0]));
        let l = tape.constant(Tensor::scalar(0.5));
        let y = homotopy_gate(&mut tape, l, v, z).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, 0.0, -0.5]);

        let l0 = tape.constant(Tensor::scalar(0.0));
        let y = homotopy_gate(&mut tape, l0, v, z).unwrap();
        assert!(tape.value(y).data().iter().all(|&x| x == 0.0));

        let ones = tape.constant(Tensor::ones(&[3]));
        let l1 = tape.constant(Tensor::scalar(1.0));
        let zz = tape.constant(Tensor::new(vec![1, 3], vec![0.3, -2.0, 7.0]).unwrap());
        let y = homotopy_gate(&mut tape, l1, ones, zz).unwrap();
        assert!(tape.value(y).bit_eq(tape.value(zz)));
    }

    #[test]
    fn build_initial_state() {
        let cfg = SoloConfig {
            rank: 3,
            sparsity: 0.5,
            ..SoloConfig::default()
        };
        let set = SoloAdapterSet::build(&model_cfg(8, 6), &cfg, 4).unwrap();
        assert_eq!(set.connections.len(), 2);
        assert_eq!(set.codec.encoder.free_count(), kept_count(24, 0.5));
        assert_eq!(set.codec.decoder.free_count(), kept_count(24, 0.5));
        for c in &set.connections {
            assert!(c.encoding.value.data().iter().all(|&v| v == 0.0));
            assert!(c.gate.vector().value.data().iter().all(|&v| v == 1.0));
            assert_eq!(c.gate.lambda(), Some(0.001));
        }
    }

    #[test]
    fn plain_variant_has_one_fewer_param_per_connection() {
        let m = model_cfg(8, 8);
        let h = SoloAdapterSet::build(
            &m,
            &SoloConfig {
                rank: 3,
                ..SoloConfig::default()
            },
            1,
        )
        .unwrap();
        let p = SoloAdapterSet::build(
            &m,
            &SoloConfig {
                rank: 3,
                gate_variant: GateVariant::PlainVector,
                ..SoloConfig::default()
            },
            1,
        )
        .unwrap();
        assert_eq!(
            h.trainable_param_count() - p.trainable_param_count(),
            h.connections.len()
        );
        assert!(p.lambda_summary().is_none());
    }

    #[test]
    fn zero_lambda_gives_exact_zero_output() {
        let set = SoloAdapterSet::build(
            &model_cfg(8, 4),
            &SoloConfig {
                rank: 3,
                ..Default::default()
            },
            2,
        )
        .unwrap();
        let mut set = set;
        set.set_all_lambdas(0.0);
        let mut tape = Tape::new();
        let codec = set.codec.bind(&mut tape).unwrap();
        let x = tape
            .constant(Tensor::new(vec![2, 8], (0..16).map(|i| i as f64 - 7.5).collect()).unwrap());
        let y = solo_forward(&mut tape, &set.connections[0], &codec, x, 0.1, None).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn neutral_gates_reduce_to_pure_low_rank_path() {
        let cfg = SoloConfig {
            rank: 3,
            sparsity: 0.0,
            lambda_init: 1.0,
            ..Default::default()
        };
        let set = SoloAdapterSet::build(&model_cfg(8, 4), &cfg, 9).unwrap();
        let x = Tensor::new(vec![2, 8], (0..16).map(|i| (i as f64).sin()).collect()).unwrap();
        let mut tape = Tape::new();
        let codec = set.codec.bind(&mut tape).unwrap();
        let xv = tape.constant(x.clone());
        let y = solo_forward(
            &mut tape,
            &set.connections[0],
            &codec,
            xv,
            cfg.dropout_rate,
            None,
        )
        .unwrap();
        let expected = x
            .matmul(&set.codec.encoder.value)
            .unwrap()
            .matmul(&set.codec.decoder.value)
            .unwrap();
        assert!(tape.value(y).bit_eq(&expected));
    }

    #[test]
    fn solo_rejects_wrong_width() {
        let set = SoloAdapterSet::build(
            &model_cfg(8, 4),
            &SoloConfig {
                rank: 3,
                ..Default::default()
            },
            2,
        )
        .unwrap();
        let mut tape = Tape::new();
        let codec = set.codec.bind(&mut tape).unwrap();
        let x = tape.constant(Tensor::zeros(&[2, 6]));
        assert!(matches!(
            solo_forward(&mut tape, &set.connections[0], &codec, x, 0.1, None),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn gate_variant_parses() {
        assert_eq!(
            "homotopy".parse::<GateVariant>().unwrap(),
            GateVariant::Homotopy
        );
        assert_eq!(
            "plain_vector".parse::<GateVariant>().unwrap(),
            GateVariant::PlainVector
        );
        assert!("sigmoid".parse::<GateVariant>().is_err());
    }
}
