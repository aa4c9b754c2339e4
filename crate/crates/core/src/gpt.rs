//! A small GPT-2-shaped decoder-only transformer.
//!
//! Pre-norm residual blocks, learned positional embeddings, and an LM head tied
//! to the token embedding. Activations for a batch are stacked row-wise into a
//! `[batch * seq_len, d_model]` matrix.

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::lora::{LoraAdapterSet, LoraBlock};
use crate::param::{Param, ParamRole, Parameterized};
use crate::rng::{stream, Stream, StreamRng};
use crate::solo::{apply_block_with_solo, SoloAdapterSet};
use crate::tensor::Tensor;

const INIT_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_seq_len: usize,
    #[serde(default)]
    pub dropout_rate: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: 64,
            d_model: 64,
            n_layers: 12,
            n_heads: 4,
            d_ff: 256,
            max_seq_len: 64,
            dropout_rate: 0.0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("vocab_size", self.vocab_size),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("d_ff", self.d_ff),
            ("max_seq_len", self.max_seq_len),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("model.{name} must be positive")));
        }
        if self.n_layers < 3 {
            return Err(Error::Config(format!(
                "model.n_layers must be at least 3, got {}",
                self.n_layers
            )));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "model.n_heads ({}) must divide model.d_model ({})",
                self.n_heads, self.d_model
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config(format!(
                "model.dropout_rate {} outside [0, 1)",
                self.dropout_rate
            )));
        }
        Ok(())
    }
}

/// Which adapter, if any, participates in a forward pass.
#[derive(Clone, Copy, Debug, Default)]
pub enum Adapter<'a> {
    #[default]
    None,
    Solo(&'a SoloAdapterSet),
    Lora(&'a LoraAdapterSet),
}

#[derive(Clone, Debug)]
pub struct DecoderBlock {
    pub ln1_gain: Param,
    pub ln1_bias: Param,
    pub wq: Param,
    pub bq: Param,
    pub wk: Param,
    pub bk: Param,
    pub wv: Param,
    pub bv: Param,
    pub wo: Param,
    pub bo: Param,
    pub ln2_gain: Param,
    pub ln2_bias: Param,
    pub w1: Param,
    pub b1: Param,
    pub w2: Param,
    pub b2: Param,
    n_heads: usize,
    dropout_rate: f64,
}

fn normal(shape: &[usize], std: f64, rng: &mut StreamRng) -> Tensor {
    let dist = Normal::new(0.0, std).expect("finite std");
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| dist.sample(rng)).collect()).expect("shape matches")
}

fn linear(tape: &mut Tape, x: Var, w: &Param, b: &Param) -> Result<Var> {
    let wv = tape.param(w);
    let bv = tape.param(b);
    let y = tape.matmul(x, wv)?;
    tape.add_row(y, bv)
}

impl DecoderBlock {
    fn init(index: usize, cfg: &ModelConfig, rng: &mut StreamRng) -> Self {
        let (d, f) = (cfg.d_model, cfg.d_ff);
        let p = |name: &str, t: Tensor| {
            Param::new(format!("blocks.{index}.{name}"), t, ParamRole::Base)
        };
        Self {
            ln1_gain: p("ln1.gain", Tensor::ones(&[d])),
            ln1_bias: p("ln1.bias", Tensor::zeros(&[d])),
            wq: p("attn.wq", normal(&[d, d], INIT_STD, rng)),
            bq: p("attn.bq", Tensor::zeros(&[d])),
            wk: p("attn.wk", normal(&[d, d], INIT_STD, rng)),
            bk: p("attn.bk", Tensor::zeros(&[d])),
            wv: p("attn.wv", normal(&[d, d], INIT_STD, rng)),
            bv: p("attn.bv", Tensor::zeros(&[d])),
            wo: p("attn.wo", normal(&[d, d], INIT_STD, rng)),
            bo: p("attn.bo", Tensor::zeros(&[d])),
            ln2_gain: p("ln2.gain", Tensor::ones(&[d])),
            ln2_bias: p("ln2.bias", Tensor::zeros(&[d])),
            w1: p("mlp.w1", normal(&[d, f], INIT_STD, rng)),
            b1: p("mlp.b1", Tensor::zeros(&[f])),
            w2: p("mlp.w2", normal(&[f, d], INIT_STD, rng)),
            b2: p("mlp.b2", Tensor::zeros(&[d])),
            n_heads: cfg.n_heads,
            dropout_rate: cfg.dropout_rate,
        }
    }

    pub fn d_model(&self) -> usize {
        self.ln1_gain.numel()
    }

    pub fn is_frozen(&self) -> bool {
        let mut any = false;
        self.visit_params(&mut |p| any |= p.trainable);
        !any
    }

    /// `x + Attn(LN(x))`, then `+ MLP(LN(·))`. `x` is `[batch * seq_len, d]`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        x: Var,
        seq_len: usize,
        lora: Option<&LoraBlock>,
        mut rng: Option<&mut StreamRng>,
    ) -> Result<Var> {
        let d = self.d_model();
        if tape.value(x).last_dim() != d {
            return Err(Error::dim(
                "block_forward",
                format!(
                    "input width {} does not match d_model {d}",
                    tape.value(x).last_dim()
                ),
            ));
        }
        let (g1, b1) = (tape.param(&self.ln1_gain), tape.param(&self.ln1_bias));
        let a = tape.layer_norm(x, g1, b1)?;
        let mut q = linear(tape, a, &self.wq, &self.bq)?;
        let k = linear(tape, a, &self.wk, &self.bk)?;
        let mut v = linear(tape, a, &self.wv, &self.bv)?;
        if let Some(l) = lora {
            q = l.q.apply(tape, a, q)?;
            v = l.v.apply(tape, a, v)?;
        }
        let att = tape.causal_attention(q, k, v, self.n_heads, seq_len)?;
        let o = linear(tape, att, &self.wo, &self.bo)?;
        let o = tape.dropout(o, self.dropout_rate, rng.as_deref_mut())?;
        let x1 = tape.add(x, o)?;

        let (g2, b2) = (tape.param(&self.ln2_gain), tape.param(&self.ln2_bias));
        let m = tape.layer_norm(x1, g2, b2)?;
        let m = linear(tape, m, &self.w1, &self.b1)?;
        let m = tape.gelu(m);
        let m = linear(tape, m, &self.w2, &self.b2)?;
        let m = tape.dropout(m, self.dropout_rate, rng)?;
        tape.add(x1, m)
    }
}

impl Parameterized for DecoderBlock {
    fn visit_params(&self, f: &mut dyn FnMut(&Param)) {
        for p in [
            &self.ln1_gain,
            &self.ln1_bias,
            &self.wq,
            &self.bq,
            &self.wk,
            &self.bk,
            &self.wv,
            &self.bv,
            &self.wo,
            &self.bo,
            &self.ln2_gain,
            &self.ln2_bias,
            &self.w1,
            &self.b1,
            &self.w2,
            &self.b2,
        ] {
            f(p);
        }
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        for p in [
            &mut self.ln1_gain,
            &mut self.ln1_bias,
            &mut self.wq,
            &mut self.bq,
            &mut self.wk,
            &mut self.bk,
            &mut self.wv,
            &mut self.bv,
            &mut self.wo,
            &mut self.bo,
            &mut self.ln2_gain,
            &mut self.ln2_bias,
            &mut self.w1,
            &mut self.b1,
            &mut self.w2,
            &mut self.b2,
        ] {
            f(p);
        }
    }
}

#[derive(Clone, Debug)]
pub struct MiniGpt {
    config: ModelConfig,
    pub token_embedding: Param,
    pub position_embedding: Param,
    pub blocks: Vec<DecoderBlock>,
    pub ln_f_gain: Param,
    pub ln_f_bias: Param,
}

impl MiniGpt {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = stream(seed, Stream::Init);
        let (v, d) = (config.vocab_size, config.d_model);
        let token_embedding =
            Param::new("wte", normal(&[v, d], INIT_STD, &mut rng), ParamRole::Base);
        let position_embedding = Param::new(
            "wpe",
            normal(&[config.max_seq_len, d], INIT_STD, &mut rng),
            ParamRole::Base,
        );
        let blocks = (0..config.n_layers)
            .map(|i| DecoderBlock::init(i, &config, &mut rng))
            .collect();
        Ok(Self {
            token_embedding,
            position_embedding,
            blocks,
            ln_f_gain: Param::new("ln_f.gain", Tensor::ones(&[d]), ParamRole::Base),
            ln_f_bias: Param::new("ln_f.bias", Tensor::zeros(&[d]), ParamRole::Base),
            config,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn freeze_base(&mut self) {
        self.visit_params_mut(&mut |p| p.trainable = false);
    }

    pub fn unfreeze_base(&mut self) {
        self.visit_params_mut(&mut |p| p.trainable = true);
    }

    /// Validates a batch of equal-length token sequences; returns the sequence length.
    pub fn check_tokens(&self, batch: &[Vec<usize>]) -> Result<usize> {
        let seq_len = batch
            .first()
            .map(Vec::len)
            .ok_or_else(|| Error::Input("empty batch".into()))?;
        if seq_len == 0 {
            return Err(Error::Input("empty token sequence".into()));
        }
        if seq_len > self.config.max_seq_len {
            return Err(Error::Input(format!(
                "sequence length {seq_len} exceeds max_seq_len {}",
                self.config.max_seq_len
            )));
        }
        for seq in batch {
            if seq.len() != seq_len {
                return Err(Error::Input(
                    "sequences in a batch must have equal length".into(),
                ));
            }
            if let Some(&t) = seq.iter().find(|&&t| t >= self.config.vocab_size) {
                return Err(Error::Input(format!(
                    "token {t} out of range for vocab_size {}",
                    self.config.vocab_size
                )));
            }
        }
        Ok(seq_len)
    }

    /// Token plus positional embeddings: `[batch * seq_len, d]`.
    pub fn embed(&self, tape: &mut Tape, batch: &[Vec<usize>]) -> Result<(Var, usize)> {
        let seq_len = self.check_tokens(batch)?;
        let ids: Vec<usize> = batch.iter().flatten().copied().collect();
        let positions: Vec<usize> = (0..batch.len()).flat_map(|_| 0..seq_len).collect();
        let wte = tape.param(&self.token_embedding);
        let wpe = tape.param(&self.position_embedding);
        let tok = tape.embedding(wte, &ids)?;
        let pos = tape.embedding(wpe, &positions)?;
        Ok((tape.add(tok, pos)?, seq_len))
    }

    /// Final layer norm and the tied LM head.
    pub fn head(&self, tape: &mut Tape, h: Var) -> Result<Var> {
        let (g, b) = (tape.param(&self.ln_f_gain), tape.param(&self.ln_f_bias));
        let h = tape.layer_norm(h, g, b)?;
        let wte = tape.param(&self.token_embedding);
        let wt = tape.transpose(wte)?;
        tape.matmul(h, wt)
    }

    /// Logits `[batch * seq_len, vocab_size]`. `rng = None` runs in eval mode.
    pub fn forward(
        &self,
        tape: &mut Tape,
        batch: &[Vec<usize>],
        adapter: Adapter<'_>,
        mut rng: Option<&mut StreamRng>,
    ) -> Result<Var> {
        let (mut h, seq_len) = self.embed(tape, batch)?;
        match adapter {
            Adapter::None => {
                for block in &self.blocks {
                    h = block.forward(tape, h, seq_len, None, rng.as_deref_mut())?;
                }
            }
            Adapter::Lora(lora) => {
                lora.check_geometry(&self.config)?;
                for (i, block) in self.blocks.iter().enumerate() {
                    h = block.forward(
                        tape,
                        h,
                        seq_len,
                        Some(&lora.blocks[i]),
                        rng.as_deref_mut(),
                    )?;
                }
            }
            Adapter::Solo(solo) => {
                solo.check_geometry(&self.config)?;
                let codec = solo.codec.bind(tape)?;
                let mut i = 0;
                while i < self.blocks.len() {
                    let (out, consumed) = apply_block_with_solo(
                        tape,
                        self,
                        solo,
                        &codec,
                        i,
                        h,
                        seq_len,
                        rng.as_deref_mut(),
                    )?;
                    h = out;
                    i += consumed;
                }
            }
        }
        self.head(tape, h)
    }

    /// Eval-mode logits as a plain tensor.
    pub fn logits(&self, batch: &[Vec<usize>], adapter: Adapter<'_>) -> Result<Tensor> {
        let mut tape = Tape::new();
        let y = self.forward(&mut tape, batch, adapter, None)?;
        Ok(tape.value(y).clone())
    }
}

impl Parameterized for MiniGpt {
    fn visit_params(&self, f: &mut dyn FnMut(&Param)) {
        f(&self.token_embedding);
        f(&self.position_embedding);
        for b in &self.blocks {
            b.visit_params(f);
        }
        f(&self.ln_f_gain);
        f(&self.ln_f_bias);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.token_embedding);
        f(&mut self.position_embedding);
        for b in &mut self.blocks {
            b.visit_params_mut(f);
        }
        f(&mut self.ln_f_gain);
        f(&mut self.ln_f_bias);
    }
}

impl<A: Parameterized, B: Parameterized> Parameterized for (A, B) {
    fn visit_params(&self, f: &mut dyn FnMut(&Param)) {
        self.0.visit_params(f);
        self.1.visit_params(f);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.0.visit_params_mut(f);
        self.1.visit_params_mut(f);
    }
}
