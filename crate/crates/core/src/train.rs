//! Pretrain → freeze → fine-tune pipeline.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autograd::Tape;
use crate::checkpoint::{self, Checkpoint};
use crate::error::{Error, Result};
use crate::gpt::{Adapter, MiniGpt, ModelConfig};
use crate::lora::{LoraAdapterSet, LoraConfig};
use crate::optim::{AdamW, OptimizerConfig};
use crate::param::Parameterized;
use crate::rng::{stream, Stream};
use crate::solo::{SoloAdapterSet, SoloConfig};
use crate::task::{Batch, TaskSpec};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TuningMode {
    FullFt,
    Frozen,
    Solo,
    Lora,
}

impl std::str::FromStr for TuningMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full_ft" | "full-ft" => Ok(TuningMode::FullFt),
            "frozen" => Ok(TuningMode::Frozen),
            "solo" => Ok(TuningMode::Solo),
            "lora" => Ok(TuningMode::Lora),
            other => Err(Error::Config(format!(
                "unknown mode {other:?} (expected full_ft, frozen, solo or lora)"
            ))),
        }
    }
}

fn default_eval_every() -> usize {
    100
}
fn default_eval_size() -> usize {
    64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    #[serde(default = "default_eval_every")]
    pub every: usize,
    #[serde(default = "default_eval_size")]
    pub size: usize,
    /// Stop early once the eval loss drops below this value.
    #[serde(default)]
    pub target_loss: Option<f64>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            every: default_eval_every(),
            size: default_eval_size(),
            target_loss: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub mode: TuningMode,
    #[serde(default)]
    pub solo: SoloConfig,
    #[serde(default)]
    pub lora: LoraConfig,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    pub task: TaskSpec,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default)]
    pub seed: u64,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.optimizer.validate()?;
        self.task
            .validate(self.model.vocab_size, self.model.max_seq_len)?;
        match self.mode {
            TuningMode::Solo => self.solo.validate()?,
            TuningMode::Lora => self.lora.validate()?,
            _ => {}
        }
        if self.eval.every == 0 || self.eval.size == 0 {
            return Err(Error::Config(
                "eval.every and eval.size must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }
}

/// Adapter owned by a training run.
#[derive(Clone, Debug, Default)]
#[allow(clippy::large_enum_variant)]
pub enum AdapterState {
    #[default]
    None,
    Solo(SoloAdapterSet),
    Lora(LoraAdapterSet),
}

impl AdapterState {
    pub fn as_adapter(&self) -> Adapter<'_> {
        match self {
            AdapterState::None => Adapter::None,
            AdapterState::Solo(s) => Adapter::Solo(s),
            AdapterState::Lora(l) => Adapter::Lora(l),
        }
    }

    pub fn lambda_summary(&self) -> Option<(f64, f64, f64)> {
        match self {
            AdapterState::Solo(s) => s.lambda_summary(),
            _ => None,
        }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint, model_cfg: &ModelConfig) -> Result<Self> {
        match ckpt.kind {
            checkpoint::CheckpointKind::Solo => {
                Ok(Self::Solo(checkpoint::load_solo(ckpt, model_cfg)?))
            }
            checkpoint::CheckpointKind::Lora => {
                Ok(Self::Lora(checkpoint::load_lora(ckpt, model_cfg)?))
            }
            checkpoint::CheckpointKind::Empty => Ok(Self::None),
            checkpoint::CheckpointKind::Base => Err(Error::Config(
                "expected an adapter checkpoint, got a base model".into(),
            )),
        }
    }
}

impl Parameterized for AdapterState {
    fn visit_params(&self, f: &mut dyn FnMut(&crate::param::Param)) {
        match self {
            AdapterState::None => {}
            AdapterState::Solo(s) => s.visit_params(f),
            AdapterState::Lora(l) => l.visit_params(f),
        }
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut crate::param::Param)) {
        match self {
            AdapterState::None => {}
            AdapterState::Solo(s) => s.visit_params_mut(f),
            AdapterState::Lora(l) => l.visit_params_mut(f),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: usize,
    pub train_loss: Option<f64>,
    pub eval_loss: f64,
    pub eval_accuracy: f64,
    pub lambda_min: Option<f64>,
    pub lambda_mean: Option<f64>,
    pub lambda_max: Option<f64>,
    pub wall_clock_secs: f64,
}

/// SHA-256 over the deterministic fields of a metrics stream (everything but
/// wall-clock time).
pub fn metrics_checksum(records: &[MetricsRecord]) -> String {
    let mut h = Sha256::new();
    for r in records {
        let opt = |v: Option<f64>| v.map_or(u64::MAX, f64::to_bits);
        h.update((r.step as u64).to_le_bytes());
        h.update(opt(r.train_loss).to_le_bytes());
        h.update(r.eval_loss.to_bits().to_le_bytes());
        h.update(r.eval_accuracy.to_bits().to_le_bytes());
        h.update(opt(r.lambda_min).to_le_bytes());
        h.update(opt(r.lambda_mean).to_le_bytes());
        h.update(opt(r.lambda_max).to_le_bytes());
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// Writes one JSON object per line.
pub fn write_metrics(path: impl AsRef<Path>, records: &[MetricsRecord]) -> Result<()> {
    let path = path.as_ref();
    let mut f =
        std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| Error::io(path, e))?);
    for r in records {
        let line = serde_json::to_string(r).expect("record serializes");
        writeln!(f, "{line}").map_err(|e| Error::io(path, e))?;
    }
    f.flush().map_err(|e| Error::io(path, e))
}

/// Eval-mode loss and argmax accuracy over the batch's target positions.
pub fn evaluate(model: &MiniGpt, adapter: Adapter<'_>, batch: &Batch) -> Result<(f64, f64)> {
    let mut tape = Tape::new();
    let logits = model.forward(&mut tape, &batch.inputs, adapter, None)?;
    let loss = tape.cross_entropy(logits, &batch.targets)?;
    let lv = tape.value(logits);
    let v = lv.last_dim();
    let (mut hit, mut n) = (0usize, 0usize);
    for (row, t) in lv.data().chunks(v).zip(&batch.targets) {
        if let Some(t) = t {
            let arg = row
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &x)| {
                    if x > bv {
                        (i, x)
                    } else {
                        (bi, bv)
                    }
                })
                .0;
            hit += usize::from(arg == *t);
            n += 1;
        }
    }
    Ok((tape.value(loss).item(), hit as f64 / n as f64))
}

/// `‖logits(adapted) − logits(base)‖ / ‖logits(base)‖` in eval mode.
pub fn logit_perturbation(
    model: &MiniGpt,
    adapter: Adapter<'_>,
    probe: &[Vec<usize>],
) -> Result<f64> {
    let base = model.logits(probe, Adapter::None)?;
    let adapted = model.logits(probe, adapter)?;
    let diff: f64 = base
        .data()
        .iter()
        .zip(adapted.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt();
    Ok(diff / base.norm())
}

/// Fixed probe sequences for logits comparisons.
pub fn probe_batch(task: &TaskSpec, size: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut rng = stream(seed, Stream::Probe);
    task.sample_batch(&mut rng, size).inputs
}

/// Runs the optimization loop in place. `on_record` sees each metrics record
/// as it is produced.
pub fn train_loop(
    model: &mut MiniGpt,
    adapter: &mut AdapterState,
    cfg: &RunConfig,
    on_record: &mut dyn FnMut(&MetricsRecord),
) -> Result<Vec<MetricsRecord>> {
    let started = Instant::now();
    let mut opt = AdamW::new(cfg.optimizer.clone());
    let mut data_rng = stream(cfg.seed, Stream::Data);
    let mut drop_rng = stream(cfg.seed, Stream::Dropout);
    let eval_batch = cfg.task.eval_batch(cfg.eval.size);
    let trainable = model.trainable_param_count() + adapter.trainable_param_count() > 0;

    let mut records = Vec::new();
    let mut emit = |step: usize,
                    train_loss: Option<f64>,
                    model: &MiniGpt,
                    adapter: &AdapterState|
     -> Result<bool> {
        let (eval_loss, eval_accuracy) = evaluate(model, adapter.as_adapter(), &eval_batch)?;
        let lam = adapter.lambda_summary();
        let rec = MetricsRecord {
            step,
            train_loss,
            eval_loss,
            eval_accuracy,
            lambda_min: lam.map(|l| l.0),
            lambda_mean: lam.map(|l| l.1),
            lambda_max: lam.map(|l| l.2),
            wall_clock_secs: started.elapsed().as_secs_f64(),
        };
        on_record(&rec);
        records.push(rec);
        Ok(cfg.eval.target_loss.is_some_and(|t| eval_loss < t))
    };

    if emit(0, None, model, adapter)? {
        return Ok(records);
    }
    for step in 0..cfg.optimizer.steps {
        let batch = cfg
            .task
            .sample_batch(&mut data_rng, cfg.optimizer.batch_size);
        let mut tape = Tape::new();
        let rng = trainable.then_some(&mut drop_rng);
        let logits = model.forward(&mut tape, &batch.inputs, adapter.as_adapter(), rng)?;
        let loss = tape.cross_entropy(logits, &batch.targets)?;
        let train_loss = tape.value(loss).item();
        if !train_loss.is_finite() {
            return Err(Error::Numeric(format!(
                "training diverged at step {step}: loss {train_loss}"
            )));
        }
        if trainable {
            let grads = tape.backward(loss)?;
            model.zero_grads();
            adapter.zero_grads();
            tape.accumulate_grads(&grads, model)?;
            tape.accumulate_grads(&grads, adapter)?;
            opt.step(&mut [model, adapter], cfg.optimizer.lr_at(step))?;
        }
        let done = step + 1;
        if (done % cfg.eval.every == 0 || done == cfg.optimizer.steps)
            && emit(done, Some(train_loss), model, adapter)?
        {
            break;
        }
    }
    Ok(records)
}

#[derive(Debug)]
pub struct PretrainOutcome {
    pub model: MiniGpt,
    pub checkpoint: Checkpoint,
    pub metrics: Vec<MetricsRecord>,
}

/// Trains a fresh base model end to end and packages it as a base checkpoint.
pub fn pretrain(
    cfg: &RunConfig,
    on_record: &mut dyn FnMut(&MetricsRecord),
) -> Result<PretrainOutcome> {
    cfg.validate()?;
    if cfg.mode != TuningMode::FullFt {
        return Err(Error::Config(format!(
            "pretraining requires mode full_ft, got {:?}",
            cfg.mode
        )));
    }
    let mut model = MiniGpt::new(cfg.model.clone(), cfg.seed)?;
    let mut adapter = AdapterState::None;
    let metrics = train_loop(&mut model, &mut adapter, cfg, on_record)?;
    let mut checkpoint = checkpoint::save_base(&model);
    checkpoint.config["pretrain_task"] = serde_json::to_value(&cfg.task).expect("task serializes");
    Ok(PretrainOutcome {
        model,
        checkpoint,
        metrics,
    })
}

#[derive(Debug)]
pub struct FinetuneOutcome {
    pub model: MiniGpt,
    pub adapter: AdapterState,
    /// Adapter-only checkpoint (empty for frozen, the whole model for full_ft).
    pub checkpoint: Checkpoint,
    pub metrics: Vec<MetricsRecord>,
}

/// Loads a base model and prepares it for `cfg.mode` without training.
pub fn prepare_finetune(cfg: &RunConfig, base: &Checkpoint) -> Result<(MiniGpt, AdapterState)> {
    cfg.validate()?;
    let mut model = checkpoint::load_base(base)?;
    let bc = model.config();
    let geometry = |c: &ModelConfig| {
        (
            c.vocab_size,
            c.d_model,
            c.n_layers,
            c.n_heads,
            c.d_ff,
            c.max_seq_len,
        )
    };
    if geometry(bc) != geometry(&cfg.model) {
        return Err(Error::Config(format!(
            "run config model geometry {:?} does not match base checkpoint {:?}",
            geometry(&cfg.model),
            geometry(bc)
        )));
    }
    if let Some(t) = base.config.get("pretrain_task") {
        if serde_json::to_value(&cfg.task).ok().as_ref() == Some(t) {
            return Err(Error::Config(
                "fine-tuning task is identical to the pretraining task".into(),
            ));
        }
    }
    let adapter = match cfg.mode {
        TuningMode::FullFt => {
            model.unfreeze_base();
            AdapterState::None
        }
        TuningMode::Frozen => {
            model.freeze_base();
            AdapterState::None
        }
        TuningMode::Solo => {
            model.freeze_base();
            AdapterState::Solo(SoloAdapterSet::build(model.config(), &cfg.solo, cfg.seed)?)
        }
        TuningMode::Lora => {
            model.freeze_base();
            AdapterState::Lora(LoraAdapterSet::build(model.config(), &cfg.lora, cfg.seed)?)
        }
    };
    Ok((model, adapter))
}

pub fn finetune(
    cfg: &RunConfig,
    base: &Checkpoint,
    on_record: &mut dyn FnMut(&MetricsRecord),
) -> Result<FinetuneOutcome> {
    let (mut model, mut adapter) = prepare_finetune(cfg, base)?;
    let metrics = train_loop(&mut model, &mut adapter, cfg, on_record)?;
    let checkpoint = match (&adapter, cfg.mode) {
        (AdapterState::Solo(s), _) => checkpoint::save_solo(s),
        (AdapterState::Lora(l), _) => checkpoint::save_lora(l),
        (AdapterState::None, TuningMode::FullFt) => checkpoint::save_base(&model),
        (AdapterState::None, _) => checkpoint::empty_adapter(),
    };
    Ok(FinetuneOutcome {
        model,
        adapter,
        checkpoint,
        metrics,
    })
}

/// Eval-mode logits on `probe` for a base with an adapter loaded from `ckpt`.
pub fn probe_logits(model: &MiniGpt, ckpt: &Checkpoint, probe: &[Vec<usize>]) -> Result<Tensor> {
    let adapter = AdapterState::from_checkpoint(ckpt, model.config())?;
    model.logits(probe, adapter.as_adapter())
}

/// One adapter's result in one swap cycle.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SwapCheck {
    pub cycle: usize,
    pub adapter: usize,
    pub bit_exact: bool,
    pub max_abs_diff: f64,
}

/// Alternately loads each adapter onto one frozen base (decoding from its
/// serialized bytes every time) and compares probe logits with `reference`.
pub fn swap_test(
    model: &MiniGpt,
    adapters: &[Checkpoint],
    reference: &[Tensor],
    probe: &[Vec<usize>],
    cycles: usize,
) -> Result<Vec<SwapCheck>> {
    if adapters.len() != reference.len() {
        return Err(Error::Contract(
            "one reference tensor per adapter is required".into(),
        ));
    }
    let before = model.snapshot();
    let encoded: Vec<Vec<u8>> = adapters.iter().map(Checkpoint::to_bytes).collect();
    let mut checks = Vec::new();
    for cycle in 0..cycles {
        for (i, bytes) in encoded.iter().enumerate() {
            let ckpt = Checkpoint::from_bytes(bytes)?;
            let got = probe_logits(model, &ckpt, probe)?;
            checks.push(SwapCheck {
                cycle,
                adapter: i,
                bit_exact: got.bit_eq(&reference[i]),
                max_abs_diff: got.max_abs_diff(&reference[i]),
            });
        }
    }
    if model.snapshot() != before {
        return Err(Error::Contract(
            "base model changed during the swap test".into(),
        ));
    }
    Ok(checks)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::task::TaskKind;

    pub(crate) fn tiny_run(mode: TuningMode, kind: TaskKind) -> RunConfig {
        RunConfig {
            model: ModelConfig {
                vocab_size: 8,
                d_model: 8,
                n_layers: 4,
                n_heads: 2,
                d_ff: 16,
                max_seq_len: 16,
                dropout_rate: 0.0,
            },
            mode,
            solo: SoloConfig {
                rank: 3,
                sparsity: 0.3,
                ..Default::default()
            },
            lora: LoraConfig {
                rank: 2,
                alpha: 4.0,
            },
            optimizer: OptimizerConfig {
                steps: 6,
                ..Default::default()
            },
            task: TaskSpec::new(kind, 5, 3),
            eval: EvalConfig {
                every: 2,
                size: 8,
                target_loss: None,
            },
            seed: 11,
        }
    }

    #[test]
    fn toml_roundtrip_and_defaults() {
        let cfg = tiny_run(TuningMode::Solo, TaskKind::Reverse);
        let back = RunConfig::from_toml(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);

        let minimal = r#"
            mode = "solo"
            [model]
            vocab_size = 16
            d_model = 16
            n_layers = 4
            n_heads = 2
            d_ff = 32
            max_seq_len = 32
            [task]
            kind = "reverse"
        "#;
        let c = RunConfig::from_toml(minimal).unwrap();
        assert_eq!(c.optimizer.batch_size, 4);
        assert_eq!(c.optimizer.weight_decay, 0.1);
        assert_eq!(c.solo.lambda_init, 0.001);
    }

    #[test]
    fn unknown_field_names_the_field() {
        let err = RunConfig::from_toml("mode = \"solo\"\nbogus = 1\n").unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn pretrain_rejects_adapter_modes() {
        let cfg = tiny_run(TuningMode::Solo, TaskKind::Copy);
        assert!(matches!(pretrain(&cfg, &mut |_| {}), Err(Error::Config(_))));
    }

    #[test]
    fn frozen_eval_loss_is_constant() {
        let pre = pretrain(&tiny_run(TuningMode::FullFt, TaskKind::Copy), &mut |_| {}).unwrap();
        let out = finetune(
            &tiny_run(TuningMode::Frozen, TaskKind::Reverse),
            &pre.checkpoint,
            &mut |_| {},
        )
        .unwrap();
        let first = out.metrics[0].eval_loss;
        assert!(out
            .metrics
            .iter()
            .all(|r| r.eval_loss.to_bits() == first.to_bits()));
        assert_eq!(out.checkpoint.kind, checkpoint::CheckpointKind::Empty);
    }

    #[test]
    fn same_task_finetune_is_rejected() {
        let pre = pretrain(&tiny_run(TuningMode::FullFt, TaskKind::Copy), &mut |_| {}).unwrap();
        let cfg = tiny_run(TuningMode::Solo, TaskKind::Copy);
        assert!(matches!(
            finetune(&cfg, &pre.checkpoint, &mut |_| {}),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn geometry_mismatch_is_config_error() {
        let pre = pretrain(&tiny_run(TuningMode::FullFt, TaskKind::Copy), &mut |_| {}).unwrap();
        let mut cfg = tiny_run(TuningMode::Solo, TaskKind::Reverse);
        cfg.model.d_ff = 24;
        assert!(matches!(
            finetune(&cfg, &pre.checkpoint, &mut |_| {}),
            Err(Error::Config(_))
        ));
    }
}
