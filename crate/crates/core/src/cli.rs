//! Command-line front end.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 numeric failure,
//! 3 I/O or corrupt file.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use crate::ablate::{self, AblationGrid, CellStatus};
use crate::checkpoint::{self, Checkpoint};
use crate::error::{CheckpointError, Error, Result};
use crate::gpt::{Adapter, MiniGpt};
use crate::gradcheck::{self, SUITE_TOLERANCE};
use crate::ledger::{enumerate_trainables, ParamBudget};
use crate::lora::LoraAdapterSet;
use crate::solo::{GateVariant, SoloAdapterSet};
use crate::task::{TaskKind, TaskSpec};
use crate::train::{self, AdapterState, RunConfig, TuningMode};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_NUMERIC: i32 = 2;
pub const EXIT_IO: i32 = 3;

#[derive(Debug, Parser)]
#[command(
    name = "solo",
    version,
    about = "Train and inspect sparse shared low-rank adapters"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

/// Values that replace fields of the run config file.
#[derive(Debug, Clone, Default, Args)]
pub struct Overrides {
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub rank: Option<usize>,
    #[arg(long)]
    pub sparsity: Option<f64>,
    #[arg(long)]
    pub span: Option<usize>,
    #[arg(long)]
    pub gate: Option<GateVariant>,
    #[arg(long)]
    pub mode: Option<TuningMode>,
}

impl Overrides {
    pub fn apply(&self, cfg: &mut RunConfig) {
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = self.rank {
            cfg.solo.rank = v;
        }
        if let Some(v) = self.sparsity {
            cfg.solo.sparsity = v;
        }
        if let Some(v) = self.span {
            cfg.solo.span = v;
        }
        if let Some(v) = self.gate {
            cfg.solo.gate_variant = v;
        }
        if let Some(v) = self.mode {
            cfg.mode = v;
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a base model from scratch (full fine-tuning mode).
    Pretrain {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = "runs/pretrain")]
        out: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Adapt a pretrained base in the configured mode.
    Finetune {
        #[arg(long)]
        config: PathBuf,
        /// Base model checkpoint.
        #[arg(long)]
        base: PathBuf,
        #[arg(long, default_value = "runs/finetune")]
        out: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Report eval loss and token accuracy of a base with an optional adapter.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        base: PathBuf,
        #[arg(long)]
        adapter: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the finite-difference gradient suite.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Negate every analytic gradient; the suite must then fail.
        #[arg(long)]
        sign_flip: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Closed-form and enumerated trainable parameter counts, with LoRA.
    CountParams {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Run a rank/sparsity/span/gate grid.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Fine-tune adapters on two tasks and swap them on one frozen base.
    SwapTest {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        base: PathBuf,
        #[arg(long, default_value = "runs/swap")]
        out: PathBuf,
        #[arg(long, default_value_t = 3)]
        cycles: usize,
        #[arg(long)]
        seed: Option<u64>,
    },
}

/// Maps an error to its process exit code.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Numeric(_) => EXIT_NUMERIC,
        Error::Io { .. } => EXIT_IO,
        Error::Checkpoint(CheckpointError::Geometry(_) | CheckpointError::Kind { .. }) => {
            EXIT_USAGE
        }
        Error::Checkpoint(_) => EXIT_IO,
        Error::Config(_) | Error::Input(_) | Error::Contract(_) | Error::Dimension { .. } => {
            EXIT_USAGE
        }
    }
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn load_run_config(path: &Path, overrides: &Overrides) -> Result<RunConfig> {
    let text = read_text(path)?;
    let mut cfg: RunConfig =
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    overrides.apply(&mut cfg);
    cfg.validate()?;
    Ok(cfg)
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn print_record(r: &train::MetricsRecord) {
    let lam = r
        .lambda_mean
        .map_or(String::new(), |l| format!(" λ̄ {l:.4}"));
    let train = r.train_loss.map_or("-".into(), |l| format!("{l:.4}"));
    println!(
        "step {:>6}  train {train:>8}  eval {:.4}  acc {:.3}{lam}",
        r.step, r.eval_loss, r.eval_accuracy
    );
}

fn dispatch(cmd: Command) -> Result<i32> {
    match cmd {
        Command::Pretrain {
            config,
            out,
            overrides,
        } => {
            let cfg = load_run_config(&config, &overrides)?;
            let result = train::pretrain(&cfg, &mut print_record)?;
            ensure_dir(&out)?;
            result.checkpoint.save(out.join("base.ckpt"))?;
            train::write_metrics(out.join("metrics.jsonl"), &result.metrics)?;
            write_text(&out.join("config.toml"), &cfg.to_toml())?;
            println!(
                "metrics checksum {}",
                train::metrics_checksum(&result.metrics)
            );
            println!("wrote {}", out.join("base.ckpt").display());
            Ok(EXIT_OK)
        }
        Command::Finetune {
            config,
            base,
            out,
            overrides,
        } => {
            let cfg = load_run_config(&config, &overrides)?;
            let base = Checkpoint::load(&base)?;
            let result = train::finetune(&cfg, &base, &mut print_record)?;
            ensure_dir(&out)?;
            let name = match cfg.mode {
                TuningMode::FullFt => "model.ckpt",
                _ => "adapter.ckpt",
            };
            result.checkpoint.save(out.join(name))?;
            train::write_metrics(out.join("metrics.jsonl"), &result.metrics)?;
            write_text(&out.join("config.toml"), &cfg.to_toml())?;
            println!(
                "metrics checksum {}",
                train::metrics_checksum(&result.metrics)
            );
            println!("wrote {}", out.join(name).display());
            Ok(EXIT_OK)
        }
        Command::Eval {
            config,
            base,
            adapter,
            out,
        } => {
            let cfg = load_run_config(&config, &Overrides::default())?;
            let base = Checkpoint::load(&base)?;
            let model = checkpoint::load_base(&base)?;
            let state = match &adapter {
                Some(p) => AdapterState::from_checkpoint(&Checkpoint::load(p)?, model.config())?,
                None => AdapterState::None,
            };
            cfg.task
                .validate(model.config().vocab_size, model.config().max_seq_len)?;
            let batch = cfg.task.eval_batch(cfg.eval.size);
            let (loss, acc) = train::evaluate(&model, state.as_adapter(), &batch)?;
            println!("eval loss {loss:.6}  token accuracy {acc:.4}");
            if let Some(out) = out {
                let body = json!({ "eval_loss": loss, "token_accuracy": acc });
                write_text(&out, &format!("{body}\n"))?;
            }
            Ok(EXIT_OK)
        }
        Command::Gradcheck {
            seed,
            sign_flip,
            out,
        } => {
            let entries = gradcheck::run_suite(seed, sign_flip)?;
            println!(
                "{:<22} {:>12} {:>7}  worst coordinate",
                "check", "max rel err", "coords"
            );
            for e in &entries {
                let worst = e
                    .worst
                    .as_ref()
                    .map_or("-".into(), |(n, i)| format!("{n}[{i}]"));
                println!(
                    "{:<22} {:>12.3e} {:>7}  {worst}  {}",
                    e.name,
                    e.max_rel_error,
                    e.coordinates,
                    if e.passed { "ok" } else { "FAIL" }
                );
            }
            if let Some(out) = out {
                write_text(
                    &out,
                    &serde_json::to_string_pretty(&entries).expect("serializes"),
                )?;
            }
            let failed: Vec<_> = entries.iter().filter(|e| !e.passed).collect();
            if failed.is_empty() {
                println!("all {} checks below {SUITE_TOLERANCE:e}", entries.len());
                Ok(EXIT_OK)
            } else {
                for e in &failed {
                    let worst = e
                        .worst
                        .as_ref()
                        .map_or("-".into(), |(n, i)| format!("{n}[{i}]"));
                    eprintln!(
                        "tolerance breach: {} at {worst} ({:.3e})",
                        e.name, e.max_rel_error
                    );
                }
                Ok(EXIT_NUMERIC)
            }
        }
        Command::CountParams {
            config,
            out,
            overrides,
        } => {
            let mut cfg = match &config {
                Some(p) => load_run_config(p, &Overrides::default())?,
                None => desk_count_config(),
            };
            overrides.apply(&mut cfg);
            cfg.validate()?;
            let report = count_params(&cfg)?;
            print!("{}", report.table);
            if let Some(out) = out {
                write_text(
                    &out,
                    &serde_json::to_string_pretty(&report.json).expect("serializes"),
                )?;
            }
            Ok(EXIT_OK)
        }
        Command::Ablate { config, out, seed } => {
            let text = read_text(&config)?;
            let mut grid: AblationGrid = toml::from_str(&text)
                .map_err(|e| Error::Config(format!("{}: {e}", config.display())))?;
            if let Some(s) = seed {
                grid.run.seed = s;
            }
            if out.is_some() {
                grid.out = out;
            }
            grid.validate()?;
            let base = ablate::resolve_base(&grid)?;
            let rows = ablate::run_grid(&grid, &base)?;
            let table = ablate::render_table(&rows);
            print!("{table}");
            if let Some(dir) = &grid.out {
                ensure_dir(dir)?;
                write_text(&dir.join("rows.jsonl"), &ablate::rows_to_jsonl(&rows))?;
                write_text(&dir.join("table.txt"), &table)?;
            }
            let failed = rows
                .iter()
                .filter(|r| matches!(r.status, CellStatus::Failed(_)))
                .count();
            println!("{} cells, {failed} failed", rows.len());
            Ok(EXIT_OK)
        }
        Command::SwapTest {
            config,
            base,
            out,
            cycles,
            seed,
        } => {
            let overrides = Overrides {
                seed,
                ..Default::default()
            };
            let cfg = load_run_config(&config, &overrides)?;
            let base = Checkpoint::load(&base)?;
            swap_test_cmd(&cfg, &base, &out, cycles)
        }
    }
}

/// Desk geometry used by `count-params` when no config is given: r = 128,
/// s = 0.6 at width 768, scaled down to d = 64.
pub fn desk_count_config() -> RunConfig {
    use crate::gpt::ModelConfig;
    let d = 64;
    RunConfig {
        model: ModelConfig {
            vocab_size: 16,
            d_model: d,
            n_layers: 12,
            n_heads: 4,
            d_ff: 128,
            max_seq_len: 16,
            dropout_rate: 0.0,
        },
        mode: TuningMode::Solo,
        solo: crate::solo::SoloConfig {
            rank: (128 * d).div_ceil(768),
            sparsity: 0.6,
            ..Default::default()
        },
        lora: Default::default(),
        optimizer: Default::default(),
        task: TaskSpec::new(TaskKind::Reverse, 14, 6),
        eval: Default::default(),
        seed: 0,
    }
}

pub struct CountReport {
    pub table: String,
    pub json: serde_json::Value,
    pub solo_trainable: usize,
    pub lora_trainable: usize,
}

pub fn count_params(cfg: &RunConfig) -> Result<CountReport> {
    use std::fmt::Write as _;
    let mut model = MiniGpt::new(cfg.model.clone(), cfg.seed)?;
    model.freeze_base();
    let solo = SoloAdapterSet::build(&cfg.model, &cfg.solo, cfg.seed)?;
    let budget = ParamBudget::for_solo(&model, &solo)?;
    let lora = LoraAdapterSet::build(&cfg.model, &cfg.lora, cfg.seed)?;
    let lora_e = enumerate_trainables(&model, Adapter::Lora(&lora));
    let solo_e = enumerate_trainables(&model, Adapter::Solo(&solo));

    let mut t = String::new();
    let m = &cfg.model;
    let _ = writeln!(
        t,
        "model: vocab {} d {} layers {} heads {} d_ff {}  base parameters {}",
        m.vocab_size, m.d_model, m.n_layers, m.n_heads, m.d_ff, solo_e.base_total
    );
    let _ = writeln!(
        t,
        "solo: r {} s {} span {} gate {}  connections {}",
        cfg.solo.rank, cfg.solo.sparsity, cfg.solo.span, cfg.solo.gate_variant, budget.t
    );
    let _ = writeln!(t, "  {:<28} {:>10}", "codec (unmasked)", budget.codec);
    let _ = writeln!(
        t,
        "  {:<28} {:>10}",
        "encoding vectors", budget.encoding_vectors
    );
    let _ = writeln!(t, "  {:<28} {:>10}", "gate vectors", budget.gate_vectors);
    let _ = writeln!(t, "  {:<28} {:>10}", "lambdas", budget.lambdas);
    let _ = writeln!(
        t,
        "  {:<28} {:>10}",
        "enumerated total", budget.enumerated_total
    );
    let _ = writeln!(t, "  {:<28} {:>10}", "closed form", budget.formula_total);
    let _ = writeln!(
        t,
        "  {:<28} {:>10}",
        "closed form + lambdas",
        budget.formula_total + budget.lambda_correction
    );
    let _ = writeln!(
        t,
        "  {:<28} {:>9.4}%",
        "trainable fraction",
        100.0 * solo_e.trainable_fraction()
    );
    let _ = writeln!(
        t,
        "lora: r {} alpha {} on q, v",
        cfg.lora.rank, cfg.lora.alpha
    );
    let _ = writeln!(
        t,
        "  {:<28} {:>10}",
        "enumerated total", lora_e.trainable_total
    );
    let _ = writeln!(
        t,
        "  {:<28} {:>9.4}%",
        "trainable fraction",
        100.0 * lora_e.trainable_fraction()
    );
    let ordering = if budget.enumerated_total < lora_e.trainable_total {
        "solo < lora"
    } else {
        "solo >= lora"
    };
    let _ = writeln!(
        t,
        "ordering: {ordering} ({} vs {}, ratio {:.3})",
        budget.enumerated_total,
        lora_e.trainable_total,
        budget.enumerated_total as f64 / lora_e.trainable_total as f64
    );
    let json = json!({
        "model": cfg.model,
        "solo": { "config": cfg.solo, "budget": budget, "reconciles": budget.reconciles(),
                  "trainable_fraction": solo_e.trainable_fraction() },
        "lora": { "config": cfg.lora, "enumerated_total": lora_e.trainable_total,
                  "trainable_fraction": lora_e.trainable_fraction() },
    });
    Ok(CountReport {
        table: t,
        json,
        solo_trainable: budget.enumerated_total,
        lora_trainable: lora_e.trainable_total,
    })
}

/// Second task for the swap test: the first candidate that differs from both
/// the configured fine-tuning task and the pretraining task.
fn alternate_task(cfg: &RunConfig, base: &Checkpoint) -> Result<TaskSpec> {
    let pre_kind = base
        .config
        .get("pretrain_task")
        .and_then(|t| serde_json::from_value::<TaskSpec>(t.clone()).ok())
        .map(|t| t.kind);
    [TaskKind::ShiftCipher, TaskKind::Reverse, TaskKind::Copy]
        .into_iter()
        .find(|k| *k != cfg.task.kind && Some(*k) != pre_kind)
        .map(|kind| TaskSpec {
            kind,
            ..cfg.task.clone()
        })
        .ok_or_else(|| Error::Config("no second task available for the swap test".into()))
}

fn swap_test_cmd(cfg: &RunConfig, base: &Checkpoint, out: &Path, cycles: usize) -> Result<i32> {
    if matches!(cfg.mode, TuningMode::FullFt | TuningMode::Frozen) {
        return Err(Error::Config(
            "swap-test needs an adapter mode (solo or lora)".into(),
        ));
    }
    let second = RunConfig {
        task: alternate_task(cfg, base)?,
        seed: crate::rng::derive_seed(cfg.seed, 1),
        ..cfg.clone()
    };
    ensure_dir(out)?;
    let probe = train::probe_batch(&cfg.task, 8, cfg.seed);
    let mut adapters = Vec::new();
    let mut reference = Vec::new();
    let mut model = None;
    for (i, run) in [cfg, &second].into_iter().enumerate() {
        println!("fine-tuning adapter {i} on {:?}", run.task.kind);
        let r = train::finetune(run, base, &mut |_| {})?;
        let last = r.metrics.last().expect("at least one record");
        println!(
            "  eval loss {:.4}  acc {:.3}",
            last.eval_loss, last.eval_accuracy
        );
        let path = out.join(format!("adapter{i}.ckpt"));
        r.checkpoint.save(&path)?;
        reference.push(r.model.logits(&probe, r.adapter.as_adapter())?);
        adapters.push(Checkpoint::load(&path)?);
        model.get_or_insert(r.model);
    }
    let model = model.expect("two runs");
    let checks = train::swap_test(&model, &adapters, &reference, &probe, cycles)?;
    for c in &checks {
        println!(
            "cycle {} adapter {}: {} (max |Δ| {:e})",
            c.cycle,
            c.adapter,
            if c.bit_exact { "bit-exact" } else { "MISMATCH" },
            c.max_abs_diff
        );
    }
    write_text(
        &out.join("swap.json"),
        &serde_json::to_string_pretty(&checks).expect("serializes"),
    )?;
    let distinct = !reference[0].bit_eq(&reference[1]);
    println!("adapters produce distinct logits: {distinct}");
    Ok(if checks.iter().all(|c| c.bit_exact) && distinct {
        EXIT_OK
    } else {
        EXIT_NUMERIC
    })
}
