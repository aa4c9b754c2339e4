//! Grid runner over adapter hyperparameters.
//!
//! Cells are the cartesian product of the axes. Cells that differ only in gate
//! variant share a seed, so their codecs and masks are identical. A failing cell
//! is recorded and the grid moves on.

use std::fmt::Write as _;
use std::path::PathBuf;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::gpt::Adapter;
use crate::ledger::{budget_formula, enumerate_trainables};
use crate::rng::derive_seed;
use crate::solo::GateVariant;
use crate::train::{self, AdapterState, RunConfig, TuningMode};

fn default_gates() -> Vec<GateVariant> {
    vec![GateVariant::Homotopy]
}
fn default_codec() -> Vec<bool> {
    vec![true]
}
fn default_probe() -> usize {
    16
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationGrid {
    pub ranks: Vec<usize>,
    pub sparsities: Vec<f64>,
    #[serde(default)]
    pub spans: Vec<usize>,
    #[serde(default = "default_gates")]
    pub gate_variants: Vec<GateVariant>,
    #[serde(default = "default_codec")]
    pub codec_trainable: Vec<bool>,
    /// Empty means the base run's learning rate only.
    #[serde(default)]
    pub learning_rates: Vec<f64>,
    /// Sequences used for the init-perturbation column.
    #[serde(default = "default_probe")]
    pub probe_size: usize,
    /// Solo fine-tuning run that every cell starts from.
    pub run: RunConfig,
    /// Pretraining run used when no base checkpoint is supplied.
    #[serde(default)]
    pub pretrain: Option<RunConfig>,
    #[serde(default)]
    pub base_checkpoint: Option<PathBuf>,
    #[serde(default)]
    pub out: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub index: usize,
    pub rank: usize,
    pub sparsity: f64,
    pub span: usize,
    pub gate: GateVariant,
    pub codec_trainable: bool,
    pub learning_rate: f64,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", content = "reason", rename_all = "snake_case")]
pub enum CellStatus {
    Ok,
    Failed(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    #[serde(flatten)]
    pub cell: Cell,
    /// `(input block, placement block)` per connection.
    pub wiring: Vec<(usize, usize)>,
    pub formula_params: Option<usize>,
    pub enumerated_params: Option<usize>,
    pub init_perturbation: Option<f64>,
    pub final_eval_loss: Option<f64>,
    pub token_accuracy: Option<f64>,
    pub lambda_min: Option<f64>,
    pub lambda_mean: Option<f64>,
    pub lambda_max: Option<f64>,
    #[serde(flatten)]
    pub status: CellStatus,
}

impl AblationGrid {
    pub fn from_toml(text: &str) -> Result<Self> {
        let g: AblationGrid = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        if self.ranks.is_empty() || self.sparsities.is_empty() {
            return Err(Error::Config(
                "grid needs at least one rank and one sparsity".into(),
            ));
        }
        if self.gate_variants.is_empty() || self.codec_trainable.is_empty() {
            return Err(Error::Config(
                "gate_variants and codec_trainable must not be empty".into(),
            ));
        }
        if self.run.mode != TuningMode::Solo {
            return Err(Error::Config("grid run.mode must be solo".into()));
        }
        self.run.validate()
    }

    fn spans(&self) -> Vec<usize> {
        if self.spans.is_empty() {
            vec![self.run.solo.span]
        } else {
            self.spans.clone()
        }
    }

    fn learning_rates(&self) -> Vec<f64> {
        if self.learning_rates.is_empty() {
            vec![self.run.optimizer.learning_rate]
        } else {
            self.learning_rates.clone()
        }
    }

    /// Every cell, in grid order.
    pub fn cells(&self) -> Vec<Cell> {
        let mut cells = Vec::new();
        let mut seed_slot = 0u64;
        for &learning_rate in &self.learning_rates() {
            for &span in &self.spans() {
                for &codec_trainable in &self.codec_trainable {
                    for &rank in &self.ranks {
                        for &sparsity in &self.sparsities {
                            let seed = derive_seed(self.run.seed, seed_slot);
                            seed_slot += 1;
                            for &gate in &self.gate_variants {
                                cells.push(Cell {
                                    index: cells.len(),
                                    rank,
                                    sparsity,
                                    span,
                                    gate,
                                    codec_trainable,
                                    learning_rate,
                                    seed,
                                });
                            }
                        }
                    }
                }
            }
        }
        cells
    }

    fn cell_config(&self, cell: &Cell) -> RunConfig {
        let mut cfg = self.run.clone();
        cfg.solo.rank = cell.rank;
        cfg.solo.sparsity = cell.sparsity;
        cfg.solo.span = cell.span;
        cfg.solo.gate_variant = cell.gate;
        cfg.solo.codec_trainable = cell.codec_trainable;
        cfg.optimizer.learning_rate = cell.learning_rate;
        cfg.seed = cell.seed;
        cfg
    }
}

fn run_cell(
    grid: &AblationGrid,
    base: &Checkpoint,
    cell: &Cell,
    row: &mut AblationRow,
) -> Result<()> {
    let cfg = grid.cell_config(cell);
    let (model, adapter) = train::prepare_finetune(&cfg, base)?;
    let AdapterState::Solo(set) = &adapter else {
        unreachable!("grid runs are solo runs")
    };
    row.wiring = set
        .connections
        .iter()
        .map(|c| (c.input_index(), c.placement_index()))
        .collect();
    row.formula_params = Some(budget_formula(
        set.d_model(),
        cell.rank,
        cell.sparsity,
        2,
        set.connections.len(),
    )?);
    row.enumerated_params = Some(enumerate_trainables(&model, Adapter::Solo(set)).trainable_total);
    let probe = train::probe_batch(&cfg.task, grid.probe_size, cfg.seed);
    row.init_perturbation = Some(train::logit_perturbation(
        &model,
        adapter.as_adapter(),
        &probe,
    )?);

    let (mut model, mut adapter) = (model, adapter);
    let metrics = train::train_loop(&mut model, &mut adapter, &cfg, &mut |_| {})?;
    let last = metrics
        .last()
        .expect("train_loop emits at least one record");
    row.final_eval_loss = Some(last.eval_loss);
    row.token_accuracy = Some(last.eval_accuracy);
    row.lambda_min = last.lambda_min;
    row.lambda_mean = last.lambda_mean;
    row.lambda_max = last.lambda_max;
    Ok(())
}

/// Runs every cell against `base` and returns rows sorted by
/// (gate, codec trainability, learning rate, span, rank, sparsity).
pub fn run_grid(grid: &AblationGrid, base: &Checkpoint) -> Result<Vec<AblationRow>> {
    grid.validate()?;
    let mut rows: Vec<AblationRow> = grid
        .cells()
        .into_par_iter()
        .map(|cell| {
            let mut row = AblationRow {
                cell: cell.clone(),
                wiring: Vec::new(),
                formula_params: None,
                enumerated_params: None,
                init_perturbation: None,
                final_eval_loss: None,
                token_accuracy: None,
                lambda_min: None,
                lambda_mean: None,
                lambda_max: None,
                status: CellStatus::Ok,
            };
            if let Err(e) = run_cell(grid, base, &cell, &mut row) {
                row.status = CellStatus::Failed(e.to_string());
            }
            row
        })
        .collect();
    rows.sort_by(|a, b| {
        let key = |r: &AblationRow| {
            (
                r.cell.gate,
                !r.cell.codec_trainable,
                r.cell.span,
                r.cell.rank,
            )
        };
        key(a)
            .cmp(&key(b))
            .then(a.cell.learning_rate.total_cmp(&b.cell.learning_rate))
            .then(a.cell.sparsity.total_cmp(&b.cell.sparsity))
    });
    Ok(rows)
}

/// Uses `grid.base_checkpoint` if set, otherwise pretrains from `grid.pretrain`.
pub fn resolve_base(grid: &AblationGrid) -> Result<Checkpoint> {
    match (&grid.base_checkpoint, &grid.pretrain) {
        (Some(path), _) => Checkpoint::load(path),
        (None, Some(pre)) => Ok(train::pretrain(pre, &mut |_| {})?.checkpoint),
        (None, None) => Err(Error::Config(
            "grid needs either base_checkpoint or a [pretrain] run".into(),
        )),
    }
}

pub fn rows_to_jsonl(rows: &[AblationRow]) -> String {
    rows.iter()
        .map(|r| serde_json::to_string(r).expect("row serializes") + "\n")
        .collect()
}

pub fn render_table(rows: &[AblationRow]) -> String {
    let opt = |v: Option<f64>, p: usize| v.map_or("-".to_string(), |v| format!("{v:.p$}"));
    let optu = |v: Option<usize>| v.map_or("-".to_string(), |v| v.to_string());
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:>4} {:>12} {:>5} {:>5} {:>4} {:>5} {:>8} {:>9} {:>9} {:>10} {:>9} {:>6} {:>7}  status",
        "cell",
        "gate",
        "rank",
        "s",
        "span",
        "codec",
        "lr",
        "formula",
        "enum",
        "init_pert",
        "eval",
        "acc",
        "λ_mean"
    );
    for r in rows {
        let c = &r.cell;
        let status = match &r.status {
            CellStatus::Ok => "ok".to_string(),
            CellStatus::Failed(why) => format!("failed: {why}"),
        };
        let _ = writeln!(
            out,
            "{:>4} {:>12} {:>5} {:>5.2} {:>4} {:>5} {:>8.1e} {:>9} {:>9} {:>10} {:>9} {:>6} {:>7}  {}",
            c.index,
            c.gate.to_string(),
            c.rank,
            c.sparsity,
            c.span,
            if c.codec_trainable { "train" } else { "fixed" },
            c.learning_rate,
            optu(r.formula_params),
            optu(r.enumerated_params),
            opt(r.init_perturbation, 5),
            opt(r.final_eval_loss, 4),
            opt(r.token_accuracy, 3),
            opt(r.lambda_mean, 4),
            status
        );
    }
    out
}
