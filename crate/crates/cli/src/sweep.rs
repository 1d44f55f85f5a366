//! Ablation sweeps over prompt size or model size.
//!
//! Each cell runs `adapt` and `eval` for every configured seed inside
//! `cells/<id>/` and appends one line to `sweep.csv`. The CSV is the record
//! of completed cells: re-running a sweep skips them.

use std::fs::{self, OpenOptions};
use std::io::Write as _;
use std::path::{Path, PathBuf};

use dynprompt_core::adapters::StrategyKind;
use dynprompt_core::Error;

use crate::config::{io_error, RESOLVED_CONFIG_FILE};
use crate::workflow::{adapt, eval, pretrain, BACKBONE_FILE};
use crate::{CliResult, RunConfig};

pub const SWEEP_CSV: &str = "sweep.csv";
pub const SWEEP_HEADER: &str = "cell,axis,value,strategy,prompt_size,model_size,seeds,\
trainable_params,valid_loss,bleu_avg,nist,meteor_lite,rouge_l,avg_length";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Axis {
    PromptSize,
    ModelSize,
}

struct Cell {
    id: String,
    value: String,
    config: RunConfig,
    /// Model-size cells pre-train their own backbone into this directory.
    pretrain_into: Option<PathBuf>,
}

#[derive(Debug, Default)]
pub struct SweepOutput {
    pub csv: PathBuf,
    pub ran: Vec<String>,
    pub skipped: Vec<String>,
}

fn axis(cfg: &RunConfig) -> Axis {
    if cfg.get("sweep.axis") == "model_size" {
        Axis::ModelSize
    } else {
        Axis::PromptSize
    }
}

fn cells(cfg: &RunConfig, out: &Path) -> CliResult<Vec<Cell>> {
    let cell_out = |id: &str| out.join("cells").join(id);
    let mut cells = Vec::new();
    match axis(cfg) {
        Axis::PromptSize => {
            if cfg.strategy()? == StrategyKind::FineTune {
                return Err(Error::Config(
                    "the prompt-size axis needs a prompt strategy, not finetune".into(),
                )
                .into());
            }
            cfg.path("run.backbone", "--backbone")?;
            for k in cfg.list::<usize>("sweep.prompt_sizes")? {
                let id = format!("prompt_size-{k}");
                let config = cfg
                    .with("adapter.prompt_size", k)?
                    .with("run.out", cell_out(&id).display())?;
                cells.push(Cell {
                    id,
                    value: k.to_string(),
                    config,
                    pretrain_into: None,
                });
            }
        }
        Axis::ModelSize => {
            cfg.path("corpus.base", "--base")?;
            for size in cfg.list::<String>("sweep.model_sizes")? {
                let backbone_dir = out.join("backbones").join(&size);
                for kind in cfg.list::<StrategyKind>("sweep.strategies")? {
                    let id = format!("{size}-{kind}");
                    let config = cfg
                        .with("model.size", &size)?
                        .with("adapter.strategy", kind)?
                        .with("run.backbone", backbone_dir.join(BACKBONE_FILE).display())?
                        .with("run.out", cell_out(&id).display())?;
                    cells.push(Cell {
                        id,
                        value: size.clone(),
                        config,
                        pretrain_into: Some(backbone_dir.clone()),
                    });
                }
            }
        }
    }
    Ok(cells)
}

/// Cell ids already recorded in `csv`.
fn completed(csv: &Path) -> CliResult<Vec<String>> {
    if !csv.exists() {
        return Ok(Vec::new());
    }
    let text = fs::read_to_string(csv).map_err(|e| io_error(csv, e))?;
    let mut lines = text.lines();
    if lines.next() != Some(SWEEP_HEADER) {
        return Err(Error::Config(format!(
            "{} exists but is not a sweep table; choose another --out",
            csv.display()
        ))
        .into());
    }
    Ok(lines
        .filter_map(|l| l.split(',').next())
        .filter(|id| !id.is_empty())
        .map(str::to_string)
        .collect())
}

/// Pre-trains a model-size cell's backbone (first seed) unless an earlier
/// cell already did.
fn ensure_backbone(cell: &Cell) -> CliResult<()> {
    let Some(dir) = &cell.pretrain_into else {
        return Ok(());
    };
    if dir.join(BACKBONE_FILE).is_file() {
        return Ok(());
    }
    let seed = cell.config.seeds()?[0];
    let cfg = cell
        .config
        .with("run.out", dir.display())?
        .with("run.seeds", seed)?;
    pretrain(&cfg)?;
    Ok(())
}

fn run_cell(cell: &Cell, axis_name: &str) -> CliResult<String> {
    ensure_backbone(cell)?;
    let runs = adapt(&cell.config)?;
    let out = cell.config.out_dir();
    let evaluated = eval(&cell.config.with("run.adapter", out.display())?)?;
    let valid = runs.iter().map(|r| r.best_valid).sum::<f64>() / runs.len() as f64;
    let s = &evaluated.mean;
    let c = &cell.config;
    let kind = c.strategy()?;
    Ok(format!(
        "{},{},{},{},{},{},{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.4}",
        cell.id,
        axis_name,
        cell.value,
        kind,
        if kind == StrategyKind::FineTune { 0 } else { c.parse::<usize>("adapter.prompt_size")? },
        c.get("model.size"),
        c.get("run.seeds").replace(',', ";"),
        runs[0].trainable_params,
        valid,
        s.bleu_avg,
        s.nist,
        s.meteor_lite,
        s.rouge_l,
        s.avg_length
    ))
}

/// Runs every cell of the configured axis that `sweep.csv` does not list
/// yet.
pub fn sweep(cfg: &RunConfig) -> CliResult<SweepOutput> {
    let out = cfg.out_dir();
    let resolved = out.join(RESOLVED_CONFIG_FILE);
    if resolved.is_file() && RunConfig::load(&resolved)? != *cfg {
        return Err(Error::Config(format!(
            "{} holds a sweep with a different configuration; choose another --out",
            out.display()
        ))
        .into());
    }
    let cells = cells(cfg, &out)?;
    cfg.save(&out)?;
    let csv = out.join(SWEEP_CSV);
    let done = completed(&csv)?;
    if !csv.exists() {
        fs::write(&csv, format!("{SWEEP_HEADER}\n")).map_err(|e| io_error(&csv, e))?;
    }
    let axis_name = cfg.get("sweep.axis").to_string();
    let mut result = SweepOutput {
        csv: csv.clone(),
        ..Default::default()
    };
    for cell in &cells {
        if done.contains(&cell.id) {
            eprintln!("[sweep] cell {} already complete; skipping", cell.id);
            result.skipped.push(cell.id.clone());
            continue;
        }
        eprintln!("[sweep] running cell {}", cell.id);
        let row = run_cell(cell, &axis_name)?;
        let mut f = OpenOptions::new()
            .append(true)
            .open(&csv)
            .map_err(|e| io_error(&csv, e))?;
        writeln!(f, "{row}").map_err(|e| io_error(&csv, e))?;
        result.ran.push(cell.id.clone());
    }
    Ok(result)
}
