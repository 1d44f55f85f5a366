//! `pretrain`, `adapt` and `eval`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use dynprompt_core::adapters::{parameter_census, Adapter, AdapterConfig, LoadedAdapter, StrategyKind};
use dynprompt_core::corpus::{
    build_vocab, load_corpus, split_train_valid, window_samples, Dialogue, DialogueSample,
    LoadMode, TextSample, Vocabulary, WindowConfig,
};
use dynprompt_core::evalgen::{evaluate, scores_table, EvalReport, GenerationConfig, Scores};
use dynprompt_core::model::Backbone;
use dynprompt_core::numerics::digest_hex;
use dynprompt_core::trainer::{TrainConfig, TrainOutcome, Trainer};
use dynprompt_core::Error;
use serde_json::json;

use crate::config::io_error;
use crate::{CliError, CliResult, RunConfig};

pub const BACKBONE_FILE: &str = "backbone.ckpt";
pub const PRETRAIN_LOG: &str = "pretrain_log.csv";
pub const ADAPTER_FILE: &str = "adapter.ckpt";
pub const TRAIN_LOG: &str = "train_log.csv";
pub const SUMMARY_JSON: &str = "summary.json";
pub const SUMMARY_TABLE: &str = "summary.txt";

/// The vocabulary travels next to its backbone checkpoint.
pub fn vocab_path(backbone: &Path) -> PathBuf {
    backbone.with_extension("vocab")
}

pub fn seed_dir(out: &Path, seed: u64) -> PathBuf {
    out.join(format!("seed-{seed}"))
}

pub fn report_path(out: &Path, seed: u64) -> PathBuf {
    out.join(format!("report-seed-{seed}.json"))
}

/// Loads a corpus named by `key`; a missing file is a usage error naming
/// `flag`.
fn corpus(cfg: &RunConfig, key: &str, flag: &str) -> CliResult<Vec<Dialogue>> {
    let path = cfg.path(key, flag)?;
    if !path.is_file() {
        return Err(CliError::Usage(format!(
            "{flag} {}: corpus file not found",
            path.display()
        )));
    }
    Ok(load_corpus(&path, LoadMode::Strict)?.dialogues)
}

fn samples(dialogues: &[Dialogue], window: &WindowConfig) -> Vec<TextSample> {
    dialogues.iter().flat_map(|d| window_samples(d, window)).collect()
}

fn encode(vocab: &Vocabulary, samples: &[TextSample]) -> Vec<DialogueSample> {
    samples.iter().map(|s| vocab.encode_sample(s)).collect()
}

/// Train/validation samples, holding out every tenth dialogue.
fn split_samples(
    dialogues: &[Dialogue],
    vocab: &Vocabulary,
    window: &WindowConfig,
) -> CliResult<(Vec<DialogueSample>, Vec<DialogueSample>)> {
    let (train, valid) = split_train_valid(dialogues);
    if valid.is_empty() {
        return Err(Error::Config(format!(
            "corpus has {} dialogues; at least 10 are needed to hold out a validation split",
            dialogues.len()
        ))
        .into());
    }
    Ok((
        encode(vocab, &samples(&train, window)),
        encode(vocab, &samples(&valid, window)),
    ))
}

fn single_seed(cfg: &RunConfig, command: &str) -> CliResult<u64> {
    match cfg.seeds()?.as_slice() {
        [s] => Ok(*s),
        many => Err(CliError::Usage(format!(
            "{command} takes a single --seed, got {}",
            many.len()
        ))),
    }
}

fn run_trainer(
    label: &str,
    backbone: Backbone,
    adapter: Adapter,
    train: Vec<DialogueSample>,
    valid: Vec<DialogueSample>,
    tc: TrainConfig,
) -> CliResult<TrainOutcome> {
    let mut trainer = Trainer::new(backbone, adapter, train, valid, tc)?;
    while !trainer.is_finished() {
        let row = trainer.run_epoch()?;
        eprintln!(
            "[{label}] epoch {} step {} train {:.4} valid {:.4} lr {:.2e}",
            row.epoch, row.step, row.train_loss, row.valid_loss, row.lr
        );
    }
    Ok(trainer.into_outcome())
}

#[derive(Debug)]
pub struct PretrainOutput {
    pub checkpoint: PathBuf,
    pub checksum: u64,
    pub best_valid: f64,
}

/// Trains a backbone from scratch as a plain language model over every
/// token of the base corpus.
pub fn pretrain(cfg: &RunConfig) -> CliResult<PretrainOutput> {
    let seed = single_seed(cfg, "pretrain")?;
    let dialogues = corpus(cfg, "corpus.base", "--corpus")?;
    let out = cfg.out_dir();
    cfg.save(&out)?;
    let vocab = build_vocab(&dialogues, cfg.parse("corpus.min_count")?)?;
    let window = cfg.window()?;
    let (train, valid) = split_samples(&dialogues, &vocab, &window)?;
    let backbone = Backbone::init(cfg.model_config(vocab.len())?, seed)?;
    let adapter = Adapter::new(AdapterConfig::new(StrategyKind::FineTune, 0).with_seed(seed), &backbone)?;
    let outcome = run_trainer("pretrain", backbone, adapter, train, valid, cfg.pretrain_config(seed)?)?;
    let checkpoint = out.join(BACKBONE_FILE);
    outcome.backbone.save(&checkpoint)?;
    vocab.save(vocab_path(&checkpoint))?;
    outcome.log.save(out.join(PRETRAIN_LOG))?;
    Ok(PretrainOutput {
        checkpoint,
        checksum: outcome.backbone.checksum(),
        best_valid: outcome.best_valid,
    })
}

pub fn load_backbone(path: &Path) -> CliResult<(Backbone, Vocabulary)> {
    if !path.is_file() {
        return Err(CliError::Usage(format!(
            "--backbone {}: checkpoint not found",
            path.display()
        )));
    }
    let backbone = Backbone::load(path)?;
    let vocab = Vocabulary::load(vocab_path(path))?;
    if vocab.len() != backbone.config().vocab_size {
        return Err(Error::Config(format!(
            "vocabulary has {} entries, backbone expects {}",
            vocab.len(),
            backbone.config().vocab_size
        ))
        .into());
    }
    Ok((backbone, vocab))
}

/// One seed of an adaptation run.
#[derive(Clone, Debug)]
pub struct SeedRun {
    pub seed: u64,
    pub checkpoint: PathBuf,
    pub best_valid: f64,
    pub best_epoch: usize,
    pub trainable_params: usize,
}

/// Adapts the backbone with the configured strategy once per seed. Each
/// seed writes `seed-<n>/adapter.ckpt` and `seed-<n>/train_log.csv`.
pub fn adapt(cfg: &RunConfig) -> CliResult<Vec<SeedRun>> {
    let (base, vocab) = load_backbone(&cfg.path("run.backbone", "--backbone")?)?;
    let dialogues = corpus(cfg, "corpus.train", "--corpus")?;
    let out = cfg.out_dir();
    cfg.save(&out)?;
    let (train, valid) = split_samples(&dialogues, &vocab, &cfg.window()?)?;
    let kind = cfg.strategy()?;
    let mut runs = Vec::new();
    for seed in cfg.seeds()? {
        let adapter = Adapter::new(cfg.adapter_config(seed)?, &base)?;
        let trainable_params = parameter_census(&adapter, &base).trainable;
        let label = format!("{kind} seed {seed}");
        let outcome = run_trainer(
            &label,
            base.clone(),
            adapter,
            train.clone(),
            valid.clone(),
            cfg.train_config(kind, seed)?,
        )?;
        let finetuned = if kind == StrategyKind::FineTune {
            Some(&outcome.backbone)
        } else {
            if outcome.backbone.checksum() != base.checksum() {
                return Err(Error::Invariant(format!(
                    "{kind} changed the frozen backbone (checksum {} → {})",
                    digest_hex(base.checksum()),
                    digest_hex(outcome.backbone.checksum())
                ))
                .into());
            }
            None
        };
        let dir = seed_dir(&out, seed);
        fs::create_dir_all(&dir).map_err(|e| io_error(&dir, e))?;
        let checkpoint = dir.join(ADAPTER_FILE);
        outcome.adapter.save(&checkpoint, &base, finetuned)?;
        outcome.log.save(dir.join(TRAIN_LOG))?;
        runs.push(SeedRun {
            seed,
            checkpoint,
            best_valid: outcome.best_valid,
            best_epoch: outcome.best_epoch,
            trainable_params,
        });
    }
    Ok(runs)
}

/// Expands `run.adapter`: each entry is a checkpoint file or an `adapt`
/// output directory holding `seed-<n>/adapter.ckpt`.
pub fn adapter_paths(cfg: &RunConfig) -> CliResult<Vec<PathBuf>> {
    let raw = cfg.path("run.adapter", "--adapter")?;
    let mut paths = Vec::new();
    for entry in raw.to_string_lossy().split(',').map(str::trim).filter(|s| !s.is_empty()) {
        let p = PathBuf::from(entry);
        if p.is_file() {
            paths.push(p);
        } else if p.is_dir() {
            let mut found: Vec<(u64, PathBuf)> = fs::read_dir(&p)
                .map_err(|e| io_error(&p, e))?
                .filter_map(|e| e.ok())
                .filter_map(|e| {
                    let name = e.file_name().to_string_lossy().into_owned();
                    let seed = name.strip_prefix("seed-")?.parse().ok()?;
                    let ckpt = e.path().join(ADAPTER_FILE);
                    ckpt.is_file().then_some((seed, ckpt))
                })
                .collect();
            if found.is_empty() {
                return Err(CliError::Usage(format!(
                    "--adapter {entry}: no seed-*/{ADAPTER_FILE} inside"
                )));
            }
            found.sort();
            paths.extend(found.into_iter().map(|(_, p)| p));
        } else {
            return Err(CliError::Usage(format!("--adapter {entry}: not found")));
        }
    }
    Ok(paths)
}

#[derive(Debug)]
pub struct EvalOutput {
    /// `(seed, report file, report)` in evaluation order.
    pub reports: Vec<(u64, PathBuf, EvalReport)>,
    pub mean: Scores,
    pub summary: PathBuf,
}

/// Generates greedy responses for every test sample with each adapter;
/// writes one report per seed plus a seed-mean summary.
pub fn eval(cfg: &RunConfig) -> CliResult<EvalOutput> {
    let (base, vocab) = load_backbone(&cfg.path("run.backbone", "--backbone")?)?;
    let adapters = adapter_paths(cfg)?;
    let test = samples(&corpus(cfg, "corpus.test", "--test")?, &cfg.window()?);
    let out = cfg.out_dir();
    cfg.save(&out)?;
    let gen = GenerationConfig {
        max_new_tokens: cfg.parse("eval.max_new_tokens")?,
    };
    let mut reports: Vec<(u64, PathBuf, EvalReport)> = Vec::new();
    for path in adapters {
        let LoadedAdapter { adapter, backbone } = Adapter::load(&path, &base)?;
        let seed = adapter.config().seed;
        if reports.iter().any(|(s, _, _)| *s == seed) {
            return Err(CliError::Usage(format!(
                "two adapters share seed {seed}; evaluate them into separate --out directories"
            )));
        }
        let c = adapter.config();
        let settings: BTreeMap<String, String> = [
            ("strategy", c.kind.name().to_string()),
            ("prompt_size", c.prompt_len.to_string()),
            ("seed", seed.to_string()),
            ("backbone_checksum", digest_hex(base.checksum())),
            (
                "adapter_checksum",
                digest_hex(if c.kind == StrategyKind::FineTune {
                    backbone.checksum()
                } else {
                    adapter.params().checksum()
                }),
            ),
            ("max_new_tokens", gen.max_new_tokens.to_string()),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect();
        eprintln!("[eval] {} seed {seed}: {} samples", c.kind, test.len());
        let report = evaluate(&adapter, &backbone, &vocab, &test, &gen, settings)?;
        let file = report_path(&out, seed);
        report.save(&file)?;
        reports.push((seed, file, report));
    }
    let mean = Scores::mean(&reports.iter().map(|(_, _, r)| r.scores.clone()).collect::<Vec<_>>());
    let summary = json!({
        "reports": reports.iter().map(|(seed, file, r)| json!({
            "seed": seed,
            "file": file.file_name().map(|f| f.to_string_lossy().into_owned()),
            "digest": r.digest(),
            "scores": r.scores,
        })).collect::<Vec<_>>(),
        "mean": mean,
    });
    let summary_path = out.join(SUMMARY_JSON);
    let text = serde_json::to_string_pretty(&summary).expect("summary serializes");
    fs::write(&summary_path, text).map_err(|e| io_error(&summary_path, e))?;
    let mut rows: Vec<(String, Scores)> = reports
        .iter()
        .map(|(seed, _, r)| (format!("seed {seed}"), r.scores.clone()))
        .collect();
    rows.push(("mean".to_string(), mean.clone()));
    let table_path = out.join(SUMMARY_TABLE);
    fs::write(&table_path, scores_table(&rows)).map_err(|e| io_error(&table_path, e))?;
    Ok(EvalOutput {
        reports,
        mean,
        summary: summary_path,
    })
}
