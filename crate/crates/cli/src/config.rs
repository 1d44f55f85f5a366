//! Run configuration: flat `section.key = value` text, layered as
//! built-in defaults < model-size preset < config file < command-line flags.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use dynprompt_core::adapters::{AdapterConfig, PastSource, PromptInit, StrategyKind};
use dynprompt_core::corpus::WindowConfig;
use dynprompt_core::model::ModelConfig;
use dynprompt_core::trainer::{Objective, TrainConfig};
use dynprompt_core::Error;

use crate::CliError;

pub const RESOLVED_CONFIG_FILE: &str = "config.resolved";

const DEFAULTS: &[(&str, &str)] = &[
    ("run.seeds", "0"),
    ("run.out", "runs"),
    ("run.backbone", ""),
    // Adapter checkpoints or `adapt` output directories, comma separated.
    ("run.adapter", ""),
    ("model.size", "base"),
    ("model.layers", "4"),
    ("model.heads", "4"),
    ("model.d_model", "128"),
    ("model.max_positions", "256"),
    ("model.tie_lm_head", "true"),
    ("adapter.strategy", "dynamic"),
    ("adapter.prompt_size", "5"),
    ("adapter.max_context_utterances", "4"),
    ("adapter.prompt_init", "random"),
    ("adapter.past_source", "layer_kv"),
    // `auto` picks the strategy default (5e-5 fine-tuning, 1e-3 prompts).
    ("train.learning_rate", "auto"),
    ("train.warmup_steps", "5000"),
    ("train.batch_size", "32"),
    ("train.max_epochs", "20"),
    ("train.patience", "3"),
    ("train.weight_decay", "0.01"),
    ("train.clip_norm", "1.0"),
    ("pretrain.learning_rate", "1e-3"),
    ("pretrain.warmup_steps", "500"),
    ("pretrain.batch_size", "16"),
    ("pretrain.max_epochs", "4"),
    ("pretrain.patience", "2"),
    ("corpus.base", ""),
    ("corpus.train", ""),
    ("corpus.test", ""),
    ("corpus.min_count", "1"),
    ("corpus.max_utterance_words", "20"),
    ("eval.max_new_tokens", "40"),
    ("sweep.axis", "prompt_size"),
    ("sweep.prompt_sizes", "1,5,10,20"),
    ("sweep.model_sizes", "tiny,small,base"),
    ("sweep.strategies", "finetune,dynamic"),
];

/// Named backbone shapes for the model-size axis.
pub const MODEL_SIZES: &[(&str, usize, usize, usize)] = &[
    ("tiny", 2, 2, 32),
    ("small", 4, 4, 64),
    ("base", 4, 4, 128),
];

fn preset(size: &str) -> Option<[(&'static str, String); 3]> {
    MODEL_SIZES.iter().find(|p| p.0 == size).map(|&(_, l, h, d)| {
        [
            ("model.layers", l.to_string()),
            ("model.heads", h.to_string()),
            ("model.d_model", d.to_string()),
        ]
    })
}

fn config_error(message: impl Into<String>) -> CliError {
    CliError::Core(Error::Config(message.into()))
}

/// Parses `key = value` lines; `#` starts a comment.
pub fn parse_settings(text: &str, source: &str) -> Result<Vec<(String, String)>, CliError> {
    let mut out: Vec<(String, String)> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let parse_err = |message: String| {
            CliError::Core(Error::Parse {
                path: source.to_string(),
                line: i + 1,
                message,
            })
        };
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| parse_err(format!("expected `key = value`, found `{line}`")))?;
        let key = key.trim();
        if !DEFAULTS.iter().any(|(k, _)| *k == key) {
            return Err(parse_err(format!("unknown setting `{key}`")));
        }
        if out.iter().any(|(k, _)| k == key) {
            return Err(parse_err(format!("`{key}` is set twice")));
        }
        out.push((key.to_string(), value.trim().to_string()));
    }
    Ok(out)
}

/// Fully resolved settings: every known key has a value.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::resolve(None, &[]).expect("defaults resolve")
    }
}

impl RunConfig {
    /// Layers `file` and `overrides` (later wins) over the defaults and the
    /// model-size preset, then checks every value parses.
    pub fn resolve(file: Option<&Path>, overrides: &[(String, String)]) -> Result<Self, CliError> {
        let mut explicit: Vec<(String, String)> = Vec::new();
        if let Some(path) = file {
            let text = fs::read_to_string(path).map_err(|e| {
                config_error(format!("cannot read --config {}: {e}", path.display()))
            })?;
            explicit = parse_settings(&text, &path.display().to_string())?;
        }
        for (k, v) in overrides {
            if !DEFAULTS.iter().any(|(d, _)| d == k) {
                return Err(config_error(format!("unknown setting `{k}`")));
            }
            explicit.retain(|(e, _)| e != k);
            explicit.push((k.clone(), v.clone()));
        }
        let mut values: BTreeMap<String, String> = DEFAULTS
            .iter()
            .map(|(k, v)| (k.to_string(), v.to_string()))
            .collect();
        let size = explicit
            .iter()
            .find(|(k, _)| k == "model.size")
            .map_or("base", |(_, v)| v.as_str());
        match preset(size) {
            Some(p) => values.extend(p.into_iter().map(|(k, v)| (k.to_string(), v))),
            None if size == "custom" => {}
            None => {
                return Err(config_error(format!(
                    "model.size must be tiny, small, base or custom, got `{size}`"
                )))
            }
        }
        values.extend(explicit);
        let cfg = Self { values };
        cfg.check()?;
        Ok(cfg)
    }

    /// Resolves from the file written by [`RunConfig::save`].
    pub fn load(path: &Path) -> Result<Self, CliError> {
        Self::resolve(Some(path), &[])
    }

    fn check(&self) -> Result<(), CliError> {
        self.seeds()?;
        self.model_shape()?;
        self.adapter_config(0)?;
        self.train_config(self.strategy()?, 0)?;
        self.pretrain_config(0)?;
        self.window()?;
        self.parse::<usize>("corpus.min_count")?;
        self.parse::<usize>("eval.max_new_tokens")?;
        let axis = self.get("sweep.axis");
        if axis != "prompt_size" && axis != "model_size" {
            return Err(config_error(format!(
                "sweep.axis must be prompt_size or model_size, got `{axis}`"
            )));
        }
        self.list::<usize>("sweep.prompt_sizes")?;
        self.list::<StrategyKind>("sweep.strategies")?;
        for s in self.list::<String>("sweep.model_sizes")? {
            if preset(&s).is_none() {
                return Err(config_error(format!("unknown model size `{s}` in sweep.model_sizes")));
            }
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> &str {
        self.values.get(key).map(String::as_str).unwrap_or("")
    }

    /// A copy with `key` replaced; the result is re-validated. Setting
    /// `model.size` to a named size also resets the shape to its preset.
    pub fn with(&self, key: &str, value: impl ToString) -> Result<Self, CliError> {
        let value = value.to_string();
        let mut pairs: Vec<(String, String)> = self.values.clone().into_iter().collect();
        let mut replaced = vec![(key.to_string(), value.clone())];
        if key == "model.size" {
            if let Some(p) = preset(&value) {
                replaced.extend(p.into_iter().map(|(k, v)| (k.to_string(), v)));
            }
        }
        pairs.retain(|(k, _)| !replaced.iter().any(|(r, _)| r == k));
        pairs.extend(replaced);
        Self::resolve(None, &pairs)
    }

    pub fn parse<T: FromStr>(&self, key: &str) -> Result<T, CliError>
    where
        T::Err: std::fmt::Display,
    {
        let raw = self.get(key);
        raw.parse()
            .map_err(|e| config_error(format!("{key} = `{raw}`: {e}")))
    }

    pub fn list<T: FromStr>(&self, key: &str) -> Result<Vec<T>, CliError>
    where
        T::Err: std::fmt::Display,
    {
        let raw = self.get(key);
        let items = raw
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| {
                s.parse()
                    .map_err(|e| config_error(format!("{key} item `{s}`: {e}")))
            })
            .collect::<Result<Vec<T>, _>>()?;
        if items.is_empty() {
            return Err(config_error(format!("{key} must list at least one value")));
        }
        Ok(items)
    }

    pub fn seeds(&self) -> Result<Vec<u64>, CliError> {
        self.list("run.seeds")
    }

    pub fn out_dir(&self) -> PathBuf {
        PathBuf::from(self.get("run.out"))
    }

    /// The path under `key`, or a usage error naming `flag`.
    pub fn path(&self, key: &str, flag: &str) -> Result<PathBuf, CliError> {
        match self.get(key) {
            "" => Err(CliError::Usage(format!(
                "missing path: pass {flag} PATH or set {key} in the config file"
            ))),
            p => Ok(PathBuf::from(p)),
        }
    }

    pub fn strategy(&self) -> Result<StrategyKind, CliError> {
        self.parse("adapter.strategy")
    }

    /// Backbone shape with the vocabulary size supplied by the corpus.
    pub fn model_config(&self, vocab_size: usize) -> Result<ModelConfig, CliError> {
        let (n_layers, n_heads, d_model, max_positions, tie_lm_head) = self.model_shape()?;
        let cfg = ModelConfig {
            n_layers,
            n_heads,
            d_model,
            vocab_size,
            max_positions,
            tie_lm_head,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    fn model_shape(&self) -> Result<(usize, usize, usize, usize, bool), CliError> {
        let shape = (
            self.parse("model.layers")?,
            self.parse("model.heads")?,
            self.parse("model.d_model")?,
            self.parse("model.max_positions")?,
            self.parse("model.tie_lm_head")?,
        );
        ModelConfig {
            n_layers: shape.0,
            n_heads: shape.1,
            d_model: shape.2,
            vocab_size: 1,
            max_positions: shape.3,
            tie_lm_head: shape.4,
        }
        .validate()?;
        Ok(shape)
    }

    pub fn adapter_config(&self, seed: u64) -> Result<AdapterConfig, CliError> {
        let kind = self.strategy()?;
        let prompt_len = if kind == StrategyKind::FineTune {
            0
        } else {
            self.parse("adapter.prompt_size")?
        };
        let mut cfg = AdapterConfig::new(kind, prompt_len).with_seed(seed);
        cfg.max_context_utterances = self.parse("adapter.max_context_utterances")?;
        cfg.prompt_init = self.parse::<PromptInit>("adapter.prompt_init")?;
        cfg.past_source = self.parse::<PastSource>("adapter.past_source")?;
        Ok(cfg)
    }

    pub fn window(&self) -> Result<WindowConfig, CliError> {
        Ok(WindowConfig {
            max_context_utterances: self.parse("adapter.max_context_utterances")?,
            max_utterance_words: self.parse("corpus.max_utterance_words")?,
        })
    }

    fn section_train(&self, section: &str, base: TrainConfig, seed: u64) -> Result<TrainConfig, CliError> {
        let key = |k: &str| format!("{section}.{k}");
        let lr = self.get(&key("learning_rate"));
        let clip = self.get(&key("clip_norm"));
        let cfg = TrainConfig {
            learning_rate: if lr == "auto" {
                base.learning_rate
            } else {
                self.parse(&key("learning_rate"))?
            },
            warmup_steps: self.parse(&key("warmup_steps"))?,
            batch_size: self.parse(&key("batch_size"))?,
            max_epochs: self.parse(&key("max_epochs"))?,
            patience: self.parse(&key("patience"))?,
            weight_decay: if section == "train" {
                self.parse(&key("weight_decay"))?
            } else {
                base.weight_decay
            },
            clip_norm: match (section, clip) {
                ("train", "none") => None,
                ("train", _) => Some(self.parse(&key("clip_norm"))?),
                _ => base.clip_norm,
            },
            seed,
            ..base
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn train_config(&self, kind: StrategyKind, seed: u64) -> Result<TrainConfig, CliError> {
        self.section_train("train", TrainConfig::for_strategy(kind), seed)
    }

    /// Pre-training: plain language modelling over every token.
    pub fn pretrain_config(&self, seed: u64) -> Result<TrainConfig, CliError> {
        let base = TrainConfig {
            objective: Objective::FullSequence,
            ..TrainConfig::for_strategy(StrategyKind::FineTune)
        };
        self.section_train("pretrain", base, seed)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::from("# resolved configuration\n");
        for (k, v) in &self.values {
            out.push_str(&format!("{k} = {v}\n"));
        }
        out
    }

    /// Writes the resolved configuration into `dir`.
    pub fn save(&self, dir: &Path) -> Result<PathBuf, CliError> {
        fs::create_dir_all(dir).map_err(|e| io_error(dir, e))?;
        let path = dir.join(RESOLVED_CONFIG_FILE);
        fs::write(&path, self.to_text()).map_err(|e| io_error(&path, e))?;
        Ok(path)
    }
}

pub(crate) fn io_error(path: &Path, source: std::io::Error) -> CliError {
    CliError::Core(Error::Io {
        path: path.to_path_buf(),
        source,
    })
}
