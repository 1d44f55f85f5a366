//! The five adaptation strategies.
//!
//! Every strategy reduces to the same contract: given a context, produce a
//! token layout for the backbone, an injected [`PastState`], and a set of
//! trainable parameters. Only fine-tuning touches backbone weights.
//!
//! | strategy     | layout                                   | injected past          | trainable                      |
//! |--------------|------------------------------------------|------------------------|--------------------------------|
//! | FineTune     | context ⊕ response                       | none                   | backbone                       |
//! | SoftPrompt   | P₀..P_{k−1} ⊕ context ⊕ response         | none                   | k prompt embeddings            |
//! | PTuning      | [k slots] u₁ [k slots] u₂ … SEP ⊕ resp.  | none                   | k embeddings per utterance     |
//! | PrefixTuning | context ⊕ response                       | f_θ(prompt), shared    | prompt embeddings + f_θ        |
//! | DynamicPrompt| context ⊕ response                       | prompt transformer(ctx)| prompt embeddings + transformer|
//!
//! [`PastState`]: crate::model::PastState

mod checkpoint;
mod compose;

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::corpus::PROMPT_SLOTS;
use crate::error::{Error, Result};
use crate::model::{init_blocks, position_table, Backbone};
use crate::numerics::{ParamSet, Tensor};

pub use checkpoint::LoadedAdapter;
pub use compose::{Bound, Composition};

pub(crate) const PROMPT_EMBEDDINGS: &str = "prompt.embeddings";
pub(crate) const PREFIX_FC1_W: &str = "prefix.fc1.weight";
pub(crate) const PREFIX_FC1_B: &str = "prefix.fc1.bias";
pub(crate) const PREFIX_FC2_W: &str = "prefix.fc2.weight";
pub(crate) const PREFIX_FC2_B: &str = "prefix.fc2.bias";
pub(crate) const PT_PREFIX: &str = "pt.";
pub(crate) const PT_WPE: &str = "pt.wpe";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum StrategyKind {
    FineTune,
    SoftPrompt,
    PTuning,
    PrefixTuning,
    DynamicPrompt,
}

impl StrategyKind {
    pub const ALL: [StrategyKind; 5] = [
        StrategyKind::FineTune,
        StrategyKind::SoftPrompt,
        StrategyKind::PTuning,
        StrategyKind::PrefixTuning,
        StrategyKind::DynamicPrompt,
    ];

    pub fn name(self) -> &'static str {
        match self {
            StrategyKind::FineTune => "finetune",
            StrategyKind::SoftPrompt => "softprompt",
            StrategyKind::PTuning => "ptuning",
            StrategyKind::PrefixTuning => "prefix",
            StrategyKind::DynamicPrompt => "dynamic",
        }
    }

    /// True for every strategy that must leave the backbone bit-identical.
    pub fn freezes_backbone(self) -> bool {
        self != StrategyKind::FineTune
    }
}

impl fmt::Display for StrategyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for StrategyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        StrategyKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown strategy {s:?} (expected finetune, softprompt, ptuning, prefix or dynamic)"
                ))
            })
    }
}

/// What the backbone receives from the dynamic prompt transformer.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum PastSource {
    /// The prompt transformer's own per-layer keys/values at the prompt
    /// positions.
    #[default]
    LayerKv,
    /// Only its final residual states, projected into every backbone layer
    /// through that layer's (frozen) key/value projections.
    FinalHidden,
}

impl PastSource {
    pub fn name(self) -> &'static str {
        match self {
            PastSource::LayerKv => "layer_kv",
            PastSource::FinalHidden => "final_hidden",
        }
    }
}

impl FromStr for PastSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "layer_kv" => Ok(PastSource::LayerKv),
            "final_hidden" => Ok(PastSource::FinalHidden),
            _ => Err(Error::Config(format!("unknown past source {s:?}"))),
        }
    }
}

/// Initialization of the dynamic prompt transformer.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum PromptInit {
    #[default]
    Random,
    BackboneCopy,
}

impl PromptInit {
    pub fn name(self) -> &'static str {
        match self {
            PromptInit::Random => "random",
            PromptInit::BackboneCopy => "backbone_copy",
        }
    }
}

impl FromStr for PromptInit {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random" => Ok(PromptInit::Random),
            "backbone_copy" => Ok(PromptInit::BackboneCopy),
            _ => Err(Error::Config(format!("unknown prompt init {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AdapterConfig {
    pub kind: StrategyKind,
    /// Prompt length k. For p-tuning: tokens per utterance slot.
    pub prompt_len: usize,
    /// Utterance slots reserved by p-tuning.
    pub max_context_utterances: usize,
    pub past_source: PastSource,
    pub prompt_init: PromptInit,
    pub seed: u64,
}

impl AdapterConfig {
    pub fn new(kind: StrategyKind, prompt_len: usize) -> Self {
        Self {
            kind,
            prompt_len,
            max_context_utterances: 4,
            past_source: PastSource::default(),
            prompt_init: PromptInit::default(),
            seed: 0,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }
}

/// A strategy plus its (trainable) parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Adapter {
    config: AdapterConfig,
    params: ParamSet,
}

impl Adapter {
    pub fn new(config: AdapterConfig, backbone: &Backbone) -> Result<Self> {
        let bc = backbone.config();
        let d = bc.d_model;
        let k = config.prompt_len;
        if config.kind != StrategyKind::FineTune && k == 0 {
            return Err(Error::Config("prompt length must be at least 1".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let emb_std = std_dev(backbone.params().require("wte")?.data());
        let mut params = ParamSet::new();
        match config.kind {
            StrategyKind::FineTune => {}
            StrategyKind::SoftPrompt => {
                if k > PROMPT_SLOTS {
                    return Err(Error::Config(format!(
                        "soft prompt of {k} tokens exceeds {PROMPT_SLOTS} placeholder slots"
                    )));
                }
                params.insert(PROMPT_EMBEDDINGS, Tensor::randn(&[k, d], emb_std, &mut rng));
            }
            StrategyKind::PTuning => {
                let slots = k * config.max_context_utterances;
                if slots > PROMPT_SLOTS || config.max_context_utterances == 0 {
                    return Err(Error::Config(format!(
                        "p-tuning needs {slots} placeholder slots, {PROMPT_SLOTS} available"
                    )));
                }
                params.insert(
                    PROMPT_EMBEDDINGS,
                    Tensor::randn(&[slots, d], emb_std, &mut rng),
                );
            }
            StrategyKind::PrefixTuning => {
                let hidden = 2 * d;
                let out = bc.n_layers * 2 * d;
                params.insert(PROMPT_EMBEDDINGS, Tensor::randn(&[k, d], emb_std, &mut rng));
                params.insert(
                    PREFIX_FC1_W,
                    Tensor::randn(&[d, hidden], 1.0 / (d as f64).sqrt(), &mut rng),
                );
                params.insert(PREFIX_FC1_B, Tensor::zeros(&[hidden]));
                params.insert(
                    PREFIX_FC2_W,
                    Tensor::randn(&[hidden, out], 1.0 / (hidden as f64).sqrt(), &mut rng),
                );
                params.insert(PREFIX_FC2_B, Tensor::zeros(&[out]));
            }
            StrategyKind::DynamicPrompt => {
                params.insert(PROMPT_EMBEDDINGS, Tensor::randn(&[k, d], emb_std, &mut rng));
                match config.prompt_init {
                    PromptInit::Random => {
                        params.insert(PT_WPE, position_table(bc, &mut rng));
                        init_blocks(&mut params, PT_PREFIX, bc, &mut rng);
                    }
                    PromptInit::BackboneCopy => {
                        // Backbone order: wte, wpe, blocks…, ln_f, [lm_head].
                        params.insert(PT_WPE, backbone.params().require("wpe")?.clone());
                        for (name, t) in backbone.params().iter() {
                            if name.starts_with("h.") {
                                params.insert(format!("{PT_PREFIX}{name}"), t.clone());
                            }
                        }
                    }
                }
            }
        }
        Ok(Self { config, params })
    }

    pub(crate) fn from_parts(config: AdapterConfig, params: ParamSet) -> Self {
        Self { config, params }
    }

    pub fn config(&self) -> &AdapterConfig {
        &self.config
    }

    pub fn kind(&self) -> StrategyKind {
        self.config.kind
    }

    pub fn prompt_len(&self) -> usize {
        self.config.prompt_len
    }

    /// Adapter-owned parameters (empty for fine-tuning).
    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    /// Checks that the adapter's parameter shapes fit `backbone`.
    pub fn check_compatible(&self, backbone: &Backbone) -> Result<()> {
        let reference = Adapter::new(
            AdapterConfig {
                prompt_init: PromptInit::Random,
                ..self.config.clone()
            },
            backbone,
        )?;
        let mismatch = reference.params.len() != self.params.len()
            || reference
                .params
                .iter()
                .zip(self.params.iter())
                .any(|((a, ta), (b, tb))| a != b || ta.shape() != tb.shape());
        if mismatch {
            return Err(Error::Config(format!(
                "{} adapter parameters do not match the backbone configuration \
                 (layers/heads/width must agree)",
                self.config.kind
            )));
        }
        Ok(())
    }
}

fn std_dev(x: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    (x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt()
}

/// Parameter counts of one named group.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GroupCount {
    pub name: String,
    pub count: usize,
    pub trainable: bool,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Census {
    pub trainable: usize,
    pub frozen: usize,
    pub groups: Vec<GroupCount>,
}

/// Exact trainable/frozen parameter counts for `adapter` over `backbone`.
pub fn parameter_census(adapter: &Adapter, backbone: &Backbone) -> Census {
    let mut groups = vec![GroupCount {
        name: "backbone".into(),
        count: backbone.params().count(),
        trainable: !adapter.kind().freezes_backbone(),
    }];
    let group_of = |name: &str| {
        if name == PROMPT_EMBEDDINGS {
            "prompt_embeddings"
        } else if name.starts_with("prefix.") {
            "prefix_reparam"
        } else {
            "prompt_transformer"
        }
    };
    for (name, t) in adapter.params().iter() {
        let g = group_of(name);
        match groups.iter_mut().find(|x| x.name == g) {
            Some(x) => x.count += t.numel(),
            None => groups.push(GroupCount {
                name: g.into(),
                count: t.numel(),
                trainable: true,
            }),
        }
    }
    let trainable = groups.iter().filter(|g| g.trainable).map(|g| g.count).sum();
    let frozen = groups.iter().filter(|g| !g.trainable).map(|g| g.count).sum();
    Census {
        trainable,
        frozen,
        groups,
    }
}
