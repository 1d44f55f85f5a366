//! Adapter containers. An adapter records the checksum of the backbone it
//! was trained against and refuses to load against any other.

use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{Backbone, Checkpoint, ModelConfig, KIND_KEY};
use crate::numerics::digest_hex;

use super::{Adapter, AdapterConfig, StrategyKind};

const ADAPTER_KIND: &str = "adapter";
const BACKBONE_CHECKSUM_KEY: &str = "backbone_checksum";

/// An adapter restored from disk together with the backbone to run it on:
/// the fine-tuned weights for fine-tuning, the given backbone otherwise.
#[derive(Clone, Debug)]
pub struct LoadedAdapter {
    pub adapter: Adapter,
    pub backbone: Backbone,
}

impl Adapter {
    /// `base` is the backbone the adapter was trained against; `finetuned`
    /// carries the updated weights of a fine-tuning run.
    pub fn to_checkpoint(&self, base: &Backbone, finetuned: Option<&Backbone>) -> Result<Checkpoint> {
        let c = self.config();
        let mut header = vec![
            (KIND_KEY.to_string(), ADAPTER_KIND.to_string()),
            ("strategy".into(), c.kind.name().into()),
            ("prompt_len".into(), c.prompt_len.to_string()),
            ("max_context_utterances".into(), c.max_context_utterances.to_string()),
            ("past_source".into(), c.past_source.name().into()),
            ("prompt_init".into(), c.prompt_init.name().into()),
            ("seed".into(), c.seed.to_string()),
            (BACKBONE_CHECKSUM_KEY.into(), digest_hex(base.checksum())),
        ];
        header.extend(base.config().to_pairs());
        let params = match (c.kind, finetuned) {
            (StrategyKind::FineTune, Some(ft)) => {
                if ft.config() != base.config() {
                    return Err(Error::Config(
                        "fine-tuned backbone has a different configuration".into(),
                    ));
                }
                ft.params().clone()
            }
            (StrategyKind::FineTune, None) => {
                return Err(Error::Config(
                    "a fine-tuning checkpoint needs the fine-tuned backbone".into(),
                ))
            }
            _ => self.params().clone(),
        };
        Ok(Checkpoint::new(header, params))
    }

    pub fn save(
        &self,
        path: impl AsRef<Path>,
        base: &Backbone,
        finetuned: Option<&Backbone>,
    ) -> Result<()> {
        self.to_checkpoint(base, finetuned)?.save(path)
    }

    pub fn from_checkpoint(ckpt: &Checkpoint, base: &Backbone) -> Result<LoadedAdapter> {
        let kind = ckpt.require(KIND_KEY)?;
        if kind != ADAPTER_KIND {
            return Err(Error::Checkpoint(format!(
                "expected an adapter container, found kind={kind}"
            )));
        }
        let expected = ckpt.require(BACKBONE_CHECKSUM_KEY)?;
        let found = digest_hex(base.checksum());
        if expected != found {
            return Err(Error::ChecksumMismatch {
                expected: expected.to_string(),
                found,
            });
        }
        let parse = |key: &str| -> Result<usize> {
            let v = ckpt.require(key)?;
            v.parse()
                .map_err(|_| Error::Checkpoint(format!("{key}={v} is not a number")))
        };
        let config = AdapterConfig {
            kind: ckpt.require("strategy")?.parse()?,
            prompt_len: parse("prompt_len")?,
            max_context_utterances: parse("max_context_utterances")?,
            past_source: ckpt.require("past_source")?.parse()?,
            prompt_init: ckpt.require("prompt_init")?.parse()?,
            seed: ckpt
                .require("seed")?
                .parse()
                .map_err(|_| Error::Checkpoint("seed is not a number".into()))?,
        };
        if config.kind == StrategyKind::FineTune {
            let model = ModelConfig::from_pairs(&ckpt.header)?;
            let backbone = Backbone::from_params(model, ckpt.params.clone())?;
            let adapter = Adapter::new(config, &backbone)?;
            return Ok(LoadedAdapter { adapter, backbone });
        }
        let adapter = Adapter::from_parts(config, ckpt.params.clone());
        adapter.check_compatible(base)?;
        Ok(LoadedAdapter {
            adapter,
            backbone: base.clone(),
        })
    }

    pub fn load(path: impl AsRef<Path>, base: &Backbone) -> Result<LoadedAdapter> {
        Self::from_checkpoint(&Checkpoint::load(path)?, base)
    }
}
