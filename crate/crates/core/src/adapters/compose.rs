use crate::corpus::{is_placeholder, placeholder, PAD, PROMPT_BASE, SEP};
use crate::error::{Error, Result};
use crate::model::{
    add_positions, layer_kv, run_blocks, split_heads, Backbone, BackboneVars, BlockVars,
    ForwardOut, LayerKv, PastState,
};
use crate::numerics::{Graph, Var};

use super::{Adapter, AdapterConfig, PastSource, StrategyKind};

/// How one sample is presented to the backbone.
#[derive(Clone, Debug)]
pub struct Composition {
    /// Past the backbone attends to before the first layout position.
    pub injected_past: PastState,
    /// Token ids, with prompt placeholders where prompt embeddings go.
    pub token_layout: Vec<usize>,
    /// True exactly on response positions of `token_layout`.
    pub loss_mask: Vec<bool>,
    /// Position of the first layout token (the injected past's length).
    pub start_pos: usize,
}

#[derive(Clone, Debug)]
struct PrefixVars {
    fc1: (Var, Var),
    fc2: (Var, Var),
}

#[derive(Clone, Debug)]
struct PromptTransformerVars {
    wpe: Var,
    blocks: Vec<BlockVars>,
}

impl Composition {
    /// Next-token targets and their mask: position `i` predicts layout
    /// position `i + 1`, and counts iff that position is a response token.
    pub fn shifted_targets(&self) -> (Vec<usize>, Vec<bool>) {
        let n = self.token_layout.len();
        let mut targets = self.token_layout[1..].to_vec();
        targets.push(PAD);
        let mut mask = self.loss_mask[1..].to_vec();
        mask.push(false);
        debug_assert_eq!(targets.len(), n);
        (targets, mask)
    }

    pub fn response_token_count(&self) -> usize {
        self.loss_mask.iter().filter(|&&m| m).count()
    }
}

/// A backbone and adapter bound into one graph.
#[derive(Clone, Debug)]
pub struct Bound {
    config: AdapterConfig,
    pub backbone: BackboneVars,
    /// Adapter parameter handles in `Adapter::params` order.
    pub adapter_vars: Vec<Var>,
    prompt: Option<Var>,
    prefix: Option<PrefixVars>,
    transformer: Option<PromptTransformerVars>,
}

impl Adapter {
    /// Binds `backbone` and the adapter into `g`. With `train`, the
    /// strategy's trainable parameters require gradients; everything else
    /// is a constant.
    pub fn bind(&self, g: &mut Graph, backbone: &Backbone, train: bool) -> Result<Bound> {
        self.check_compatible(backbone)?;
        let kind = self.kind();
        let bb = backbone.bind(g, train && kind == StrategyKind::FineTune);
        let vars = self.params().bind(g, train).vars;
        let mut prompt = None;
        let mut prefix = None;
        let mut transformer = None;
        match kind {
            StrategyKind::FineTune => {}
            StrategyKind::SoftPrompt | StrategyKind::PTuning => prompt = Some(vars[0]),
            StrategyKind::PrefixTuning => {
                prompt = Some(vars[0]);
                prefix = Some(PrefixVars {
                    fc1: (vars[1], vars[2]),
                    fc2: (vars[3], vars[4]),
                });
            }
            StrategyKind::DynamicPrompt => {
                prompt = Some(vars[0]);
                let n_layers = backbone.config().n_layers;
                transformer = Some(PromptTransformerVars {
                    wpe: vars[1],
                    blocks: (0..n_layers)
                        .map(|l| BlockVars::from_slice(&vars[2 + 12 * l..2 + 12 * (l + 1)]))
                        .collect(),
                });
            }
        }
        Ok(Bound {
            config: self.config().clone(),
            backbone: bb,
            adapter_vars: vars,
            prompt,
            prefix,
            transformer,
        })
    }
}

impl Bound {
    pub fn kind(&self) -> StrategyKind {
        self.config.kind
    }

    /// Handles of the parameters this strategy trains.
    pub fn trainable_vars(&self) -> &[Var] {
        if self.kind() == StrategyKind::FineTune {
            &self.backbone.all
        } else {
            &self.adapter_vars
        }
    }

    /// Lays out `context_utterances` (token ids, no separators) and an
    /// optional `response` (already EOS-terminated when training), and
    /// computes the strategy's injected past.
    pub fn compose(
        &self,
        g: &mut Graph,
        context_utterances: &[Vec<usize>],
        response: &[usize],
    ) -> Result<Composition> {
        let context: Vec<usize> = context_utterances
            .iter()
            .flat_map(|u| u.iter().copied().chain(std::iter::once(SEP)))
            .collect();
        let k = self.config.prompt_len;
        let (prompt_layout, injected_past) = match self.kind() {
            StrategyKind::FineTune => (context, PastState::empty()),
            StrategyKind::SoftPrompt => (
                (0..k).map(placeholder).chain(context).collect(),
                PastState::empty(),
            ),
            StrategyKind::PTuning => {
                let slots = self.config.max_context_utterances;
                if context_utterances.len() > slots {
                    return Err(Error::Config(format!(
                        "p-tuning has {slots} utterance slots, context has {}",
                        context_utterances.len()
                    )));
                }
                let mut layout = Vec::with_capacity(context.len() + k * slots);
                for (j, u) in context_utterances.iter().enumerate() {
                    layout.extend((j * k..(j + 1) * k).map(placeholder));
                    layout.extend_from_slice(u);
                }
                if !context_utterances.is_empty() {
                    layout.push(SEP);
                }
                (layout, PastState::empty())
            }
            StrategyKind::PrefixTuning => (context, self.prefix_past(g)?),
            StrategyKind::DynamicPrompt => {
                let past = self.dynamic_past(g, &context)?;
                (context, past)
            }
        };
        let mut loss_mask = vec![false; prompt_layout.len()];
        loss_mask.resize(prompt_layout.len() + response.len(), true);
        let mut token_layout = prompt_layout;
        token_layout.extend_from_slice(response);
        Ok(Composition {
            start_pos: injected_past.t_past(),
            injected_past,
            token_layout,
            loss_mask,
        })
    }

    /// Input embeddings of a layout: word ids come from the backbone's
    /// token table, placeholders from the prompt table.
    pub fn embed_layout(&self, g: &mut Graph, layout: &[usize]) -> Result<Var> {
        if layout.is_empty() {
            return Err(Error::Config("empty token layout".into()));
        }
        let mut runs: Vec<Var> = Vec::new();
        let mut start = 0;
        while start < layout.len() {
            let ph = is_placeholder(layout[start]);
            let end = layout[start..]
                .iter()
                .position(|&t| is_placeholder(t) != ph)
                .map_or(layout.len(), |o| start + o);
            let run = &layout[start..end];
            let var = if ph {
                let table = self.prompt.ok_or_else(|| {
                    Error::Config(format!("{} has no prompt embeddings", self.kind()))
                })?;
                let rows: Vec<usize> = run.iter().map(|&t| t - PROMPT_BASE).collect();
                g.embedding(table, &rows)?
            } else {
                self.backbone.embed_tokens(g, run)?
            };
            runs.push(var);
            start = end;
        }
        if runs.len() == 1 {
            Ok(runs[0])
        } else {
            g.concat(&runs, 0)
        }
    }

    /// Runs the backbone over a composition.
    pub fn run(&self, g: &mut Graph, comp: &Composition) -> Result<ForwardOut> {
        let x = self.embed_layout(g, &comp.token_layout)?;
        self.backbone
            .forward_embeds(g, x, comp.start_pos, &comp.injected_past)
    }

    /// Prefix tuning's context-independent past: the reparameterization
    /// MLP maps `[k × d]` prompt embeddings to `[k × L·2·d]`, split into
    /// each layer's keys and values.
    fn prefix_past(&self, g: &mut Graph) -> Result<PastState> {
        let out = self.prefix_output(g)?;
        let d = self.backbone.config.d_model;
        let heads = self.backbone.config.n_heads;
        let mut layers = Vec::with_capacity(self.backbone.config.n_layers);
        for l in 0..self.backbone.config.n_layers {
            let key = g.narrow(out, 1, 2 * l * d, d)?;
            let value = g.narrow(out, 1, (2 * l + 1) * d, d)?;
            layers.push(LayerKv {
                key: split_heads(g, key, heads)?,
                value: split_heads(g, value, heads)?,
            });
        }
        PastState::new(g, layers)
    }

    /// Raw reparameterization output `[k × n_layers·2·d_model]`.
    pub fn prefix_output(&self, g: &mut Graph) -> Result<Var> {
        let pv = self
            .prefix
            .as_ref()
            .ok_or_else(|| Error::Config(format!("{} has no prefix MLP", self.kind())))?;
        let p = self.prompt.expect("prefix has prompt embeddings");
        let h = g.matmul(p, pv.fc1.0)?;
        let h = g.add_bias(h, pv.fc1.1)?;
        let h = g.tanh(h);
        let o = g.matmul(h, pv.fc2.0)?;
        g.add_bias(o, pv.fc2.1)
    }

    /// The dynamic prompt for `context` (token ids including separators).
    ///
    /// The frozen backbone first encodes the context; the prompt transformer
    /// then runs over the k prompt embeddings at positions `m..m+k`,
    /// attending layer by layer to the backbone's context keys/values. Its
    /// keys/values at the prompt positions become the injected past.
    pub fn dynamic_past(&self, g: &mut Graph, context: &[usize]) -> Result<PastState> {
        let pt = self
            .transformer
            .as_ref()
            .ok_or_else(|| Error::Config(format!("{} has no prompt transformer", self.kind())))?;
        let cfg = &self.backbone.config;
        let k = self.config.prompt_len;
        let (m, ctx_past) = if context.is_empty() {
            (0, PastState::empty())
        } else {
            let enc = self
                .backbone
                .forward(g, context, 0, &PastState::empty())?;
            (context.len(), enc.new_past)
        };
        let p = self.prompt.expect("dynamic prompt has prompt embeddings");
        let x = add_positions(g, pt.wpe, p, m, cfg)?;
        let (h, pt_past) = run_blocks(g, &pt.blocks, cfg.n_heads, x, &ctx_past)?;
        let layers = match self.config.past_source {
            PastSource::LayerKv => pt_past
                .layers()
                .iter()
                .map(|kv| {
                    Ok(LayerKv {
                        key: g.narrow(kv.key, 1, m, k)?,
                        value: g.narrow(kv.value, 1, m, k)?,
                    })
                })
                .collect::<Result<Vec<_>>>()?,
            PastSource::FinalHidden => self
                .backbone
                .blocks
                .iter()
                .map(|blk| layer_kv(g, blk, cfg.n_heads, h))
                .collect::<Result<Vec<_>>>()?,
        };
        PastState::new(g, layers)
    }
}
