use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numerics::{Graph, ParamSet, Tensor, Var};

use super::config::{ModelConfig, LN_EPS};
use super::past::{LayerKv, PastState};

const INIT_STD: f64 = 0.02;
const POS_INIT_STD: f64 = 0.01;

/// Parameter names of one transformer block, in declaration order.
pub(crate) fn block_param_names(prefix: &str, layer: usize) -> [String; 12] {
    [
        "ln_1.gain",
        "ln_1.bias",
        "attn.qkv.weight",
        "attn.qkv.bias",
        "attn.proj.weight",
        "attn.proj.bias",
        "ln_2.gain",
        "ln_2.bias",
        "mlp.fc.weight",
        "mlp.fc.bias",
        "mlp.proj.weight",
        "mlp.proj.bias",
    ]
    .map(|n| format!("{prefix}h.{layer}.{n}"))
}

/// Inserts freshly initialized block parameters (GPT-2 scheme: N(0, 0.02)
/// weights, residual projections scaled by 1/√(2L), unit gains, zero biases).
pub(crate) fn init_blocks(
    params: &mut ParamSet,
    prefix: &str,
    cfg: &ModelConfig,
    rng: &mut ChaCha8Rng,
) {
    let (d, ff) = (cfg.d_model, cfg.d_ff());
    let resid_std = INIT_STD / (2.0 * cfg.n_layers as f64).sqrt();
    for l in 0..cfg.n_layers {
        let n = block_param_names(prefix, l);
        params.insert(&n[0], Tensor::full(&[d], 1.0));
        params.insert(&n[1], Tensor::zeros(&[d]));
        params.insert(&n[2], Tensor::randn(&[d, 3 * d], INIT_STD, rng));
        params.insert(&n[3], Tensor::zeros(&[3 * d]));
        params.insert(&n[4], Tensor::randn(&[d, d], resid_std, rng));
        params.insert(&n[5], Tensor::zeros(&[d]));
        params.insert(&n[6], Tensor::full(&[d], 1.0));
        params.insert(&n[7], Tensor::zeros(&[d]));
        params.insert(&n[8], Tensor::randn(&[d, ff], INIT_STD, rng));
        params.insert(&n[9], Tensor::zeros(&[ff]));
        params.insert(&n[10], Tensor::randn(&[ff, d], resid_std, rng));
        params.insert(&n[11], Tensor::zeros(&[d]));
    }
}

pub(crate) fn position_table(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::randn(&[cfg.max_positions, cfg.d_model], POS_INIT_STD, rng)
}

/// The pre-trained autoregressive transformer: token and position
/// embeddings, pre-norm blocks, final layer norm and LM head.
#[derive(Clone, Debug, PartialEq)]
pub struct Backbone {
    config: ModelConfig,
    params: ParamSet,
}

impl Backbone {
    /// Seeded GPT-2 style initialization.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        params.insert(
            "wte",
            Tensor::randn(&[config.vocab_size, config.d_model], INIT_STD, &mut rng),
        );
        params.insert("wpe", position_table(&config, &mut rng));
        init_blocks(&mut params, "", &config, &mut rng);
        params.insert("ln_f.gain", Tensor::full(&[config.d_model], 1.0));
        params.insert("ln_f.bias", Tensor::zeros(&[config.d_model]));
        if !config.tie_lm_head {
            params.insert(
                "lm_head",
                Tensor::randn(&[config.vocab_size, config.d_model], INIT_STD, &mut rng),
            );
        }
        Self::from_params(config, params)
    }

    /// Wraps an existing parameter set after checking every name and shape.
    pub fn from_params(config: ModelConfig, params: ParamSet) -> Result<Self> {
        config.validate()?;
        let expected = Self::init_shapes(&config);
        if params.len() != expected.len() {
            return Err(Error::Config(format!(
                "backbone expects {} tensors, got {}",
                expected.len(),
                params.len()
            )));
        }
        for ((name, shape), (got_name, got)) in expected.iter().zip(params.iter()) {
            if name != got_name || shape.as_slice() != got.shape() {
                return Err(Error::Config(format!(
                    "expected parameter {name} {shape:?}, found {got_name} {:?}",
                    got.shape()
                )));
            }
        }
        Ok(Self { config, params })
    }

    fn init_shapes(cfg: &ModelConfig) -> Vec<(String, Vec<usize>)> {
        let (d, ff) = (cfg.d_model, cfg.d_ff());
        let mut out = vec![
            ("wte".to_string(), vec![cfg.vocab_size, d]),
            ("wpe".to_string(), vec![cfg.max_positions, d]),
        ];
        let block_shapes = [
            vec![d],
            vec![d],
            vec![d, 3 * d],
            vec![3 * d],
            vec![d, d],
            vec![d],
            vec![d],
            vec![d],
            vec![d, ff],
            vec![ff],
            vec![ff, d],
            vec![d],
        ];
        for l in 0..cfg.n_layers {
            out.extend(block_param_names("", l).into_iter().zip(block_shapes.clone()));
        }
        out.push(("ln_f.gain".into(), vec![d]));
        out.push(("ln_f.bias".into(), vec![d]));
        if !cfg.tie_lm_head {
            out.push(("lm_head".into(), vec![cfg.vocab_size, d]));
        }
        out
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    /// Order-stable digest of every parameter's exact bits.
    pub fn checksum(&self) -> u64 {
        self.params.checksum()
    }

    /// Copies the parameters into `graph`; `trainable` marks them as
    /// requiring gradients.
    pub fn bind(&self, graph: &mut Graph, trainable: bool) -> BackboneVars {
        let bound = self.params.bind(graph, trainable);
        let v = &bound.vars;
        let blocks = (0..self.config.n_layers)
            .map(|l| BlockVars::from_slice(&v[2 + 12 * l..2 + 12 * (l + 1)]))
            .collect();
        let tail = 2 + 12 * self.config.n_layers;
        BackboneVars {
            config: self.config.clone(),
            wte: v[0],
            wpe: v[1],
            blocks,
            ln_f: (v[tail], v[tail + 1]),
            lm_head: (!self.config.tie_lm_head).then(|| v[tail + 2]),
            all: bound.vars,
        }
    }
}

/// Graph handles for one block's parameters.
#[derive(Clone, Debug)]
pub struct BlockVars {
    pub ln_1: (Var, Var),
    pub qkv: (Var, Var),
    pub proj: (Var, Var),
    pub ln_2: (Var, Var),
    pub fc: (Var, Var),
    pub fc_proj: (Var, Var),
}

impl BlockVars {
    pub(crate) fn from_slice(v: &[Var]) -> Self {
        Self {
            ln_1: (v[0], v[1]),
            qkv: (v[2], v[3]),
            proj: (v[4], v[5]),
            ln_2: (v[6], v[7]),
            fc: (v[8], v[9]),
            fc_proj: (v[10], v[11]),
        }
    }
}

/// A backbone bound into a graph.
#[derive(Clone, Debug)]
pub struct BackboneVars {
    pub config: ModelConfig,
    pub wte: Var,
    pub wpe: Var,
    pub blocks: Vec<BlockVars>,
    pub ln_f: (Var, Var),
    pub lm_head: Option<Var>,
    /// Every parameter handle, in `ParamSet` order.
    pub all: Vec<Var>,
}

/// Result of one backbone forward call.
#[derive(Clone, Debug)]
pub struct ForwardOut {
    /// `[t × vocab]`
    pub logits: Var,
    /// Final-layer (post layer norm) states, `[t × d_model]`.
    pub hidden: Var,
    /// The incoming past extended with this call's keys and values.
    pub new_past: PastState,
}

impl BackboneVars {
    pub fn embed_tokens(&self, g: &mut Graph, tokens: &[usize]) -> Result<Var> {
        g.embedding(self.wte, tokens)
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        tokens: &[usize],
        start_pos: usize,
        past: &PastState,
    ) -> Result<ForwardOut> {
        let x = self.embed_tokens(g, tokens)?;
        self.forward_embeds(g, x, start_pos, past)
    }

    /// Runs the stack over input embeddings `[t × d_model]` occupying
    /// positions `start_pos..start_pos+t`, attending to `past` first.
    pub fn forward_embeds(
        &self,
        g: &mut Graph,
        embeds: Var,
        start_pos: usize,
        past: &PastState,
    ) -> Result<ForwardOut> {
        let x = add_positions(g, self.wpe, embeds, start_pos, &self.config)?;
        check_past(&self.config, past, start_pos)?;
        let (h, new_past) = run_blocks(g, &self.blocks, self.config.n_heads, x, past)?;
        let hidden = g.layer_norm(h, self.ln_f.0, self.ln_f.1, LN_EPS)?;
        let logits = g.matmul_nt(hidden, self.lm_head.unwrap_or(self.wte))?;
        Ok(ForwardOut {
            logits,
            hidden,
            new_past,
        })
    }
}

pub(crate) fn check_past(cfg: &ModelConfig, past: &PastState, start_pos: usize) -> Result<()> {
    if !past.is_empty() && past.layers().len() != cfg.n_layers {
        return Err(Error::Config(format!(
            "past has {} layers, model has {}",
            past.layers().len(),
            cfg.n_layers
        )));
    }
    if start_pos != past.t_past() {
        return Err(Error::Config(format!(
            "start position {start_pos} does not follow a past of {} positions",
            past.t_past()
        )));
    }
    Ok(())
}

/// Adds learned position embeddings for `start_pos..start_pos+t`.
pub(crate) fn add_positions(
    g: &mut Graph,
    wpe: Var,
    embeds: Var,
    start_pos: usize,
    cfg: &ModelConfig,
) -> Result<Var> {
    let shape = g.shape(embeds);
    if shape.len() != 2 || shape[1] != cfg.d_model {
        return Err(Error::Shape {
            op: "forward (input embeddings)",
            lhs: shape.to_vec(),
            rhs: vec![0, cfg.d_model],
        });
    }
    let t = shape[0];
    if start_pos + t > cfg.max_positions {
        return Err(Error::Capacity {
            needed: start_pos + t,
            max: cfg.max_positions,
        });
    }
    let pos = g.narrow(wpe, 0, start_pos, t)?;
    g.add(embeds, pos)
}

/// `[t × d] → [heads × t × d_head]`
pub(crate) fn split_heads(g: &mut Graph, x: Var, heads: usize) -> Result<Var> {
    let (t, d) = (g.shape(x)[0], g.shape(x)[1]);
    let r = g.reshape(x, &[t, heads, d / heads])?;
    g.swap_axes01(r)
}

/// `[heads × t × d_head] → [t × d]`
pub(crate) fn merge_heads(g: &mut Graph, x: Var) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let r = g.swap_axes01(x)?;
    g.reshape(r, &[s[1], s[0] * s[2]])
}

/// Queries, keys and values of one block for (unnormalized) inputs `x`.
fn qkv(g: &mut Graph, blk: &BlockVars, heads: usize, x: Var) -> Result<(Var, Var, Var)> {
    let d = g.shape(x)[1];
    let a = g.layer_norm(x, blk.ln_1.0, blk.ln_1.1, LN_EPS)?;
    let proj = g.matmul(a, blk.qkv.0)?;
    let proj = g.add_bias(proj, blk.qkv.1)?;
    let mut out = [None; 3];
    for (i, slot) in out.iter_mut().enumerate() {
        let part = g.narrow(proj, 1, i * d, d)?;
        *slot = Some(split_heads(g, part, heads)?);
    }
    let [q, k, v] = out.map(|o| o.expect("filled"));
    Ok((q, k, v))
}

/// The keys and values block `blk` would cache for residual inputs `x`.
pub fn layer_kv(g: &mut Graph, blk: &BlockVars, heads: usize, x: Var) -> Result<LayerKv> {
    let (_, key, value) = qkv(g, blk, heads, x)?;
    Ok(LayerKv { key, value })
}

fn block_forward(
    g: &mut Graph,
    blk: &BlockVars,
    heads: usize,
    x: Var,
    past: Option<&LayerKv>,
    t_past: usize,
) -> Result<(Var, LayerKv)> {
    let (q, k, v) = qkv(g, blk, heads, x)?;
    let (k_all, v_all) = match past {
        Some(p) => (g.concat(&[p.key, k], 1)?, g.concat(&[p.value, v], 1)?),
        None => (k, v),
    };
    let att = g.attention(q, k_all, v_all, t_past)?;
    let att = merge_heads(g, att)?;
    let att = g.matmul(att, blk.proj.0)?;
    let att = g.add_bias(att, blk.proj.1)?;
    let x = g.add(x, att)?;

    let m = g.layer_norm(x, blk.ln_2.0, blk.ln_2.1, LN_EPS)?;
    let m = g.matmul(m, blk.fc.0)?;
    let m = g.add_bias(m, blk.fc.1)?;
    let m = g.gelu(m);
    let m = g.matmul(m, blk.fc_proj.0)?;
    let m = g.add_bias(m, blk.fc_proj.1)?;
    let x = g.add(x, m)?;
    Ok((
        x,
        LayerKv {
            key: k_all,
            value: v_all,
        },
    ))
}

/// Runs pre-norm blocks over residual inputs `x` (positions already added).
/// Returns the last block's residual output and the extended past.
pub fn run_blocks(
    g: &mut Graph,
    blocks: &[BlockVars],
    heads: usize,
    mut x: Var,
    past: &PastState,
) -> Result<(Var, PastState)> {
    let mut layers = Vec::with_capacity(blocks.len());
    for (l, blk) in blocks.iter().enumerate() {
        let p = past.layers().get(l);
        let (next, kv) = block_forward(g, blk, heads, x, p, past.t_past())?;
        layers.push(kv);
        x = next;
    }
    Ok((x, PastState::new(g, layers)?))
}
