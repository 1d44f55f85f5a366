use crate::adapters::Adapter;
use crate::corpus::{is_placeholder, EOS, PAD};
use crate::error::{Error, Result};
use crate::model::Backbone;
use crate::numerics::Graph;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GenerationConfig {
    pub max_new_tokens: usize,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        Self { max_new_tokens: 40 }
    }
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Argmax over ids the model may emit: PAD and prompt placeholders are
/// never targets, so they are skipped. Ties go to the lowest id.
pub fn next_token(row: &[f64]) -> usize {
    let mut best: Option<usize> = None;
    for (i, &v) in row.iter().enumerate() {
        if i == PAD || is_placeholder(i) {
            continue;
        }
        if best.is_none_or(|b| v > row[b]) {
            best = Some(i);
        }
    }
    best.unwrap_or(EOS)
}

/// Greedy decoding with an incremental key/value cache. Returns the
/// generated ids without the terminating EOS. Generation also stops when
/// the position budget is exhausted.
pub fn generate(
    adapter: &Adapter,
    backbone: &Backbone,
    context_utterances: &[Vec<usize>],
    cfg: &GenerationConfig,
) -> Result<Vec<usize>> {
    if cfg.max_new_tokens == 0 {
        return Err(Error::Config("max_new_tokens must be at least 1".into()));
    }
    let mut g = Graph::new();
    let bound = adapter.bind(&mut g, backbone, false)?;
    let comp = bound.compose(&mut g, context_utterances, &[])?;
    let mut out = bound.run(&mut g, &comp)?;
    let mut pos = comp.start_pos + comp.token_layout.len();
    let max_positions = backbone.config().max_positions;
    let mut generated = Vec::new();
    loop {
        let logits = g.value(out.logits);
        let next = next_token(logits.row(logits.shape()[0] - 1));
        if next == EOS {
            break;
        }
        generated.push(next);
        if generated.len() >= cfg.max_new_tokens || pos >= max_positions {
            break;
        }
        out = bound.backbone.forward(&mut g, &[next], pos, &out.new_past)?;
        pos += 1;
    }
    Ok(generated)
}
