use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adapters::Adapter;
use crate::corpus::{TextSample, Vocabulary};
use crate::error::{Error, Result};
use crate::model::Backbone;
use crate::numerics::digest_hex;

use super::generate::{generate, GenerationConfig};
use super::metrics::{avg_length, bleu_avg, meteor_lite, nist, rouge_l};

pub const REPORT_FORMAT: &str = "dynprompt-eval";

/// Corpus-level scores, each metric on its natural scale (`[0, 1]` except
/// NIST and length).
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub bleu_avg: f64,
    pub nist: f64,
    pub meteor_lite: f64,
    pub rouge_l: f64,
    pub avg_length: f64,
}

impl Scores {
    /// Scores of paired word-level hypotheses and references.
    pub fn compute(hyps: &[Vec<String>], refs: &[Vec<String>]) -> Self {
        let n = hyps.len().max(1) as f64;
        let mean = |f: fn(&[String], &[String]) -> f64| {
            hyps.iter().zip(refs).map(|(h, r)| f(h, r)).sum::<f64>() / n
        };
        Self {
            bleu_avg: mean(bleu_avg),
            nist: nist(hyps, refs, 5),
            meteor_lite: mean(meteor_lite),
            rouge_l: mean(rouge_l),
            avg_length: avg_length(hyps),
        }
    }

    pub fn mean(all: &[Scores]) -> Self {
        let n = all.len().max(1) as f64;
        let avg = |f: fn(&Scores) -> f64| all.iter().map(f).sum::<f64>() / n;
        Self {
            bleu_avg: avg(|s| s.bleu_avg),
            nist: avg(|s| s.nist),
            meteor_lite: avg(|s| s.meteor_lite),
            rouge_l: avg(|s| s.rouge_l),
            avg_length: avg(|s| s.avg_length),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub context: Vec<String>,
    pub reference: String,
    pub hypothesis: String,
    pub bleu_avg: f64,
    pub meteor_lite: f64,
    pub rouge_l: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub format: String,
    pub version: u32,
    /// How each metric is aggregated.
    pub notes: BTreeMap<String, String>,
    pub config: BTreeMap<String, String>,
    pub corpus_digest: String,
    pub scores: Scores,
    pub samples: Vec<SampleRecord>,
}

/// Digest of a test corpus as presented to evaluation.
pub fn corpus_digest(samples: &[TextSample]) -> String {
    let mut h = Sha256::new();
    for s in samples {
        for u in &s.context {
            h.update(u.join(" "));
            h.update([0x1f]);
        }
        h.update([0x1e]);
        h.update(s.response.join(" "));
        h.update([0x1d]);
    }
    let out = h.finalize();
    digest_hex(u64::from_le_bytes(out[..8].try_into().expect("8 bytes")))
}

fn metric_notes() -> BTreeMap<String, String> {
    [
        ("bleu_avg", "sentence-level mean of BLEU-1..4 precisions with brevity penalty, 1e-9 floor"),
        ("nist", "corpus-level NIST-5, information weights from the references"),
        ("meteor_lite", "exact then stem unigram alignment, no synonymy"),
        ("rouge_l", "sentence-level mean of LCS F1"),
        ("avg_length", "mean hypothesis length in words"),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v.to_string()))
    .collect()
}

impl EvalReport {
    pub fn from_pairs(
        contexts: Vec<Vec<String>>,
        hyps: Vec<Vec<String>>,
        refs: Vec<Vec<String>>,
        config: BTreeMap<String, String>,
        corpus_digest: String,
    ) -> Self {
        let scores = Scores::compute(&hyps, &refs);
        let samples = contexts
            .into_iter()
            .zip(hyps.iter().zip(&refs))
            .map(|(context, (h, r))| SampleRecord {
                context,
                reference: r.join(" "),
                hypothesis: h.join(" "),
                bleu_avg: bleu_avg(h, r),
                meteor_lite: meteor_lite(h, r),
                rouge_l: rouge_l(h, r),
            })
            .collect();
        Self {
            format: REPORT_FORMAT.into(),
            version: 1,
            notes: metric_notes(),
            config,
            corpus_digest,
            scores,
            samples,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("reports always serialize")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Parse {
            path: "report".into(),
            line: e.line(),
            message: e.to_string(),
        })
    }

    /// Digest of the JSON rendering.
    pub fn digest(&self) -> String {
        let out = Sha256::digest(self.to_json().as_bytes());
        digest_hex(u64::from_le_bytes(out[..8].try_into().expect("8 bytes")))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_json(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }

    pub fn table(&self, label: &str) -> String {
        scores_table(&[(label.to_string(), self.scores.clone())])
    }
}

/// Plain-text table: BLEU, NIST, METEOR, ROUGE-L, Length. BLEU, METEOR and
/// ROUGE-L are shown ×100, with the raw value in parentheses.
pub fn scores_table(rows: &[(String, Scores)]) -> String {
    let width = rows.iter().map(|(l, _)| l.len()).max().unwrap_or(0).max(6);
    let mut out = format!(
        "{:<width$}  {:>16}  {:>7}  {:>16}  {:>16}  {:>6}\n",
        "run", "BLEU", "NIST", "METEOR", "ROUGE-L", "Length"
    );
    let cell = |v: f64| format!("{:.2} ({:.4})", 100.0 * v, v);
    for (label, s) in rows {
        let _ = writeln!(
            out,
            "{:<width$}  {:>16}  {:>7.4}  {:>16}  {:>16}  {:>6.2}",
            label,
            cell(s.bleu_avg),
            s.nist,
            cell(s.meteor_lite),
            cell(s.rouge_l),
            s.avg_length
        );
    }
    out
}

/// Generates a response for every sample and scores it against the
/// sample's (word-level) reference.
pub fn evaluate(
    adapter: &Adapter,
    backbone: &Backbone,
    vocab: &Vocabulary,
    samples: &[TextSample],
    gen: &GenerationConfig,
    config: BTreeMap<String, String>,
) -> Result<EvalReport> {
    if samples.is_empty() {
        return Err(Error::EmptyCorpus("test".into()));
    }
    let mut contexts = Vec::with_capacity(samples.len());
    let mut hyps = Vec::with_capacity(samples.len());
    let mut refs = Vec::with_capacity(samples.len());
    for s in samples {
        let ctx: Vec<Vec<usize>> = s.context.iter().map(|u| vocab.encode_words(u)).collect();
        let ids = generate(adapter, backbone, &ctx, gen)?;
        hyps.push(vocab.decode_words(&ids)?);
        refs.push(s.response.clone());
        contexts.push(s.context.iter().map(|u| u.join(" ")).collect());
    }
    Ok(EvalReport::from_pairs(
        contexts,
        hyps,
        refs,
        config,
        corpus_digest(samples),
    ))
}
