//! Greedy response generation and the evaluation battery.

mod generate;
pub mod metrics;
mod report;

pub use generate::{argmax, generate, next_token, GenerationConfig};
pub use metrics::{avg_length, bleu_avg, meteor_lite, nist, rouge_l};
pub use report::{
    corpus_digest, evaluate, scores_table, EvalReport, SampleRecord, Scores, REPORT_FORMAT,
};
