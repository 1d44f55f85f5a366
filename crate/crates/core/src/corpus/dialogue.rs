use std::fs;
use std::io::Write;
use std::path::Path;

use serde_json::Value;

use crate::error::{Error, Result};

/// Format tag carried by the optional first-line corpus header.
pub const CORPUS_FORMAT: &str = "dialogue-jsonl";
pub const CORPUS_VERSION: u64 = 1;

/// Splits raw text into normalized words.
pub trait Tokenizer {
    fn words(&self, text: &str) -> Vec<String>;
}

/// Lowercased whitespace splitting.
#[derive(Clone, Copy, Debug, Default)]
pub struct WhitespaceTokenizer;

impl Tokenizer for WhitespaceTokenizer {
    fn words(&self, text: &str) -> Vec<String> {
        text.split_whitespace().map(str::to_lowercase).collect()
    }
}

/// A multi-turn dialogue; speakers alternate by position.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Dialogue {
    pub id: Option<String>,
    pub utterances: Vec<Vec<String>>,
}

impl Dialogue {
    pub fn new(utterances: Vec<Vec<String>>) -> Result<Self> {
        validate(&utterances).map_err(Error::Config)?;
        Ok(Self {
            id: None,
            utterances,
        })
    }

    /// Tokenizes each utterance with [`WhitespaceTokenizer`].
    pub fn from_texts<S: AsRef<str>>(texts: &[S]) -> Result<Self> {
        Self::new(
            texts
                .iter()
                .map(|t| WhitespaceTokenizer.words(t.as_ref()))
                .collect(),
        )
    }
}

fn validate(utterances: &[Vec<String>]) -> std::result::Result<(), String> {
    if utterances.len() < 2 {
        return Err(format!(
            "a dialogue needs at least 2 utterances, got {}",
            utterances.len()
        ));
    }
    if let Some(i) = utterances.iter().position(Vec::is_empty) {
        return Err(format!("utterance {i} is empty"));
    }
    Ok(())
}

/// How [`load_corpus`] treats lines that fail the schema.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum LoadMode {
    /// First bad line is an error.
    #[default]
    Strict,
    /// Bad lines are skipped and reported as warnings.
    Lenient,
}

#[derive(Clone, Debug, Default)]
pub struct LoadedCorpus {
    pub dialogues: Vec<Dialogue>,
    pub warnings: Vec<String>,
}

/// Reads a JSON Lines corpus: one `{"utterances": [..], "id"?: ..}` object
/// per line, optionally preceded by a `{"format": .., "version": ..}` header.
pub fn load_corpus(path: impl AsRef<Path>, mode: LoadMode) -> Result<LoadedCorpus> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_corpus(&text, &path.display().to_string(), mode)
}

pub fn parse_corpus(text: &str, source: &str, mode: LoadMode) -> Result<LoadedCorpus> {
    let tokenizer = WhitespaceTokenizer;
    let mut out = LoadedCorpus::default();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let parsed = serde_json::from_str::<Value>(line)
            .map_err(|e| format!("malformed JSON: {e}"))
            .and_then(|v| {
                if line_no == 1 && v.get("format").is_some() {
                    check_header(&v).map(|_| None)
                } else {
                    parse_dialogue(&v, &tokenizer).map(Some)
                }
            });
        match parsed {
            Ok(Some(d)) => out.dialogues.push(d),
            Ok(None) => {}
            Err(message) if mode == LoadMode::Lenient => {
                out.warnings.push(format!("{source}:{line_no}: {message}"));
            }
            Err(message) => {
                return Err(Error::Parse {
                    path: source.to_string(),
                    line: line_no,
                    message,
                })
            }
        }
    }
    if out.dialogues.is_empty() {
        return Err(Error::EmptyCorpus(source.to_string()));
    }
    Ok(out)
}

fn check_header(v: &Value) -> std::result::Result<(), String> {
    let format = v.get("format").and_then(Value::as_str);
    let version = v.get("version").and_then(Value::as_u64);
    match (format, version) {
        (Some(CORPUS_FORMAT), Some(CORPUS_VERSION)) => Ok(()),
        _ => Err(format!(
            "unsupported corpus header {v}; expected format {CORPUS_FORMAT:?} version {CORPUS_VERSION}"
        )),
    }
}

fn parse_dialogue(v: &Value, tokenizer: &impl Tokenizer) -> std::result::Result<Dialogue, String> {
    let utts = v
        .get("utterances")
        .ok_or("missing field \"utterances\"")?
        .as_array()
        .ok_or("\"utterances\" is not a list")?;
    let utterances = utts
        .iter()
        .map(|u| {
            u.as_str()
                .map(|s| tokenizer.words(s))
                .ok_or_else(|| "utterance is not a string".to_string())
        })
        .collect::<std::result::Result<Vec<_>, _>>()?;
    validate(&utterances)?;
    let id = match v.get("id") {
        None | Some(Value::Null) => None,
        Some(Value::String(s)) => Some(s.clone()),
        Some(other) => Some(other.to_string()),
    };
    Ok(Dialogue { id, utterances })
}

/// Writes dialogues with a format header, one JSON object per line.
pub fn write_corpus(path: impl AsRef<Path>, dialogues: &[Dialogue]) -> Result<()> {
    let path = path.as_ref();
    let mut buf = Vec::new();
    let header = serde_json::json!({"format": CORPUS_FORMAT, "version": CORPUS_VERSION});
    writeln!(buf, "{header}").expect("in-memory write");
    for d in dialogues {
        let utterances: Vec<String> = d.utterances.iter().map(|u| u.join(" ")).collect();
        let obj = match &d.id {
            Some(id) => serde_json::json!({"id": id, "utterances": utterances}),
            None => serde_json::json!({"utterances": utterances}),
        };
        writeln!(buf, "{obj}").expect("in-memory write");
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}
