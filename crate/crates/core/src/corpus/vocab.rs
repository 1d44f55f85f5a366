use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

use super::dialogue::Dialogue;

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const EOS: usize = 2;
pub const SEP: usize = 3;
/// First prompt-placeholder id; placeholders occupy
/// `PROMPT_BASE..PROMPT_BASE + PROMPT_SLOTS`.
pub const PROMPT_BASE: usize = 4;
pub const PROMPT_SLOTS: usize = 64;
/// First id assigned to a corpus word.
pub const FIRST_WORD_ID: usize = PROMPT_BASE + PROMPT_SLOTS;

const VOCAB_HEADER: &str = "#dynprompt-vocab v1";
const RESERVED_NAMES: [&str; 4] = ["<pad>", "<unk>", "<eos>", "<sep>"];

pub fn is_placeholder(id: usize) -> bool {
    (PROMPT_BASE..FIRST_WORD_ID).contains(&id)
}

/// Placeholder token for prompt slot `slot`.
pub fn placeholder(slot: usize) -> usize {
    assert!(slot < PROMPT_SLOTS, "prompt slot {slot} exceeds {PROMPT_SLOTS}");
    PROMPT_BASE + slot
}

/// Word ↔ id mapping with a fixed block of reserved ids.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    words: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    pub fn from_words(words: Vec<String>) -> Result<Self> {
        let mut index = HashMap::with_capacity(words.len());
        for (i, w) in words.iter().enumerate() {
            if w.is_empty() || w.contains(char::is_whitespace) {
                return Err(Error::Config(format!("invalid vocabulary word {w:?}")));
            }
            if index.insert(w.clone(), FIRST_WORD_ID + i).is_some() {
                return Err(Error::Config(format!("duplicate vocabulary word {w:?}")));
            }
        }
        Ok(Self { words, index })
    }

    /// Total id space, reserved ids included.
    pub fn len(&self) -> usize {
        FIRST_WORD_ID + self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn id(&self, word: &str) -> usize {
        self.index.get(word).copied().unwrap_or(UNK)
    }

    pub fn encode_words(&self, words: &[String]) -> Vec<usize> {
        words.iter().map(|w| self.id(w)).collect()
    }

    /// Renders ids as text: reserved tokens are dropped except SEP, which
    /// becomes `/`.
    pub fn decode(&self, ids: &[usize]) -> Result<String> {
        let mut parts: Vec<&str> = Vec::with_capacity(ids.len());
        for &id in ids {
            if id >= self.len() {
                return Err(Error::TokenRange {
                    id,
                    size: self.len(),
                });
            }
            if id == SEP {
                parts.push("/");
            } else if id >= FIRST_WORD_ID {
                parts.push(&self.words[id - FIRST_WORD_ID]);
            }
        }
        Ok(parts.join(" "))
    }

    /// Decodes to a word list (SEP and other reserved ids dropped).
    pub fn decode_words(&self, ids: &[usize]) -> Result<Vec<String>> {
        let text = self.decode(&ids.iter().copied().filter(|&i| i != SEP).collect::<Vec<_>>())?;
        Ok(text.split_whitespace().map(str::to_string).collect())
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("{VOCAB_HEADER}\n#reserved");
        for (id, name) in RESERVED_NAMES.iter().enumerate() {
            out.push_str(&format!("\t{name}={id}"));
        }
        out.push_str(&format!("\tprompt={PROMPT_BASE}+{PROMPT_SLOTS}\n"));
        for (i, w) in self.words.iter().enumerate() {
            out.push_str(&format!("{w}\t{}\n", FIRST_WORD_ID + i));
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let bad = |line: usize, message: String| Error::Parse {
            path: "vocabulary".into(),
            line,
            message,
        };
        let mut lines = text.lines();
        if lines.next() != Some(VOCAB_HEADER) {
            return Err(bad(1, format!("expected header {VOCAB_HEADER:?}")));
        }
        let reserved = format!(
            "#reserved\t<pad>={PAD}\t<unk>={UNK}\t<eos>={EOS}\t<sep>={SEP}\tprompt={PROMPT_BASE}+{PROMPT_SLOTS}"
        );
        if lines.next() != Some(reserved.as_str()) {
            return Err(bad(2, "reserved-token layout differs from this build".into()));
        }
        let mut words = Vec::new();
        for (i, line) in lines.enumerate() {
            let (w, id) = line
                .split_once('\t')
                .ok_or_else(|| bad(i + 3, "expected word<TAB>id".into()))?;
            let id: usize = id
                .parse()
                .map_err(|_| bad(i + 3, format!("bad id {id:?}")))?;
            if id != FIRST_WORD_ID + words.len() {
                return Err(bad(i + 3, format!("ids must be dense, got {id}")));
            }
            words.push(w.to_string());
        }
        Self::from_words(words)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_text(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }
}

/// Words with frequency ≥ `min_count`, ordered by frequency (descending)
/// then lexicographically.
pub fn build_vocab(corpus: &[Dialogue], min_count: usize) -> Result<Vocabulary> {
    if corpus.is_empty() {
        return Err(Error::EmptyCorpus("vocabulary source".into()));
    }
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for w in corpus.iter().flat_map(|d| d.utterances.iter().flatten()) {
        *counts.entry(w.as_str()).or_default() += 1;
    }
    let mut kept: Vec<(&str, usize)> = counts
        .into_iter()
        .filter(|&(_, c)| c >= min_count.max(1))
        .collect();
    kept.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
    Vocabulary::from_words(kept.into_iter().map(|(w, _)| w.to_string()).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn words(s: &str) -> Vec<String> {
        s.split_whitespace().map(str::to_string).collect()
    }

    fn corpus() -> Vec<Dialogue> {
        vec![Dialogue::from_texts(&["a a b", "hello world c a"]).unwrap()]
    }

    #[test]
    fn min_count_filters_rare_words() {
        let v = build_vocab(&[Dialogue::from_texts(&["a a b", "x"]).unwrap()], 2).unwrap();
        assert_ne!(v.id("a"), UNK);
        assert_eq!(v.id("b"), UNK);
    }

    #[test]
    fn ordering_is_frequency_then_lexicographic() {
        let v = build_vocab(&corpus(), 1).unwrap();
        assert_eq!(v.words(), &words("a b c hello world")[..]);
        assert_eq!(build_vocab(&corpus(), 1).unwrap(), v);
    }

    #[test]
    fn text_format_round_trips_exactly() {
        let v = build_vocab(&corpus(), 1).unwrap();
        let text = v.to_text();
        let back = Vocabulary::from_text(&text).unwrap();
        assert_eq!(back, v);
        assert_eq!(back.to_text(), text);
    }

    #[test]
    fn encode_decode_round_trip_and_unk() {
        let v = build_vocab(&corpus(), 1).unwrap();
        let ids = v.encode_words(&words("hello world"));
        assert_eq!(v.decode(&ids).unwrap(), "hello world");
        assert_eq!(v.encode_words(&words("zebra")), vec![UNK]);
    }

    #[test]
    fn decode_strips_reserved_and_renders_sep() {
        let v = build_vocab(&corpus(), 1).unwrap();
        assert_eq!(v.decode(&[EOS]).unwrap(), "");
        let a = v.id("a");
        let b = v.id("b");
        assert_eq!(
            v.decode(&[placeholder(0), a, SEP, b, EOS, PAD]).unwrap(),
            "a / b"
        );
        assert!(matches!(
            v.decode(&[v.len()]),
            Err(Error::TokenRange { .. })
        ));
    }
}
