//! Dialogue corpora: loading, vocabulary, context windowing and batching.

mod batch;
mod dialogue;
pub mod synthetic;
mod vocab;
mod window;

pub use batch::{batch, Batch};
pub use dialogue::{
    load_corpus, parse_corpus, write_corpus, Dialogue, LoadMode, LoadedCorpus, Tokenizer,
    WhitespaceTokenizer, CORPUS_FORMAT, CORPUS_VERSION,
};
pub use vocab::{
    build_vocab, is_placeholder, placeholder, Vocabulary, EOS, FIRST_WORD_ID, PAD, PROMPT_BASE,
    PROMPT_SLOTS, SEP, UNK,
};
pub use window::{encode_corpus, window_samples, DialogueSample, TextSample, WindowConfig};

/// Splits by dialogue: every tenth dialogue (indices 9, 19, …) is held out.
pub fn split_train_valid(dialogues: &[Dialogue]) -> (Vec<Dialogue>, Vec<Dialogue>) {
    let (valid, train): (Vec<_>, Vec<_>) = dialogues
        .iter()
        .cloned()
        .enumerate()
        .partition(|(i, _)| i % 10 == 9);
    (
        train.into_iter().map(|(_, d)| d).collect(),
        valid.into_iter().map(|(_, d)| d).collect(),
    )
}
