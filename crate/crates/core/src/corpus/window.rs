use super::dialogue::Dialogue;
use super::vocab::{Vocabulary, EOS, SEP};

/// Context windowing limits.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct WindowConfig {
    pub max_context_utterances: usize,
    /// Applied to every context utterance and to the response.
    pub max_utterance_words: usize,
}

impl Default for WindowConfig {
    fn default() -> Self {
        Self {
            max_context_utterances: 4,
            max_utterance_words: 20,
        }
    }
}

impl WindowConfig {
    /// Longest token sequence `context ⊕ response` a sample can have:
    /// every context utterance followed by SEP, then response and EOS.
    pub fn max_sequence_len(&self) -> usize {
        self.max_context_utterances * (self.max_utterance_words + 1) + self.max_utterance_words + 1
    }
}

/// A windowed (context, response) pair at the word level.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TextSample {
    pub context: Vec<Vec<String>>,
    pub response: Vec<String>,
}

/// One sample per response position `r ≥ 2` (1-based): the context is the
/// up-to-`max_context_utterances` utterances immediately before `r`.
pub fn window_samples(d: &Dialogue, cfg: &WindowConfig) -> Vec<TextSample> {
    let cut = |u: &Vec<String>| u.iter().take(cfg.max_utterance_words).cloned().collect();
    (1..d.utterances.len())
        .map(|r| {
            let from = r.saturating_sub(cfg.max_context_utterances);
            TextSample {
                context: d.utterances[from..r].iter().map(cut).collect(),
                response: cut(&d.utterances[r]),
            }
        })
        .collect()
}

/// A tokenized sample.
///
/// The model sequence is `context_tokens ⊕ response_tokens`, where
/// `context_tokens` is every context utterance followed by SEP and
/// `response_tokens` ends with EOS.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DialogueSample {
    pub context_utterances: Vec<Vec<usize>>,
    pub context_tokens: Vec<usize>,
    pub response_tokens: Vec<usize>,
    /// Over the concatenated sequence; true exactly on response positions.
    pub response_mask: Vec<bool>,
}

impl DialogueSample {
    pub fn from_ids(context_utterances: Vec<Vec<usize>>, response: Vec<usize>) -> Self {
        let context_tokens: Vec<usize> = context_utterances
            .iter()
            .flat_map(|u| u.iter().copied().chain(std::iter::once(SEP)))
            .collect();
        let mut response_tokens = response;
        response_tokens.push(EOS);
        let response_mask = std::iter::repeat_n(false, context_tokens.len())
            .chain(std::iter::repeat_n(true, response_tokens.len()))
            .collect();
        Self {
            context_utterances,
            context_tokens,
            response_tokens,
            response_mask,
        }
    }

    pub fn sequence(&self) -> Vec<usize> {
        [self.context_tokens.as_slice(), &self.response_tokens].concat()
    }

    pub fn len(&self) -> usize {
        self.context_tokens.len() + self.response_tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Response words without the trailing EOS.
    pub fn response_words(&self) -> &[usize] {
        &self.response_tokens[..self.response_tokens.len() - 1]
    }
}

impl Vocabulary {
    pub fn encode_sample(&self, s: &TextSample) -> DialogueSample {
        DialogueSample::from_ids(
            s.context.iter().map(|u| self.encode_words(u)).collect(),
            self.encode_words(&s.response),
        )
    }
}

/// Windows and encodes a whole corpus.
pub fn encode_corpus(
    dialogues: &[Dialogue],
    vocab: &Vocabulary,
    cfg: &WindowConfig,
) -> Vec<DialogueSample> {
    dialogues
        .iter()
        .flat_map(|d| window_samples(d, cfg))
        .map(|s| vocab.encode_sample(&s))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dialogue(n: usize, words_each: usize) -> Dialogue {
        Dialogue::new(
            (0..n)
                .map(|u| (0..words_each).map(|w| format!("u{u}w{w}")).collect())
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn two_utterances_give_one_sample() {
        let s = window_samples(&dialogue(2, 3), &WindowConfig::default());
        assert_eq!(s.len(), 1);
        assert_eq!(s[0].context, vec![dialogue(2, 3).utterances[0].clone()]);
    }

    #[test]
    fn window_keeps_four_preceding_utterances() {
        let d = dialogue(6, 2);
        let s = window_samples(&d, &WindowConfig::default());
        assert_eq!(s.len(), 5);
        let last = s.last().unwrap();
        assert_eq!(last.context, d.utterances[1..5].to_vec());
        assert_eq!(last.response, d.utterances[5]);
    }

    #[test]
    fn long_utterances_are_truncated() {
        let d = dialogue(2, 25);
        let s = &window_samples(&d, &WindowConfig::default())[0];
        assert_eq!(s.context[0], d.utterances[0][..20].to_vec());
        assert_eq!(s.response.len(), 20);
    }

    #[test]
    fn sample_layout_and_mask() {
        let s = DialogueSample::from_ids(vec![vec![10, 11], vec![12]], vec![13, 14]);
        assert_eq!(s.context_tokens, vec![10, 11, SEP, 12, SEP]);
        assert_eq!(s.response_tokens, vec![13, 14, EOS]);
        assert_eq!(s.sequence().len(), s.response_mask.len());
        assert_eq!(s.response_mask.iter().filter(|&&m| m).count(), 3);
        assert!(s.response_mask[5..].iter().all(|&m| m));
    }

    mod props {
        use proptest::prelude::*;

        use super::*;

        proptest! {
            #[test]
            fn window_limits_and_sample_count_hold(
                lens in prop::collection::vec(1usize..30, 2..12),
            ) {
                let d = Dialogue::new(
                    lens.iter()
                        .enumerate()
                        .map(|(u, &n)| (0..n).map(|w| format!("{u}-{w}")).collect())
                        .collect(),
                )
                .unwrap();
                let cfg = WindowConfig::default();
                let samples = window_samples(&d, &cfg);
                prop_assert_eq!(samples.len(), lens.len() - 1);
                for s in &samples {
                    prop_assert!(!s.context.is_empty() && s.context.len() <= 4);
                    prop_assert!(s.context.iter().all(|u| u.len() <= 20));
                    prop_assert!(s.response.len() <= 20);
                }
            }
        }
    }
}
