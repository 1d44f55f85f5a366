//! Generated corpora for desk-scale experiments.
//!
//! The *base language* is a templated grammar used to pre-train a backbone.
//! The *lookup* corpus is a dialogue task whose response is fully
//! determined by a key mentioned in the context, through a fixed random
//! permutation that never appears in the base language. Solving it requires
//! reading the context, which is what separates context-dependent prompts
//! from a single shared prompt.

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::dialogue::Dialogue;

const NOUNS: &[&str] = &[
    "cat", "dog", "bird", "house", "tree", "river", "car", "book", "garden", "city", "train",
    "window", "letter", "song", "boat", "market",
];
const VERBS: &[&str] = &[
    "sees", "likes", "finds", "takes", "moves", "paints", "follows", "opens", "keeps", "watches",
];
const ADJECTIVES: &[&str] = &[
    "red", "old", "small", "quiet", "bright", "green", "tall", "warm", "empty", "busy",
];
const GREETINGS: &[&str] = &["hello", "hi", "hey", "morning"];
const CLOSERS: &[&str] = &["please", "thanks", "now", "today"];

pub fn key_word(class: usize) -> String {
    format!("k{class}")
}

pub fn value_word(class: usize) -> String {
    format!("v{class}")
}

fn pick<'a>(rng: &mut ChaCha8Rng, words: &[&'a str]) -> &'a str {
    words.choose(rng).expect("non-empty word list")
}

fn base_utterance(rng: &mut ChaCha8Rng, classes: usize, previous: Option<&[String]>) -> String {
    match rng.random_range(0..6) {
        0 => format!(
            "the {} {} {} the {}",
            pick(rng, ADJECTIVES),
            pick(rng, NOUNS),
            pick(rng, VERBS),
            pick(rng, NOUNS)
        ),
        1 => format!("{} how is the {}", pick(rng, GREETINGS), pick(rng, NOUNS)),
        2 => format!(
            "the {} is near the {}",
            key_word(rng.random_range(0..classes)),
            value_word(rng.random_range(0..classes))
        ),
        3 => format!(
            "my code is {} {}",
            key_word(rng.random_range(0..classes)),
            pick(rng, CLOSERS)
        ),
        4 => format!(
            "{} is a {} {}",
            value_word(rng.random_range(0..classes)),
            pick(rng, ADJECTIVES),
            pick(rng, NOUNS)
        ),
        _ => {
            // Echo a word from the previous turn so the grammar rewards
            // attending to context.
            let echo = previous
                .and_then(|p| p.choose(rng).cloned())
                .unwrap_or_else(|| pick(rng, NOUNS).to_string());
            format!("yes the {echo} {}", pick(rng, VERBS))
        }
    }
}

/// Templated "base language" dialogues of 2–4 utterances mentioning every
/// key and value word, with no key→value association.
pub fn base_language(n_dialogues: usize, classes: usize, seed: u64) -> Vec<Dialogue> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n_dialogues)
        .map(|_| {
            let turns = rng.random_range(2..=4);
            let mut texts: Vec<String> = Vec::with_capacity(turns);
            let mut words: Vec<Vec<String>> = Vec::with_capacity(turns);
            for _ in 0..turns {
                let t = base_utterance(&mut rng, classes, words.last().map(Vec::as_slice));
                words.push(t.split_whitespace().map(str::to_string).collect());
                texts.push(t);
            }
            Dialogue::from_texts(&texts).expect("generated dialogues are valid")
        })
        .collect()
}

/// The fixed key→value permutation of the lookup task.
pub fn lookup_table(classes: usize, task_seed: u64) -> Vec<usize> {
    let mut perm: Vec<usize> = (0..classes).collect();
    perm.shuffle(&mut ChaCha8Rng::seed_from_u64(task_seed));
    perm
}

/// Two-utterance dialogues `"<greeting> my code is k<i> <closer>" → "v<π(i)>"`.
/// Keys cycle through every class so each appears equally often.
pub fn lookup_dialogues(
    n_dialogues: usize,
    classes: usize,
    task_seed: u64,
    seed: u64,
) -> Vec<Dialogue> {
    let table = lookup_table(classes, task_seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut keys: Vec<usize> = (0..n_dialogues).map(|i| i % classes).collect();
    keys.shuffle(&mut rng);
    keys.into_iter()
        .map(|key| {
            let prompt = format!(
                "{} my code is {} {}",
                pick(&mut rng, GREETINGS),
                key_word(key),
                pick(&mut rng, CLOSERS)
            );
            Dialogue::from_texts(&[prompt, value_word(table[key])]).expect("valid dialogue")
        })
        .collect()
}
