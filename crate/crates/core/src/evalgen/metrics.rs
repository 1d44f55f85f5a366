//! Word-level response metrics.
//!
//! * `bleu_avg` — sentence level, mean of the modified n-gram precisions
//!   for n = 1..4 times the brevity penalty; a zero match count is floored
//!   at 1e-9.
//! * `nist` — corpus level, NIST-5 with information weights estimated from
//!   the references.
//! * `rouge_l` — LCS F1.
//! * `meteor_lite` — exact then stem unigram alignment, no synonymy.

use std::collections::HashMap;

pub const BLEU_EPSILON: f64 = 1e-9;

fn ngram_counts(words: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut counts = HashMap::new();
    if words.len() >= n {
        for g in words.windows(n) {
            *counts.entry(g).or_insert(0) += 1;
        }
    }
    counts
}

/// Clipped n-gram matches and hypothesis n-gram count.
fn modified_precision(hyp: &[String], reference: &[String], n: usize) -> (usize, usize) {
    let h = ngram_counts(hyp, n);
    let r = ngram_counts(reference, n);
    let matched = h
        .iter()
        .map(|(g, &c)| c.min(r.get(g).copied().unwrap_or(0)))
        .sum();
    (matched, hyp.len().saturating_sub(n - 1))
}

pub fn brevity_penalty(hyp_len: usize, ref_len: usize) -> f64 {
    if hyp_len == 0 {
        0.0
    } else if hyp_len > ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    }
}

pub fn bleu_avg(hyp: &[String], reference: &[String]) -> f64 {
    if hyp.is_empty() {
        return 0.0;
    }
    let mean = (1..=4)
        .map(|n| {
            let (m, c) = modified_precision(hyp, reference, n);
            if c == 0 {
                BLEU_EPSILON
            } else {
                (m as f64).max(BLEU_EPSILON) / c as f64
            }
        })
        .sum::<f64>()
        / 4.0;
    brevity_penalty(hyp.len(), reference.len()) * mean
}

/// Information weight of every reference n-gram (n ≤ `max_n`):
/// `log2(count(prefix) / count(ngram))`, with the total reference word
/// count standing in for the empty prefix of a unigram.
pub fn nist_information(
    references: &[Vec<String>],
    max_n: usize,
) -> HashMap<&[String], f64> {
    let mut freq: HashMap<&[String], usize> = HashMap::new();
    for r in references {
        for n in 1..=max_n {
            for (g, c) in ngram_counts(r, n) {
                *freq.entry(g).or_insert(0) += c;
            }
        }
    }
    let total_words: usize = references.iter().map(Vec::len).sum();
    freq.iter()
        .map(|(&g, &c)| {
            let prefix = &g[..g.len() - 1];
            let numerator = if prefix.is_empty() {
                total_words
            } else {
                freq.get(prefix).copied().unwrap_or(total_words)
            };
            (g, (numerator as f64 / c as f64).log2())
        })
        .collect()
}

pub fn nist_length_penalty(ref_len: usize, hyp_len: usize) -> f64 {
    if ref_len == 0 {
        return 1.0;
    }
    let ratio = hyp_len as f64 / ref_len as f64;
    if 0.0 < ratio && ratio < 1.0 {
        // Penalty 0.5 at a length ratio of 2/3.
        let beta = 0.5f64.ln() / 1.5f64.ln().powi(2);
        (beta * ratio.ln().powi(2)).exp()
    } else {
        1.0
    }
}

/// Corpus-level NIST over paired hypotheses and references.
pub fn nist(hyps: &[Vec<String>], references: &[Vec<String>], max_n: usize) -> f64 {
    assert_eq!(hyps.len(), references.len(), "one reference per hypothesis");
    let info = nist_information(references, max_n);
    let mut score = 0.0;
    for n in 1..=max_n {
        let mut numerator = 0.0;
        let mut denominator = 0usize;
        for (h, r) in hyps.iter().zip(references) {
            let hc = ngram_counts(h, n);
            let rc = ngram_counts(r, n);
            for (g, &c) in &hc {
                let overlap = c.min(rc.get(g).copied().unwrap_or(0));
                if overlap > 0 {
                    numerator += info[g] * overlap as f64;
                }
            }
            denominator += hc.values().sum::<usize>();
        }
        if denominator > 0 {
            score += numerator / denominator as f64;
        }
    }
    let hyp_len: usize = hyps.iter().map(Vec::len).sum();
    let ref_len: usize = references.iter().map(Vec::len).sum();
    score * nist_length_penalty(ref_len, hyp_len)
}

pub fn lcs_len(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y {
                prev[j] + 1
            } else {
                cur[j].max(prev[j + 1])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

pub fn rouge_l(hyp: &[String], reference: &[String]) -> f64 {
    let lcs = lcs_len(hyp, reference);
    if lcs == 0 {
        return 0.0;
    }
    let p = lcs as f64 / hyp.len() as f64;
    let r = lcs as f64 / reference.len() as f64;
    2.0 * p * r / (p + r)
}

/// Strips one of `ing`, `ed`, `es`, `s` (longest first, keeping at least
/// two characters), then undoubles a doubled final consonant.
pub fn stem(word: &str) -> String {
    let mut s = word;
    for suffix in ["ing", "ed", "es", "s"] {
        if let Some(rest) = s.strip_suffix(suffix) {
            if rest.chars().count() >= 2 {
                s = rest;
                break;
            }
        }
    }
    let chars: Vec<char> = s.chars().collect();
    let n = chars.len();
    if n >= 3 && chars[n - 1] == chars[n - 2] && !"aeiou".contains(chars[n - 1]) {
        chars[..n - 1].iter().collect()
    } else {
        s.to_string()
    }
}

/// Greedy left-to-right alignment: exact matches first, then stems.
/// Returns `(hyp index, ref index)` pairs sorted by hypothesis position.
pub fn meteor_alignment(hyp: &[String], reference: &[String]) -> Vec<(usize, usize)> {
    let mut ref_used = vec![false; reference.len()];
    let mut hyp_used = vec![false; hyp.len()];
    let mut pairs = Vec::new();
    let stage = |key: &dyn Fn(&str) -> String,
                 hyp_used: &mut Vec<bool>,
                 ref_used: &mut Vec<bool>,
                 pairs: &mut Vec<(usize, usize)>| {
        let ref_keys: Vec<String> = reference.iter().map(|w| key(w)).collect();
        for (i, h) in hyp.iter().enumerate() {
            if hyp_used[i] {
                continue;
            }
            let k = key(h);
            if let Some(j) = (0..reference.len()).find(|&j| !ref_used[j] && ref_keys[j] == k) {
                hyp_used[i] = true;
                ref_used[j] = true;
                pairs.push((i, j));
            }
        }
    };
    stage(&|w| w.to_string(), &mut hyp_used, &mut ref_used, &mut pairs);
    stage(&stem, &mut hyp_used, &mut ref_used, &mut pairs);
    pairs.sort_unstable();
    pairs
}

pub fn meteor_lite(hyp: &[String], reference: &[String]) -> f64 {
    let pairs = meteor_alignment(hyp, reference);
    let m = pairs.len();
    if m == 0 {
        return 0.0;
    }
    let chunks = 1 + pairs
        .windows(2)
        .filter(|w| !(w[1].0 == w[0].0 + 1 && w[1].1 == w[0].1 + 1))
        .count();
    let p = m as f64 / hyp.len() as f64;
    let r = m as f64 / reference.len() as f64;
    let fmean = 10.0 * p * r / (r + 9.0 * p);
    let penalty = 0.5 * (chunks as f64 / m as f64).powi(3);
    fmean * (1.0 - penalty)
}

pub fn avg_length(hyps: &[Vec<String>]) -> f64 {
    if hyps.is_empty() {
        return 0.0;
    }
    hyps.iter().map(Vec::len).sum::<usize>() as f64 / hyps.len() as f64
}
