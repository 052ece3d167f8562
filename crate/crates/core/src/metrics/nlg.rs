//! Sentence-level BLEU, ROUGE and a reduced METEOR over word tokens.

use std::collections::HashMap;
use std::hash::Hash;

use serde::{Deserialize, Serialize};

fn ngram_counts<T: Eq + Hash>(tokens: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut m = HashMap::new();
    if n > 0 && tokens.len() >= n {
        for w in tokens.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

/// `(clipped matches, candidate n-gram count)` for order `n`.
fn overlap<T: Eq + Hash>(cand: &[T], reference: &[T], n: usize) -> (usize, usize) {
    let c = ngram_counts(cand, n);
    let r = ngram_counts(reference, n);
    let matched = c.iter().map(|(g, &k)| k.min(r.get(g).copied().unwrap_or(0))).sum();
    (matched, cand.len().saturating_sub(n - 1))
}

/// `exp(1 − r/c)` when the candidate is shorter than the reference, else 1.
pub fn brevity_penalty(cand_len: usize, ref_len: usize) -> f64 {
    if cand_len == 0 {
        0.0
    } else if cand_len >= ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / cand_len as f64).exp()
    }
}

/// BLEU-`n` in percent: geometric mean of modified precisions of orders
/// `1..=n` times the brevity penalty. Orders ≥ 2 use add-one smoothing.
pub fn bleu<T: Eq + Hash>(cand: &[T], reference: &[T], n: usize) -> f64 {
    assert!((1..=4).contains(&n), "bleu order must be 1..=4");
    if cand.is_empty() {
        return 0.0;
    }
    let mut log_sum = 0.0;
    for order in 1..=n {
        let (m, c) = overlap(cand, reference, order);
        let p = if order == 1 {
            m as f64 / c as f64
        } else {
            (m as f64 + 1.0) / (c as f64 + 1.0)
        };
        if p == 0.0 {
            return 0.0;
        }
        log_sum += p.ln();
    }
    100.0 * brevity_penalty(cand.len(), reference.len()) * (log_sum / n as f64).exp()
}

fn f1(p: f64, r: f64) -> f64 {
    if p + r > 0.0 {
        2.0 * p * r / (p + r)
    } else {
        0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RougeVariant {
    One,
    Two,
    L,
}

/// Length of the longest common subsequence.
pub fn lcs_len<T: Eq>(a: &[T], b: &[T]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { prev[j + 1].max(cur[j]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// ROUGE F1 in percent.
pub fn rouge<T: Eq + Hash>(cand: &[T], reference: &[T], variant: RougeVariant) -> f64 {
    let (matched, nc, nr) = match variant {
        RougeVariant::One | RougeVariant::Two => {
            let n = if variant == RougeVariant::One { 1 } else { 2 };
            let (m, c) = overlap(cand, reference, n);
            (m, c, reference.len().saturating_sub(n - 1))
        }
        RougeVariant::L => (lcs_len(cand, reference), cand.len(), reference.len()),
    };
    if nc == 0 || nr == 0 {
        return 0.0;
    }
    100.0 * f1(matched as f64 / nc as f64, matched as f64 / nr as f64)
}

/// Suffix rules `(suffix, replacement)`, tried in order; the first that
/// leaves a stem of at least three characters applies.
pub const STEM_RULES: [(&str, &str); 10] = [
    ("sses", "ss"),
    ("ies", "y"),
    ("ment", ""),
    ("ing", ""),
    ("est", ""),
    ("ed", ""),
    ("ly", ""),
    ("er", ""),
    ("es", ""),
    ("s", ""),
];

pub fn stem(word: &str) -> String {
    for (suffix, rep) in STEM_RULES {
        if let Some(base) = word.strip_suffix(suffix) {
            if suffix == "s" && base.ends_with('s') {
                continue;
            }
            if base.chars().count() >= 3 {
                return format!("{base}{rep}");
            }
        }
    }
    word.to_string()
}

/// Unigram alignment: exact matches first, then stem matches, each pass
/// taking the leftmost free reference position. Returns `(cand, ref)`
/// index pairs sorted by candidate position.
pub fn align(cand: &[&str], reference: &[&str]) -> Vec<(usize, usize)> {
    let mut used_c = vec![false; cand.len()];
    let mut used_r = vec![false; reference.len()];
    let mut pairs = Vec::new();
    let stems_c: Vec<String> = cand.iter().map(|w| stem(w)).collect();
    let stems_r: Vec<String> = reference.iter().map(|w| stem(w)).collect();
    for pass in 0..2 {
        for i in 0..cand.len() {
            if used_c[i] {
                continue;
            }
            let hit = (0..reference.len()).find(|&j| {
                !used_r[j]
                    && if pass == 0 {
                        cand[i] == reference[j]
                    } else {
                        stems_c[i] == stems_r[j]
                    }
            });
            if let Some(j) = hit {
                used_c[i] = true;
                used_r[j] = true;
                pairs.push((i, j));
            }
        }
    }
    pairs.sort_unstable();
    pairs
}

/// Number of runs of matches contiguous in both sequences.
pub fn chunks(pairs: &[(usize, usize)]) -> usize {
    if pairs.is_empty() {
        return 0;
    }
    1 + pairs
        .windows(2)
        .filter(|w| !(w[1].0 == w[0].0 + 1 && w[1].1 == w[0].1 + 1))
        .count()
}

/// METEOR without synonym tables, in percent.
pub fn meteor_lite(cand: &[&str], reference: &[&str]) -> f64 {
    let pairs = align(cand, reference);
    let m = pairs.len();
    if m == 0 {
        return 0.0;
    }
    let p = m as f64 / cand.len() as f64;
    let r = m as f64 / reference.len() as f64;
    let f_mean = 10.0 * p * r / (r + 9.0 * p);
    let penalty = 0.5 * (chunks(&pairs) as f64 / m as f64).powi(3);
    100.0 * f_mean * (1.0 - penalty)
}

/// Corpus means of the sentence-level scores, in percent.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct NlgScores {
    pub bleu: [f64; 4],
    pub rouge1: f64,
    pub rouge2: f64,
    pub rouge_l: f64,
    pub meteor: f64,
}

impl NlgScores {
    pub fn sentence(cand: &[&str], reference: &[&str]) -> Self {
        Self {
            bleu: [1, 2, 3, 4].map(|n| bleu(cand, reference, n)),
            rouge1: rouge(cand, reference, RougeVariant::One),
            rouge2: rouge(cand, reference, RougeVariant::Two),
            rouge_l: rouge(cand, reference, RougeVariant::L),
            meteor: meteor_lite(cand, reference),
        }
    }

    pub fn mean(items: &[NlgScores]) -> Self {
        let n = items.len().max(1) as f64;
        let mut out = NlgScores::default();
        for s in items {
            for k in 0..4 {
                out.bleu[k] += s.bleu[k] / n;
            }
            out.rouge1 += s.rouge1 / n;
            out.rouge2 += s.rouge2 / n;
            out.rouge_l += s.rouge_l / n;
            out.meteor += s.meteor / n;
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn w(s: &str) -> Vec<&str> {
        s.split_whitespace().collect()
    }

    #[test]
    fn bleu_brevity_example() {
        let b = bleu(&w("the cat sat"), &w("the cat sat down"), 1);
        assert!((b - 100.0 * (1.0f64 - 4.0 / 3.0).exp()).abs() < 1e-9);
    }

    #[test]
    fn rouge_l_example() {
        assert!((rouge(&w("a b c"), &w("a c"), RougeVariant::L) - 80.0).abs() < 1e-9);
        assert_eq!(rouge(&w("c b a"), &w("a b c"), RougeVariant::One), 100.0);
        assert!(rouge(&w("c b a"), &w("a b c"), RougeVariant::L) < 100.0);
    }

    #[test]
    fn meteor_two_chunks() {
        let s = meteor_lite(&w("a x b y"), &w("a q r b"));
        assert!((s - 25.0).abs() < 1e-9);
    }

    #[test]
    fn stemmer_rules() {
        assert_eq!(stem("nodules"), "nodul");
        assert_eq!(stem("glass"), "glass");
        assert_eq!(stem("opacities"), "opacity");
        assert_eq!(stem("is"), "is");
    }
}
