//! BLEU-n and ROUGE-L over lowercased word tokens (punctuation dropped).

use std::collections::HashMap;

use crate::decoder::split_words;

pub fn words(text: &str) -> Vec<String> {
    split_words(text)
        .into_iter()
        .filter(|w| w.chars().any(char::is_alphanumeric))
        .collect()
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut m = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

/// Sentence BLEU-n: clipped modified precisions for orders 1..=n, geometric
/// mean with uniform weights, times the brevity penalty (closest reference
/// length, shorter on ties).
pub fn bleu(candidate: &str, references: &[&str], n: usize) -> f64 {
    assert!((1..=4).contains(&n), "BLEU order must be 1..=4");
    let cand = words(candidate);
    if cand.is_empty() || references.is_empty() {
        return 0.0;
    }
    let refs: Vec<Vec<String>> = references.iter().map(|r| words(r)).collect();
    let mut log_sum = 0.0;
    for order in 1..=n {
        let counts = ngram_counts(&cand, order);
        let total: usize = counts.values().sum();
        if total == 0 {
            return 0.0;
        }
        let ref_counts: Vec<_> = refs.iter().map(|r| ngram_counts(r, order)).collect();
        let clipped: usize = counts
            .iter()
            .map(|(g, &c)| {
                let max_ref = ref_counts.iter().map(|rc| rc.get(g).copied().unwrap_or(0)).max().unwrap_or(0);
                c.min(max_ref)
            })
            .sum();
        if clipped == 0 {
            return 0.0;
        }
        log_sum += (clipped as f64 / total as f64).ln();
    }
    let c = cand.len() as f64;
    let r = refs
        .iter()
        .map(|r| r.len())
        .min_by_key(|&l| ((l as isize - cand.len() as isize).abs(), l))
        .unwrap_or(0) as f64;
    let bp = if c > r { 1.0 } else { (1.0 - r / c).exp() };
    bp * (log_sum / n as f64).exp()
}

fn lcs(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    for x in a {
        let mut cur = vec![0usize; b.len() + 1];
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { cur[j].max(prev[j + 1]) };
        }
        prev = cur;
    }
    prev[b.len()]
}

pub const ROUGE_BETA: f64 = 1.2;

/// ROUGE-L: best LCS precision and recall over references, combined as
/// `(1+β²)PR/(R+β²P)` with β = 1.2.
pub fn rouge_l(candidate: &str, references: &[&str]) -> f64 {
    let cand = words(candidate);
    if cand.is_empty() || references.is_empty() {
        return 0.0;
    }
    let (mut p, mut r) = (0.0f64, 0.0f64);
    for reference in references {
        let rw = words(reference);
        if rw.is_empty() {
            continue;
        }
        let l = lcs(&cand, &rw) as f64;
        p = p.max(l / cand.len() as f64);
        r = r.max(l / rw.len() as f64);
    }
    if p == 0.0 || r == 0.0 {
        return 0.0;
    }
    let b2 = ROUGE_BETA * ROUGE_BETA;
    (1.0 + b2) * p * r / (r + b2 * p)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_and_disjoint() {
        let s = "Two zebras in a field.";
        for n in 1..=4 {
            assert!((bleu(s, &[s], n) - 1.0).abs() < 1e-12);
        }
        assert!((rouge_l(s, &[s]) - 1.0).abs() < 1e-12);
        assert_eq!(bleu("a bus", &["two zebras"], 1), 0.0);
        assert_eq!(bleu("", &[s], 1), 0.0);
        assert_eq!(rouge_l("", &[s]), 0.0);
    }

    #[test]
    fn worked_example() {
        // candidate: the cat the cat on the mat (7 words)
        // reference: the cat is on the mat (6 words)
        let c = "the cat the cat on the mat";
        let r = "the cat is on the mat";
        // unigrams: the×3 (clip 2), cat×2 (clip 1), on 1, mat 1 → 5/7
        // bigrams: the-cat×2 (clip 1), cat-the 0, cat-on 0, on-the 1, the-mat 1 → 3/6
        let p1: f64 = 5.0 / 7.0;
        let p2: f64 = 3.0 / 6.0;
        assert!((bleu(c, &[r], 1) - p1).abs() < 1e-12);
        assert!((bleu(c, &[r], 2) - (p1 * p2).sqrt()).abs() < 1e-12);
        // brevity penalty applies when the candidate is shorter
        let short = "the cat";
        assert!((bleu(short, &[r], 1) - (1.0f64 - 6.0 / 2.0).exp()).abs() < 1e-12);
        // LCS(c, r) = the cat on the mat = 5
        let (p, rc) = (5.0 / 7.0, 5.0 / 6.0);
        let b2 = 1.44;
        assert!((rouge_l(c, &[r]) - (1.0 + b2) * p * rc / (rc + b2 * p)).abs() < 1e-12);
    }

    #[test]
    fn bleu_is_monotone_in_order() {
        let c = "there are two zebras in the field with a person";
        let r = ["Two zebras in a field, with a person.", "There are two zebras in the savanna."];
        let mut last = 1.0;
        for n in 1..=4 {
            let b = bleu(c, &r, n);
            assert!(b <= last + 1e-12);
            last = b;
        }
    }
}
