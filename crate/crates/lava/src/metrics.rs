//! Corpus metrics: BLEU, repeated-token rate, exact match.

use crate::error::{Error, Result};
use std::collections::HashMap;
use std::hash::Hash;

fn ngram_counts<T: Eq + Hash + Clone>(seq: &[T], n: usize) -> HashMap<Vec<T>, usize> {
    let mut counts = HashMap::new();
    if seq.len() >= n {
        for win in seq.windows(n) {
            *counts.entry(win.to_vec()).or_insert(0) += 1;
        }
    }
    counts
}

/// Corpus-level BLEU in [0, 100]: geometric mean of clipped n-gram
/// precisions up to `max_ngram`, times the brevity penalty. No smoothing: a
/// zero precision at any order zeroes the score.
pub fn bleu<T: Eq + Hash + Clone>(
    hypotheses: &[Vec<T>],
    references: &[Vec<T>],
    max_ngram: usize,
) -> Result<f64> {
    if hypotheses.len() != references.len() {
        return Err(Error::data(format!(
            "{} hypotheses against {} references",
            hypotheses.len(),
            references.len()
        )));
    }
    if references.iter().any(|r| r.is_empty()) {
        return Err(Error::data("empty reference sentence"));
    }
    assert!(max_ngram >= 1, "bleu needs max_ngram >= 1");
    let mut hyp_len = 0usize;
    let mut ref_len = 0usize;
    let mut matches = vec![0usize; max_ngram];
    let mut totals = vec![0usize; max_ngram];
    for (hyp, rf) in hypotheses.iter().zip(references) {
        hyp_len += hyp.len();
        ref_len += rf.len();
        for n in 1..=max_ngram {
            let h = ngram_counts(hyp, n);
            let r = ngram_counts(rf, n);
            for (gram, &c) in &h {
                totals[n - 1] += c;
                matches[n - 1] += c.min(r.get(gram).copied().unwrap_or(0));
            }
        }
    }
    if hyp_len == 0 {
        return Ok(0.0);
    }
    let mut log_prec_sum = 0.0;
    for n in 0..max_ngram {
        if totals[n] == 0 || matches[n] == 0 {
            return Ok(0.0);
        }
        log_prec_sum += (matches[n] as f64 / totals[n] as f64).ln();
    }
    let bp = if hyp_len >= ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    };
    Ok(100.0 * bp * (log_prec_sum / max_ngram as f64).exp())
}

/// Fraction of adjacent positions holding the same token, over the corpus.
pub fn repeated_token_rate<T: Eq>(sequences: &[Vec<T>]) -> f64 {
    let mut repeats = 0usize;
    let mut pairs = 0usize;
    for seq in sequences {
        for win in seq.windows(2) {
            pairs += 1;
            if win[0] == win[1] {
                repeats += 1;
            }
        }
    }
    if pairs == 0 {
        0.0
    } else {
        repeats as f64 / pairs as f64
    }
}

/// Fraction of hypotheses equal to their reference.
pub fn exact_match<T: Eq>(hypotheses: &[Vec<T>], references: &[Vec<T>]) -> f64 {
    assert_eq!(hypotheses.len(), references.len());
    if hypotheses.is_empty() {
        return 0.0;
    }
    let hits = hypotheses
        .iter()
        .zip(references)
        .filter(|(h, r)| h == r)
        .count();
    hits as f64 / hypotheses.len() as f64
}
