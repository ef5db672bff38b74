//! Corpus-level BLEU-4 over token sequences.
//!
//! Clipped n-gram precisions for n = 1..4 are pooled over the corpus, combined
//! by geometric mean and multiplied by the brevity penalty
//! `min(1, exp(1 − r/c))`. A zero match count for n ≥ 2 is replaced by
//! [`SMOOTHING_EPS`] so that short sequences do not collapse the score to zero.

use std::collections::HashMap;
use std::hash::Hash;

use serde::{Deserialize, Serialize};

use super::{Result, StatsError};

pub const MAX_ORDER: usize = 4;
pub const SMOOTHING_EPS: f64 = 0.1;

/// Per-sentence sufficient statistics; corpus BLEU is a function of their sum.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BleuStats {
    pub matches: [u64; MAX_ORDER],
    pub totals: [u64; MAX_ORDER],
    pub hyp_len: u64,
    pub ref_len: u64,
}

impl BleuStats {
    pub fn from_pair<T: Eq + Hash>(hyp: &[T], reference: &[T]) -> Self {
        let mut s = BleuStats {
            hyp_len: hyp.len() as u64,
            ref_len: reference.len() as u64,
            ..Default::default()
        };
        for n in 1..=MAX_ORDER {
            let ref_counts = ngram_counts(reference, n);
            let hyp_counts = ngram_counts(hyp, n);
            s.totals[n - 1] = hyp.len().saturating_sub(n - 1) as u64;
            s.matches[n - 1] = hyp_counts
                .iter()
                .map(|(g, &c)| c.min(ref_counts.get(g).copied().unwrap_or(0)))
                .sum();
        }
        s
    }

    pub fn add(&mut self, other: &BleuStats) {
        for n in 0..MAX_ORDER {
            self.matches[n] += other.matches[n];
            self.totals[n] += other.totals[n];
        }
        self.hyp_len += other.hyp_len;
        self.ref_len += other.ref_len;
    }

    /// BLEU in `[0, 100]` from pooled statistics.
    pub fn score(&self) -> f64 {
        if self.hyp_len == 0 {
            return 0.0;
        }
        let mut log_sum = 0.0;
        for n in 0..MAX_ORDER {
            let total = self.totals[n];
            let matched = self.matches[n] as f64;
            let p = if n == 0 {
                if matched == 0.0 {
                    return 0.0;
                }
                matched / total as f64
            } else if total == 0 {
                // no n-grams of this order anywhere in the hypotheses
                SMOOTHING_EPS
            } else if matched == 0.0 {
                SMOOTHING_EPS / total as f64
            } else {
                matched / total as f64
            };
            log_sum += p.ln();
        }
        let c = self.hyp_len as f64;
        let r = self.ref_len as f64;
        let bp = if c >= r { 1.0 } else { (1.0 - r / c).exp() };
        (100.0 * bp * (log_sum / MAX_ORDER as f64).exp()).clamp(0.0, 100.0)
    }
}

fn ngram_counts<T: Eq + Hash>(tokens: &[T], n: usize) -> HashMap<&[T], u64> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

/// Corpus BLEU plus the per-sentence statistics it was pooled from.
pub fn corpus_bleu<T: Eq + Hash>(hypotheses: &[Vec<T>], references: &[Vec<T>]) -> Result<(f64, Vec<BleuStats>)> {
    if hypotheses.len() != references.len() {
        return Err(StatsError::LengthMismatch(hypotheses.len(), references.len()));
    }
    if hypotheses.is_empty() {
        return Err(StatsError::Empty);
    }
    if references.iter().any(Vec::is_empty) {
        return Err(StatsError::Invalid("references must be non-empty".into()));
    }
    let stats: Vec<BleuStats> = hypotheses
        .iter()
        .zip(references)
        .map(|(h, r)| BleuStats::from_pair(h, r))
        .collect();
    Ok((pooled_score(stats.iter()), stats))
}

pub fn pooled_score<'a>(stats: impl IntoIterator<Item = &'a BleuStats>) -> f64 {
    let mut total = BleuStats::default();
    for s in stats {
        total.add(s);
    }
    total.score()
}
