//! Evaluation metrics and the statistical machinery shared by every
//! experiment: corpus BLEU, accuracies, paired bootstrap resampling, the
//! paired t-test and Pearson correlation.

mod bleu;
mod significance;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use bleu::{corpus_bleu, pooled_score, BleuStats, MAX_ORDER, SMOOTHING_EPS};
pub use significance::{
    paired_bootstrap, paired_t_test, pearson, two_sided_bootstrap, Correlation, SignificanceResult, TestKind,
    DEFAULT_RESAMPLES, SIGNIFICANCE_LEVEL,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StatsError {
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("empty input")]
    Empty,
    #[error("need at least {needed} points, got {got}")]
    TooFew { needed: usize, got: usize },
    #[error("degenerate variance")]
    DegenerateVariance,
    #[error("per-example kinds differ: {0} vs {1}")]
    KindMismatch(&'static str, &'static str),
    #[error("{0}")]
    Invalid(String),
}

pub type Result<T, E = StatsError> = std::result::Result<T, E>;

/// The evaluation metrics of §3.1 plus the toy-translation accuracies.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Metric {
    SequenceAccuracy,
    TokenAccuracy,
    Bleu,
    ClassificationAccuracy,
}

impl Metric {
    pub fn as_str(self) -> &'static str {
        match self {
            Metric::SequenceAccuracy => "sequence-accuracy",
            Metric::TokenAccuracy => "token-accuracy",
            Metric::Bleu => "bleu",
            Metric::ClassificationAccuracy => "classification-accuracy",
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Metric {
    type Err = StatsError;
    fn from_str(s: &str) -> Result<Self> {
        [
            Metric::SequenceAccuracy,
            Metric::TokenAccuracy,
            Metric::Bleu,
            Metric::ClassificationAccuracy,
        ]
        .into_iter()
        .find(|m| m.as_str() == s)
        .ok_or_else(|| StatsError::Invalid(format!("unknown metric `{s}`")))
    }
}

/// Per-example evidence, in the form the metric's aggregation consumes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PerExample {
    /// Aggregated by arithmetic mean.
    Scores(Vec<f64>),
    /// `(numerator, denominator)` pairs aggregated as `100 · Σnum / Σden`.
    Ratios(Vec<(f64, f64)>),
    /// Sentence statistics aggregated by pooled corpus BLEU.
    Bleu(Vec<BleuStats>),
}

impl PerExample {
    pub fn len(&self) -> usize {
        match self {
            PerExample::Scores(v) => v.len(),
            PerExample::Ratios(v) => v.len(),
            PerExample::Bleu(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn kind(&self) -> &'static str {
        match self {
            PerExample::Scores(_) => "scores",
            PerExample::Ratios(_) => "ratios",
            PerExample::Bleu(_) => "bleu",
        }
    }

    /// Aggregate over all examples.
    pub fn aggregate(&self) -> f64 {
        self.aggregate_indices((0..self.len()).collect::<Vec<_>>().as_slice())
    }

    /// Aggregate over a (possibly repeating) multiset of example indices.
    pub fn aggregate_indices(&self, idx: &[usize]) -> f64 {
        if idx.is_empty() {
            return 0.0;
        }
        match self {
            PerExample::Scores(v) => kahan_sum(idx.iter().map(|&i| v[i])) / idx.len() as f64,
            PerExample::Ratios(v) => {
                let num = kahan_sum(idx.iter().map(|&i| v[i].0));
                let den = kahan_sum(idx.iter().map(|&i| v[i].1));
                if den == 0.0 {
                    0.0
                } else {
                    100.0 * num / den
                }
            }
            PerExample::Bleu(v) => pooled_score(idx.iter().map(|&i| &v[i])),
        }
    }
}

/// A scored evaluation with the per-example evidence needed for paired tests.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub metric: Metric,
    pub score: f64,
    pub per_example: PerExample,
    pub n: usize,
}

impl EvalResult {
    pub fn new(metric: Metric, per_example: PerExample) -> Result<Self> {
        if per_example.is_empty() {
            return Err(StatsError::Empty);
        }
        Ok(EvalResult {
            metric,
            score: per_example.aggregate(),
            n: per_example.len(),
            per_example,
        })
    }
}

/// Compensated summation so reduction order does not leak into results.
pub fn kahan_sum(values: impl IntoIterator<Item = f64>) -> f64 {
    let mut sum = 0.0f64;
    let mut comp = 0.0f64;
    for v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            comp += (sum - t) + v;
        } else {
            comp += (v - t) + sum;
        }
        sum = t;
    }
    sum + comp
}

/// Exact-match fraction × 100.
pub fn sequence_accuracy<T: PartialEq>(hypotheses: &[Vec<T>], references: &[Vec<T>]) -> Result<f64> {
    Ok(sequence_matches(hypotheses, references)?.aggregate())
}

/// Per-example exact-match scores (0 or 100).
pub fn sequence_matches<T: PartialEq>(hypotheses: &[Vec<T>], references: &[Vec<T>]) -> Result<PerExample> {
    check_lengths(hypotheses.len(), references.len())?;
    Ok(PerExample::Scores(
        hypotheses
            .iter()
            .zip(references)
            .map(|(h, r)| if h == r { 100.0 } else { 0.0 })
            .collect(),
    ))
}

/// Position-wise token matches against the reference, pooled over the corpus.
pub fn token_matches<T: PartialEq>(hypotheses: &[Vec<T>], references: &[Vec<T>]) -> Result<PerExample> {
    check_lengths(hypotheses.len(), references.len())?;
    Ok(PerExample::Ratios(
        hypotheses
            .iter()
            .zip(references)
            .map(|(h, r)| {
                let correct = h.iter().zip(r).filter(|(a, b)| a == b).count();
                (correct as f64, h.len().max(r.len()) as f64)
            })
            .collect(),
    ))
}

/// Label-match fraction × 100.
pub fn classification_accuracy(predictions: &[usize], labels: &[usize]) -> Result<f64> {
    Ok(classification_matches(predictions, labels)?.aggregate())
}

pub fn classification_matches(predictions: &[usize], labels: &[usize]) -> Result<PerExample> {
    check_lengths(predictions.len(), labels.len())?;
    Ok(PerExample::Scores(
        predictions
            .iter()
            .zip(labels)
            .map(|(p, l)| if p == l { 100.0 } else { 0.0 })
            .collect(),
    ))
}

fn check_lengths(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(StatsError::LengthMismatch(a, b));
    }
    if a == 0 {
        return Err(StatsError::Empty);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn accuracy_examples() {
        let refs = vec![vec![1, 2], vec![3], vec![4, 5], vec![6]];
        assert_eq!(sequence_accuracy(&refs, &refs).unwrap(), 100.0);
        let half = vec![vec![1, 2], vec![9], vec![4, 5], vec![9]];
        assert_eq!(sequence_accuracy(&half, &refs).unwrap(), 50.0);
        assert_eq!(classification_accuracy(&[1, 0, 1, 1], &[1, 1, 1, 0]).unwrap(), 50.0);
        assert!(sequence_accuracy(&refs[..1], &refs).is_err());
    }

    #[test]
    fn accuracy_matches_manual_tally_on_20() {
        let labels: Vec<usize> = (0..20).map(|i| i % 3).collect();
        let preds: Vec<usize> = (0..20).map(|i| if i % 4 == 0 { 7 } else { i % 3 }).collect();
        // i % 4 == 0 for i in 0..20 → 5 misses
        assert_eq!(classification_accuracy(&preds, &labels).unwrap(), 75.0);
    }

    #[test]
    fn token_accuracy_counts_positions() {
        let refs = vec![vec![1, 2, 3, 4]];
        let hyps = vec![vec![1, 9, 3]];
        let per = token_matches(&hyps, &refs).unwrap();
        assert_eq!(per.aggregate(), 50.0);
    }

    #[test]
    fn eval_result_aggregates_per_example() {
        let r = EvalResult::new(
            Metric::SequenceAccuracy,
            PerExample::Scores(vec![100.0, 0.0, 100.0, 100.0]),
        )
        .unwrap();
        assert_eq!(r.score, 75.0);
        assert_eq!(r.n, 4);
        assert!(EvalResult::new(Metric::Bleu, PerExample::Bleu(vec![])).is_err());
    }

    #[test]
    fn kahan_is_order_insensitive() {
        let v: Vec<f64> = (0..1000)
            .map(|i| 1.0 / (i as f64 + 1.0) * if i % 2 == 0 { 1e8 } else { 1e-8 })
            .collect();
        let fwd = kahan_sum(v.iter().copied());
        let rev = kahan_sum(v.iter().rev().copied());
        assert!((fwd - rev).abs() <= 1e-12 * fwd.abs());
    }

    #[test]
    fn metric_round_trips_through_str() {
        for m in [
            Metric::SequenceAccuracy,
            Metric::TokenAccuracy,
            Metric::Bleu,
            Metric::ClassificationAccuracy,
        ] {
            assert_eq!(m.as_str().parse::<Metric>().unwrap(), m);
        }
        assert!("nope".parse::<Metric>().is_err());
    }
}
