//! Paired significance tests and correlation.
//!
//! Bootstrap convention: `p` is the fraction of resamples in which system A's
//! aggregate is at least system B's, i.e. the evidence *against* "B is
//! better". Identical systems therefore give `p = 1` and a system B that wins
//! every example gives `p = 0`, matching the spec's worked examples.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::function::beta::beta_reg;

use super::{kahan_sum, PerExample, Result, StatsError};

pub const DEFAULT_RESAMPLES: usize = 1000;
pub const SIGNIFICANCE_LEVEL: f64 = 0.01;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TestKind {
    PairedBootstrap,
    TwoSidedBootstrap,
    PairedTTest,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SignificanceResult {
    pub test: TestKind,
    pub p_value: f64,
    /// Bootstrap resample count; `None` for the t-test.
    pub n_resamples: Option<usize>,
    /// t-test degrees of freedom; `None` for the bootstrap.
    pub dof: Option<f64>,
    pub significant_at_01: bool,
    /// Set when the test statistic is undefined (zero-variance differences).
    pub degenerate: bool,
}

impl SignificanceResult {
    fn new(test: TestKind, p_value: f64, n_resamples: Option<usize>, dof: Option<f64>, degenerate: bool) -> Self {
        let p_value = p_value.clamp(0.0, 1.0);
        SignificanceResult {
            test,
            p_value,
            n_resamples,
            dof,
            significant_at_01: p_value < SIGNIFICANCE_LEVEL,
            degenerate,
        }
    }
}

fn check_paired(a: &PerExample, b: &PerExample) -> Result<()> {
    if std::mem::discriminant(a) != std::mem::discriminant(b) {
        return Err(StatsError::KindMismatch(a.kind(), b.kind()));
    }
    if a.len() != b.len() {
        return Err(StatsError::LengthMismatch(a.len(), b.len()));
    }
    if a.len() < 2 {
        return Err(StatsError::TooFew {
            needed: 2,
            got: a.len(),
        });
    }
    Ok(())
}

/// Counts resamples where `agg(a) ≥ agg(b)` and where `agg(b) ≥ agg(a)`.
fn bootstrap_counts(a: &PerExample, b: &PerExample, n_resamples: usize, seed: u64) -> (usize, usize) {
    let n = a.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = vec![0usize; n];
    let (mut a_wins, mut b_wins) = (0, 0);
    for _ in 0..n_resamples {
        for slot in idx.iter_mut() {
            *slot = rng.random_range(0..n);
        }
        let sa = a.aggregate_indices(&idx);
        let sb = b.aggregate_indices(&idx);
        if sa >= sb {
            a_wins += 1;
        }
        if sb >= sa {
            b_wins += 1;
        }
    }
    (a_wins, b_wins)
}

/// One-sided paired bootstrap: small `p` means B is reliably better than A.
pub fn paired_bootstrap(a: &PerExample, b: &PerExample, n_resamples: usize, seed: u64) -> Result<SignificanceResult> {
    check_paired(a, b)?;
    if n_resamples == 0 {
        return Err(StatsError::Invalid("n_resamples must be positive".into()));
    }
    let (a_wins, _) = bootstrap_counts(a, b, n_resamples, seed);
    Ok(SignificanceResult::new(
        TestKind::PairedBootstrap,
        a_wins as f64 / n_resamples as f64,
        Some(n_resamples),
        None,
        false,
    ))
}

/// Runs the one-sided bootstrap in both directions on the same resamples and
/// reports the smaller p doubled (capped at 1).
pub fn two_sided_bootstrap(
    a: &PerExample,
    b: &PerExample,
    n_resamples: usize,
    seed: u64,
) -> Result<SignificanceResult> {
    check_paired(a, b)?;
    if n_resamples == 0 {
        return Err(StatsError::Invalid("n_resamples must be positive".into()));
    }
    let (a_wins, b_wins) = bootstrap_counts(a, b, n_resamples, seed);
    let p = 2.0 * a_wins.min(b_wins) as f64 / n_resamples as f64;
    Ok(SignificanceResult::new(
        TestKind::TwoSidedBootstrap,
        p.min(1.0),
        Some(n_resamples),
        None,
        false,
    ))
}

/// Two-sided survival probability `P(|T| ≥ |t|)` for Student's t with `dof`
/// degrees of freedom, computed through the regularized incomplete beta so
/// tiny p-values do not lose precision to `1 − cdf`.
fn t_two_sided(t: f64, dof: f64) -> f64 {
    if !t.is_finite() {
        return 0.0;
    }
    beta_reg(dof / 2.0, 0.5, dof / (dof + t * t))
}

/// Two-sided paired t-test on per-example score differences `b − a`.
pub fn paired_t_test(a: &[f64], b: &[f64]) -> Result<SignificanceResult> {
    if a.len() != b.len() {
        return Err(StatsError::LengthMismatch(a.len(), b.len()));
    }
    let n = a.len();
    if n < 2 {
        return Err(StatsError::TooFew { needed: 2, got: n });
    }
    let diffs: Vec<f64> = a.iter().zip(b).map(|(x, y)| y - x).collect();
    let mean = kahan_sum(diffs.iter().copied()) / n as f64;
    let var = kahan_sum(diffs.iter().map(|d| (d - mean) * (d - mean))) / (n - 1) as f64;
    let dof = (n - 1) as f64;
    if var == 0.0 {
        return Ok(SignificanceResult::new(
            TestKind::PairedTTest,
            1.0,
            None,
            Some(dof),
            true,
        ));
    }
    let t = mean / (var / n as f64).sqrt();
    Ok(SignificanceResult::new(
        TestKind::PairedTTest,
        t_two_sided(t, dof),
        None,
        Some(dof),
        false,
    ))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Correlation {
    pub r: f64,
    pub p_value: f64,
    pub n: usize,
}

/// Sample Pearson correlation with a two-sided p-value from the t-transform
/// `t = r·sqrt((n−2)/(1−r²))` on `n − 2` degrees of freedom.
pub fn pearson(xs: &[f64], ys: &[f64]) -> Result<Correlation> {
    if xs.len() != ys.len() {
        return Err(StatsError::LengthMismatch(xs.len(), ys.len()));
    }
    let n = xs.len();
    if n < 3 {
        return Err(StatsError::TooFew { needed: 3, got: n });
    }
    let mx = kahan_sum(xs.iter().copied()) / n as f64;
    let my = kahan_sum(ys.iter().copied()) / n as f64;
    let sxy = kahan_sum(xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)));
    let sxx = kahan_sum(xs.iter().map(|x| (x - mx) * (x - mx)));
    let syy = kahan_sum(ys.iter().map(|y| (y - my) * (y - my)));
    if sxx == 0.0 || syy == 0.0 {
        return Err(StatsError::DegenerateVariance);
    }
    let r = (sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0);
    let dof = (n - 2) as f64;
    let p_value = if r.abs() == 1.0 {
        0.0
    } else {
        t_two_sided(r * (dof / (1.0 - r * r)).sqrt(), dof)
    };
    Ok(Correlation { r, p_value, n })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, Normal};

    fn scores(v: &[f64]) -> PerExample {
        PerExample::Scores(v.to_vec())
    }

    #[test]
    fn bootstrap_identical_is_not_significant() {
        let a = scores(&[1.0, 2.0, 3.0, 4.0]);
        let r = paired_bootstrap(&a, &a, 1000, 3).unwrap();
        assert_eq!(r.p_value, 1.0);
        assert!(!r.significant_at_01);
        assert_eq!(two_sided_bootstrap(&a, &a, 1000, 3).unwrap().p_value, 1.0);
    }

    #[test]
    fn bootstrap_dominance_hits_floor() {
        let a = scores(&[1.0, 2.0, 3.0, 4.0, 5.0]);
        let b = scores(&[2.0, 3.0, 4.0, 5.0, 6.0]);
        let r = paired_bootstrap(&a, &b, 1000, 3).unwrap();
        assert!(r.p_value < 1.0 / 1000.0);
        assert!(r.significant_at_01);
        // reversed direction: A never beats B strictly, B always ≥ A
        assert_eq!(paired_bootstrap(&b, &a, 1000, 3).unwrap().p_value, 1.0);
    }

    #[test]
    fn bootstrap_is_seed_deterministic_and_quantized() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a: Vec<f64> = (0..40).map(|_| rng.random::<f64>()).collect();
        let b: Vec<f64> = (0..40).map(|_| rng.random::<f64>()).collect();
        let r1 = paired_bootstrap(&scores(&a), &scores(&b), 1000, 9).unwrap();
        let r2 = paired_bootstrap(&scores(&a), &scores(&b), 1000, 9).unwrap();
        assert_eq!(r1.p_value.to_bits(), r2.p_value.to_bits());
        let k = r1.p_value * 1000.0;
        assert!((k - k.round()).abs() < 1e-9);
    }

    #[test]
    fn bootstrap_on_bleu_uses_pooled_statistics() {
        let refs: Vec<Vec<u32>> = vec![vec![1, 2, 3, 4], vec![5, 6, 7, 8], vec![1, 3, 5, 7]];
        let (_, good) = super::super::corpus_bleu(&refs, &refs).unwrap();
        let bad_h: Vec<Vec<u32>> = vec![vec![1, 2, 9, 9], vec![5, 9, 7, 9], vec![9, 3, 9, 7]];
        let (_, bad) = super::super::corpus_bleu(&bad_h, &refs).unwrap();
        let r = paired_bootstrap(&PerExample::Bleu(bad), &PerExample::Bleu(good), 200, 0).unwrap();
        assert_eq!(r.p_value, 0.0);
    }

    #[test]
    fn bootstrap_rejects_mismatched_inputs() {
        assert!(paired_bootstrap(&scores(&[1.0, 2.0]), &scores(&[1.0]), 10, 0).is_err());
        assert!(paired_bootstrap(&scores(&[1.0]), &scores(&[1.0]), 10, 0).is_err());
        assert!(paired_bootstrap(&scores(&[1.0, 2.0]), &PerExample::Ratios(vec![(1.0, 1.0); 2]), 10, 0).is_err());
    }

    #[test]
    // Oracle digits are kept verbatim from mpmath.
    #[allow(clippy::excessive_precision)]
    fn t_test_oracles() {
        // Reference values from mpmath (50 digits): two-sided p = I_{ν/(ν+t²)}(ν/2, 1/2).
        let a: Vec<f64> = (0..30).map(|i| ((i * 29) % 31) as f64 / 7.0).collect();
        for (shift, want) in [(0.4, 4.806864200866249759964e-6), (0.1, 0.17217844192371470447)] {
            let b: Vec<f64> = (0..30)
                .map(|i| a[i] + shift + (((i * 17) % 13) as f64 - 6.0) / 10.0)
                .collect();
            let r = paired_t_test(&a, &b).unwrap();
            assert!((r.p_value - want).abs() < 1e-9, "{} vs {want}", r.p_value);
            assert_eq!(r.dof, Some(29.0));
        }
    }

    #[test]
    fn t_test_degenerate_and_shift() {
        let a = [1.0, 2.0, 3.0];
        let r = paired_t_test(&a, &a).unwrap();
        assert!(r.degenerate && r.p_value == 1.0 && !r.significant_at_01);

        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let noise = Normal::new(0.0, 1e-3).unwrap();
        let a: Vec<f64> = (0..100).map(|_| rng.random::<f64>()).collect();
        let b: Vec<f64> = a.iter().map(|x| x + 0.5 + noise.sample(&mut rng)).collect();
        assert!(paired_t_test(&a, &b).unwrap().p_value < 1e-6);
    }

    #[test]
    // Oracle digits are kept verbatim from mpmath.
    #[allow(clippy::excessive_precision)]
    fn pearson_oracles() {
        let xs: Vec<f64> = (0..50).map(|i| ((i * 37) % 101) as f64 / 10.0).collect();
        for (slope, want_r, want_p) in [
            (0.3, 0.61888240441023695989, 1.6633544134359672907e-6),
            (0.02, 0.18718765708543580501, 0.19302613344025868064),
        ] {
            let ys: Vec<f64> = (0..50).map(|i| xs[i] * slope + ((i * 53) % 97) as f64 / 20.0).collect();
            let c = pearson(&xs, &ys).unwrap();
            assert!((c.r - want_r).abs() < 1e-12, "{}", c.r);
            assert!((c.p_value - want_p).abs() < 1e-9, "{}", c.p_value);
        }
    }

    #[test]
    fn pearson_trivial_cases() {
        let xs = [1.0, 2.0, 4.0, 8.0];
        let affine: Vec<f64> = xs.iter().map(|x| 2.0 * x + 1.0).collect();
        let neg: Vec<f64> = xs.iter().map(|x| -x).collect();
        assert!((pearson(&xs, &affine).unwrap().r - 1.0).abs() < 1e-12);
        assert!((pearson(&xs, &neg).unwrap().r + 1.0).abs() < 1e-12);
        assert_eq!(pearson(&xs, &[1.0; 4]).unwrap_err(), StatsError::DegenerateVariance);
        assert!(pearson(&xs[..2], &xs[..2]).is_err());
    }
}
