//! Inference-speed benchmark (Table 3 analog).
//!
//! Both models see identical, pre-built batches in identical order; only the
//! teacher-forced forward pass sits inside the monotonic-clock window. Timed
//! runs alternate which model goes first to cancel drift, and warm-up passes
//! are discarded. Runs single-stream.

use std::fmt::Write as _;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use statrs::statistics::{Data, OrderStatistics, Statistics};

use prunelab::model::{Batch, Example, TransformerModel};

use crate::{CliError, Result};

/// Throughput over repeated timed passes, in examples per second.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Throughput {
    pub mean: f64,
    pub sd: f64,
    pub median: f64,
    pub runs: Vec<f64>,
}

impl Throughput {
    fn from_runs(runs: Vec<f64>) -> Self {
        Throughput {
            mean: runs.iter().mean(),
            sd: runs.iter().std_dev(),
            median: Data::new(runs.clone()).median(),
            runs,
        }
    }

    /// Relative standard deviation `sd / mean`.
    pub fn rsd(&self) -> f64 {
        self.sd / self.mean
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpeedRow {
    pub batch_size: usize,
    pub original: Throughput,
    pub pruned: Throughput,
    /// `100 × (pruned / original − 1)` on mean throughput.
    pub speedup_pct: f64,
    /// Two standard deviations of the speedup estimate, in percent:
    /// `2 · 100 · sqrt(rsd_original² + rsd_pruned²)` (delta method).
    pub noise_band_pct: f64,
}

impl SpeedRow {
    pub fn within_noise(&self) -> bool {
        self.speedup_pct.abs() < self.noise_band_pct
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpeedReport {
    pub n_examples: usize,
    pub repeats: usize,
    pub original_heads: usize,
    pub pruned_heads: usize,
    pub original_params: usize,
    pub pruned_params: usize,
    pub rows: Vec<SpeedRow>,
}

pub const SPEED_COLUMNS: [&str; 10] = [
    "batch_size",
    "original_mean",
    "original_sd",
    "original_median",
    "pruned_mean",
    "pruned_sd",
    "pruned_median",
    "repeats",
    "speedup_pct",
    "noise_band_pct",
];

impl SpeedReport {
    pub fn largest_batch(&self) -> Option<&SpeedRow> {
        self.rows.iter().max_by_key(|r| r.batch_size)
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "# n_examples={}", self.n_examples);
        let _ = writeln!(out, "# original_heads={}", self.original_heads);
        let _ = writeln!(out, "# pruned_heads={}", self.pruned_heads);
        let _ = writeln!(out, "# original_params={}", self.original_params);
        let _ = writeln!(out, "# pruned_params={}", self.pruned_params);
        let _ = writeln!(out, "{}", SPEED_COLUMNS.join("\t"));
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{}\t{:?}\t{:?}\t{:?}\t{:?}\t{:?}\t{:?}\t{}\t{:?}\t{:?}",
                r.batch_size,
                r.original.mean,
                r.original.sd,
                r.original.median,
                r.pruned.mean,
                r.pruned.sd,
                r.pruned.median,
                r.original.runs.len(),
                r.speedup_pct,
                r.noise_band_pct
            );
        }
        out
    }
}

fn time_pass(model: &TransformerModel, batches: &[Batch], n: usize) -> Result<f64> {
    let start = Instant::now();
    for b in batches {
        std::hint::black_box(model.logits(b)?);
    }
    Ok(n as f64 / start.elapsed().as_secs_f64())
}

/// Measures forward-pass throughput of `original` and `pruned` at each batch
/// size over `n_examples` examples (cycling through `eval`). `pruned` should
/// come from `structural_slice`; masking alone does not save compute.
pub fn speed_benchmark(
    original: &TransformerModel,
    pruned: &TransformerModel,
    batch_sizes: &[usize],
    repeats: usize,
    warmup: usize,
    eval: &[Example],
    n_examples: usize,
) -> Result<SpeedReport> {
    if eval.is_empty() {
        return Err(CliError::MissingInput("empty eval split for speed benchmark".into()));
    }
    if repeats < 2 || n_examples == 0 || batch_sizes.contains(&0) {
        return Err(CliError::Config(
            "speed benchmark needs repeats ≥ 2 and positive sizes".into(),
        ));
    }
    let examples: Vec<Example> = eval.iter().cycle().take(n_examples).cloned().collect();
    let mut rows = Vec::with_capacity(batch_sizes.len());
    for &bs in batch_sizes {
        let batches = examples.chunks(bs).map(Batch::new).collect::<Result<Vec<_>, _>>()?;
        for _ in 0..warmup {
            time_pass(original, &batches, n_examples)?;
            time_pass(pruned, &batches, n_examples)?;
        }
        let mut a = Vec::with_capacity(repeats);
        let mut b = Vec::with_capacity(repeats);
        for r in 0..repeats {
            if r % 2 == 0 {
                a.push(time_pass(original, &batches, n_examples)?);
                b.push(time_pass(pruned, &batches, n_examples)?);
            } else {
                b.push(time_pass(pruned, &batches, n_examples)?);
                a.push(time_pass(original, &batches, n_examples)?);
            }
        }
        let (original_t, pruned_t) = (Throughput::from_runs(a), Throughput::from_runs(b));
        rows.push(SpeedRow {
            batch_size: bs,
            speedup_pct: 100.0 * (pruned_t.mean / original_t.mean - 1.0),
            noise_band_pct: 200.0 * (original_t.rsd().powi(2) + pruned_t.rsd().powi(2)).sqrt(),
            original: original_t,
            pruned: pruned_t,
        });
    }
    Ok(SpeedReport {
        n_examples,
        repeats,
        original_heads: original.n_heads_total(),
        pruned_heads: pruned.n_heads_total(),
        original_params: original.param_count(),
        pruned_params: pruned.param_count(),
        rows,
    })
}
