//! Experiment configuration, read from TOML.
//!
//! One file describes one experiment. Every section except `[corpus]` has
//! defaults, and unknown keys are rejected so typos fail loudly:
//!
//! ```toml
//! experiment = "prune"          # optional; must match the subcommand when given
//! seed = 0                      # master seed (corpus, init, shuffling, bootstrap, random order)
//! checkpoint = "runs/train/checkpoints/epoch_0010.ckpt"
//! metric = "bleu"               # default: the task's default metric
//!
//! [corpus]
//! task = "reversal"
//! n_symbols = 10
//! min_len = 3
//! max_len = 8
//! train_size = 4000
//! eval_size = 300
//!
//! [prune]
//! orderings = ["importance", "random"]
//! reestimate = true
//! increment = 0.1
//! ```

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use prunelab::attention::{AttentionKind, AttentionScale};
use prunelab::importance::{StatTest, DEFAULT_ESTIMATION_SAMPLES};
use prunelab::model::{CorpusSpec, ModelConfig, OptimizerSpec, Split};
use prunelab::pruning::{Ordering, PruneOptions};
use prunelab::stats::{Metric, DEFAULT_RESAMPLES};

use crate::CliError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    Train,
    AblateOne,
    AblateLayer,
    Prune,
    PruneByType,
    Dynamics,
    Correlate,
    SpeedBench,
}

impl ExperimentKind {
    pub const ALL: [ExperimentKind; 8] = [
        Self::Train,
        Self::AblateOne,
        Self::AblateLayer,
        Self::Prune,
        Self::PruneByType,
        Self::Dynamics,
        Self::Correlate,
        Self::SpeedBench,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Train => "train",
            Self::AblateOne => "ablate-one",
            Self::AblateLayer => "ablate-layer",
            Self::Prune => "prune",
            Self::PruneByType => "prune-by-type",
            Self::Dynamics => "dynamics",
            Self::Correlate => "correlate",
            Self::SpeedBench => "speed-bench",
        }
    }
}

impl fmt::Display for ExperimentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ExperimentKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        Self::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| format!("unknown experiment {s:?}"))
    }
}

/// Architecture of a freshly built model (used by `train` and by
/// `speed-bench` when no checkpoint is given).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    /// 0 means 4 × d_model.
    pub d_ff: usize,
    pub dropout: f64,
    pub attention_scale: AttentionScale,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            n_layers: 2,
            n_heads: 8,
            d_model: 64,
            d_ff: 0,
            dropout: 0.1,
            attention_scale: AttentionScale::default(),
        }
    }
}

impl ModelSection {
    pub fn model_config(&self, corpus: &CorpusSpec) -> ModelConfig {
        let d_ff = if self.d_ff == 0 { 4 * self.d_model } else { self.d_ff };
        let mut c = corpus.model_config(self.n_layers, self.n_heads, self.d_model, d_ff);
        c.dropout = self.dropout;
        c.attention_scale = self.attention_scale;
        c
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub epochs: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub warmup_steps: usize,
    pub batch_size: usize,
    /// Global gradient-norm clip; 0 disables clipping.
    pub clip_norm: f64,
    /// In-domain eval examples scored after each epoch (0 = all).
    pub eval_examples: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        let o = OptimizerSpec::default();
        TrainSection {
            epochs: 10,
            learning_rate: o.learning_rate,
            momentum: o.momentum,
            warmup_steps: o.warmup_steps,
            batch_size: o.batch_size,
            clip_norm: o.clip_norm.unwrap_or(0.0),
            eval_examples: o.eval_examples,
        }
    }
}

impl TrainSection {
    pub fn optimizer(&self, seed: u64, metric: Option<Metric>) -> OptimizerSpec {
        OptimizerSpec {
            learning_rate: self.learning_rate,
            momentum: self.momentum,
            warmup_steps: self.warmup_steps,
            batch_size: self.batch_size,
            clip_norm: (self.clip_norm > 0.0).then_some(self.clip_norm),
            seed,
            metric,
            eval_examples: self.eval_examples,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub split: Split,
    /// Leading examples of the split to use (0 = all).
    pub n_examples: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            split: Split::EvalInDomain,
            n_examples: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EstimationSection {
    pub split: Split,
    /// Seeded subsample size for the train split; leading examples otherwise.
    pub n_samples: usize,
}

impl Default for EstimationSection {
    fn default() -> Self {
        EstimationSection {
            split: Split::Train,
            n_samples: DEFAULT_ESTIMATION_SAMPLES,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TestName {
    Bootstrap,
    TTest,
    None,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblateSection {
    pub test: TestName,
    pub n_resamples: usize,
    /// Width of the Fig. 1 histogram bins, in metric points.
    pub histogram_bin: f64,
    /// Also estimate importance so the table carries raw/normalized columns.
    pub with_importance: bool,
    /// `ablate-layer`: restrict to these kinds (empty = every kind).
    pub kinds: Vec<AttentionKind>,
}

impl Default for AblateSection {
    fn default() -> Self {
        AblateSection {
            test: TestName::Bootstrap,
            n_resamples: DEFAULT_RESAMPLES,
            histogram_bin: 5.0,
            with_importance: true,
            kinds: Vec::new(),
        }
    }
}

impl AblateSection {
    pub fn stat_test(&self, seed: u64) -> StatTest {
        match self.test {
            TestName::Bootstrap => StatTest::Bootstrap {
                n_resamples: self.n_resamples,
                seed,
            },
            TestName::TTest => StatTest::TTest,
            TestName::None => StatTest::None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PruneSection {
    /// One trace per ordering (`prune`, `dynamics` uses the first).
    pub orderings: Vec<Ordering>,
    pub reestimate: bool,
    pub increment: f64,
    /// `prune-by-type`: kinds to trace (empty = every kind of the model).
    pub kinds: Vec<AttentionKind>,
}

impl Default for PruneSection {
    fn default() -> Self {
        let o = PruneOptions::default();
        PruneSection {
            orderings: vec![o.ordering],
            reestimate: o.reestimate,
            increment: o.increment,
            kinds: Vec::new(),
        }
    }
}

impl PruneSection {
    pub fn options(&self, ordering: Ordering, seed: u64) -> PruneOptions {
        PruneOptions {
            increment: self.increment,
            ordering,
            reestimate: self.reestimate,
            seed,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DynamicsSection {
    /// Directory of `epoch_NNNN.ckpt` files written by `train`.
    pub checkpoint_dir: Option<PathBuf>,
    /// Explicit checkpoint files (used when `checkpoint_dir` is absent).
    pub checkpoints: Vec<PathBuf>,
    /// Restrict to these epochs (empty = all found).
    pub epochs: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorrelateSection {
    /// Existing ablate-one tables; when both are given nothing is recomputed.
    pub table_a: Option<PathBuf>,
    pub table_b: Option<PathBuf>,
    /// Splits to sweep when tables are computed from `checkpoint`.
    pub split_a: Split,
    pub split_b: Split,
}

impl Default for CorrelateSection {
    fn default() -> Self {
        CorrelateSection {
            table_a: None,
            table_b: None,
            split_a: Split::EvalInDomain,
            split_b: Split::EvalOutDomain,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SpeedSection {
    pub batch_sizes: Vec<usize>,
    pub repeats: usize,
    pub warmup: usize,
    /// Fraction of heads structurally removed from the pruned model.
    pub prune_fraction: f64,
    /// How the removed heads are chosen (one-shot ranking).
    pub ordering: Ordering,
    /// Examples per timed pass, cycling through the eval split if needed.
    pub n_examples: usize,
}

impl Default for SpeedSection {
    fn default() -> Self {
        SpeedSection {
            batch_sizes: vec![1, 4, 16, 64],
            repeats: 6,
            warmup: 1,
            prune_fraction: 0.5,
            ordering: Ordering::Importance,
            n_examples: 256,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub experiment: Option<ExperimentKind>,
    #[serde(default)]
    pub seed: u64,
    /// Output directory (overridden by `--out`).
    #[serde(default)]
    pub out: Option<PathBuf>,
    /// Trained model to analyse.
    #[serde(default)]
    pub checkpoint: Option<PathBuf>,
    #[serde(default)]
    pub metric: Option<Metric>,
    /// Corpus seed; defaults to `seed`. Analyses of a trained checkpoint must
    /// use the corpus seed it was trained with.
    #[serde(default)]
    pub corpus_seed: Option<u64>,
    pub corpus: CorpusSpec,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub eval: EvalSection,
    #[serde(default)]
    pub estimation: EstimationSection,
    #[serde(default)]
    pub ablate: AblateSection,
    #[serde(default)]
    pub prune: PruneSection,
    #[serde(default)]
    pub dynamics: DynamicsSection,
    #[serde(default)]
    pub correlate: CorrelateSection,
    #[serde(default)]
    pub speed: SpeedSection,
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<(Self, String), CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => CliError::MissingInput(format!("config {}", path.display())),
            _ => CliError::Config(format!("cannot read {}: {e}", path.display())),
        })?;
        Ok((Self::parse(&text)?, text))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configs serialize to TOML")
    }

    pub fn corpus_seed(&self) -> u64 {
        self.corpus_seed.unwrap_or(self.seed)
    }

    /// Checks value ranges that serde cannot express.
    pub fn validate(&self, kind: ExperimentKind) -> Result<(), CliError> {
        let fail = |msg: String| Err(CliError::Config(msg));
        if let Some(k) = self.experiment {
            if k != kind {
                return fail(format!("config is for `{k}` but `{kind}` was requested"));
            }
        }
        if !(self.prune.increment > 0.0 && self.prune.increment <= 1.0) {
            return fail(format!(
                "prune.increment must be in (0, 1], got {}",
                self.prune.increment
            ));
        }
        if self.prune.orderings.is_empty() {
            return fail("prune.orderings must list at least one ordering".into());
        }
        if !(self.speed.prune_fraction >= 0.0 && self.speed.prune_fraction <= 1.0) {
            return fail(format!(
                "speed.prune_fraction must be in [0, 1], got {}",
                self.speed.prune_fraction
            ));
        }
        if self.speed.batch_sizes.is_empty() || self.speed.batch_sizes.contains(&0) {
            return fail("speed.batch_sizes must be non-empty and positive".into());
        }
        if self.speed.repeats < 2 || self.speed.n_examples == 0 {
            return fail("speed.repeats must be ≥ 2 and speed.n_examples > 0".into());
        }
        if self.ablate.histogram_bin.partial_cmp(&0.0) != Some(std::cmp::Ordering::Greater) {
            return fail("ablate.histogram_bin must be positive".into());
        }
        if self.ablate.test == TestName::Bootstrap && self.ablate.n_resamples == 0 {
            return fail("ablate.n_resamples must be positive".into());
        }
        if self.estimation.n_samples == 0 {
            return fail("estimation.n_samples must be positive".into());
        }
        if kind == ExperimentKind::Train && self.train.epochs == 0 {
            return fail("train.epochs must be positive".into());
        }
        if let Some(m) = self.metric {
            let task = self.corpus.task.task();
            if !task.supports(m) {
                return fail(format!("metric {m} does not apply to a {task:?} corpus"));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
        [corpus]
        task = "reversal"
        n_symbols = 6
        min_len = 2
        max_len = 4
        train_size = 20
        eval_size = 10
    "#;

    #[test]
    fn minimal_config_gets_defaults_and_round_trips() {
        let c = ExperimentConfig::parse(MINIMAL).unwrap();
        assert_eq!(c.seed, 0);
        assert_eq!(c.speed.batch_sizes, vec![1, 4, 16, 64]);
        assert_eq!(c.prune.orderings, vec![Ordering::Importance]);
        assert!(c.prune.reestimate);
        let back = ExperimentConfig::parse(&c.to_toml()).unwrap();
        assert_eq!(back, c);
        c.validate(ExperimentKind::Prune).unwrap();
    }

    #[test]
    fn unknown_keys_and_bad_values_are_config_errors() {
        let typo = format!("seeed = 1\n{MINIMAL}");
        assert!(matches!(ExperimentConfig::parse(&typo), Err(CliError::Config(_))));
        let mut c = ExperimentConfig::parse(MINIMAL).unwrap();
        c.prune.increment = 0.0;
        assert!(matches!(c.validate(ExperimentKind::Prune), Err(CliError::Config(_))));
        let mut c = ExperimentConfig::parse(MINIMAL).unwrap();
        c.metric = Some(Metric::ClassificationAccuracy);
        assert!(matches!(c.validate(ExperimentKind::Prune), Err(CliError::Config(_))));
        let mut c = ExperimentConfig::parse(MINIMAL).unwrap();
        c.experiment = Some(ExperimentKind::Train);
        assert!(matches!(c.validate(ExperimentKind::Prune), Err(CliError::Config(_))));
    }

    #[test]
    fn sections_parse() {
        let text = format!(
            "{MINIMAL}\n[prune]\norderings = [\"importance\", \"random\", \"oracle-delta\"]\nreestimate = false\n\
             [ablate]\ntest = \"t-test\"\n[speed]\nbatch_sizes = [8]\nrepeats = 3\n"
        );
        let c = ExperimentConfig::parse(&text).unwrap();
        assert_eq!(c.prune.orderings.len(), 3);
        assert!(!c.prune.reestimate);
        assert_eq!(c.ablate.stat_test(0), StatTest::TTest);
        assert_eq!(c.speed.batch_sizes, vec![8]);
    }
}
