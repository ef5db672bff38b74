//! Synthetic toy tasks standing in for WMT / MNLI.
//!
//! Translation tasks map a symbol sequence to a target sequence (remapped
//! copy, reversal, sorting). The classification task asks whether sequence B
//! is a scrambled subset of sequence A. The out-of-domain split draws symbols
//! from a Zipf distribution over a seeded symbol ranking instead of the
//! uniform in-domain distribution. Splits are disjoint by construction: every
//! input sequence is generated at most once across the whole corpus.

use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::{ModelConfig, Task};
use super::{ModelError, Result, BOS, FIRST_CONTENT, SEP};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskSpec {
    /// Copy through a fixed seeded permutation of the symbols.
    RemappedCopy,
    Reversal,
    /// Output the source symbols in ascending order.
    Sorted,
    /// Label 1 when B is a scrambled subset of A.
    PairMatch,
}

impl TaskSpec {
    pub fn task(self) -> Task {
        match self {
            TaskSpec::PairMatch => Task::Classification,
            _ => Task::Translation,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusSpec {
    pub task: TaskSpec,
    /// Number of content symbols (vocabulary minus special tokens).
    pub n_symbols: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub train_size: usize,
    pub eval_size: usize,
    /// Zipf exponent of the out-of-domain symbol distribution.
    #[serde(default = "default_zipf")]
    pub ood_zipf: f64,
}

fn default_zipf() -> f64 {
    1.5
}

impl CorpusSpec {
    pub fn new(task: TaskSpec) -> Self {
        CorpusSpec {
            task,
            n_symbols: 10,
            min_len: 3,
            max_len: 8,
            train_size: 4000,
            eval_size: 300,
            ood_zipf: default_zipf(),
        }
    }

    pub fn vocab_size(&self) -> usize {
        FIRST_CONTENT + self.n_symbols
    }

    pub fn n_classes(&self) -> usize {
        2
    }

    /// Longest model-side sequence: translation adds BOS/EOS, classification
    /// packs `BOS A SEP B`.
    pub fn model_max_len(&self) -> usize {
        match self.task.task() {
            Task::Translation => self.max_len + 1,
            Task::Classification => 2 * self.max_len + 2,
        }
    }

    /// A model config sized for this corpus with the given architecture.
    pub fn model_config(&self, n_layers: usize, n_heads: usize, d_model: usize, d_ff: usize) -> ModelConfig {
        let mut c = match self.task.task() {
            Task::Translation => ModelConfig::translator(self.vocab_size(), self.model_max_len()),
            Task::Classification => ModelConfig::classifier(self.vocab_size(), self.n_classes(), self.model_max_len()),
        };
        c.n_layers = n_layers;
        c.n_heads = n_heads;
        c.d_model = d_model;
        c.d_ff = d_ff;
        c
    }

    fn validate(&self) -> Result<()> {
        let small = |msg: String| Err(ModelError::VocabularyTooSmall(msg));
        if self.min_len == 0 || self.min_len > self.max_len {
            return Err(ModelError::InvalidConfig(format!(
                "sequence lengths must satisfy 1 ≤ min_len ≤ max_len, got {}..={}",
                self.min_len, self.max_len
            )));
        }
        if self.n_symbols < 2 {
            return small(format!("{} symbols; every task needs at least 2", self.n_symbols));
        }
        if self.task == TaskSpec::PairMatch && self.n_symbols <= self.max_len {
            return small(format!(
                "pair matching needs more symbols ({}) than the longest sequence ({}) so negatives exist",
                self.n_symbols, self.max_len
            ));
        }
        if self.ood_zipf.is_nan() || self.ood_zipf <= 0.0 {
            return Err(ModelError::InvalidConfig(format!(
                "ood_zipf must be positive, got {}",
                self.ood_zipf
            )));
        }
        let total = self.train_size + 2 * self.eval_size;
        let distinct: f64 = (self.min_len..=self.max_len)
            .map(|l| (self.n_symbols as f64).powi(l as i32))
            .sum();
        if distinct < 2.0 * total as f64 {
            return small(format!(
                "{} symbols at lengths {}..={} give {distinct} distinct inputs; {total} requested",
                self.n_symbols, self.min_len, self.max_len
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Example {
    /// Content-token sequences without BOS/EOS.
    Translation { source: Vec<usize>, target: Vec<usize> },
    /// Full encoder input (`BOS A SEP B`) and class label.
    Classification { tokens: Vec<usize>, label: usize },
}

impl Example {
    pub fn input(&self) -> &[usize] {
        match self {
            Example::Translation { source, .. } => source,
            Example::Classification { tokens, .. } => tokens,
        }
    }

    pub fn task(&self) -> Task {
        match self {
            Example::Translation { .. } => Task::Translation,
            Example::Classification { .. } => Task::Classification,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Split {
    Train,
    EvalInDomain,
    EvalOutDomain,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::EvalInDomain => "eval-in-domain",
            Split::EvalOutDomain => "eval-out-domain",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Corpus {
    pub spec: CorpusSpec,
    pub seed: u64,
    pub train: Vec<Example>,
    pub eval_in_domain: Vec<Example>,
    pub eval_out_domain: Vec<Example>,
}

impl Corpus {
    pub fn split(&self, split: Split) -> &[Example] {
        match split {
            Split::Train => &self.train,
            Split::EvalInDomain => &self.eval_in_domain,
            Split::EvalOutDomain => &self.eval_out_domain,
        }
    }

    pub fn task(&self) -> Task {
        self.spec.task.task()
    }

    /// A seeded subsample of the training split (all of it when `n` exceeds its size).
    pub fn train_subset(&self, n: usize, seed: u64) -> Vec<Example> {
        let mut idx: Vec<usize> = (0..self.train.len()).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        idx.truncate(n);
        idx.sort_unstable();
        idx.into_iter().map(|i| self.train[i].clone()).collect()
    }
}

/// Content-symbol sampler: uniform (in-domain) or Zipf over a ranking (out-of-domain).
struct SymbolDist {
    cumulative: Vec<f64>,
    symbols: Vec<usize>,
}

impl SymbolDist {
    fn uniform(n: usize) -> Self {
        Self::from_weights((0..n).collect(), vec![1.0; n])
    }

    fn zipf(n: usize, exponent: f64, rng: &mut ChaCha8Rng) -> Self {
        let mut ranking: Vec<usize> = (0..n).collect();
        ranking.shuffle(rng);
        let weights = (1..=n).map(|r| (r as f64).powf(-exponent)).collect();
        Self::from_weights(ranking, weights)
    }

    fn from_weights(symbols: Vec<usize>, weights: Vec<f64>) -> Self {
        let total: f64 = weights.iter().sum();
        let mut acc = 0.0;
        let cumulative = weights
            .iter()
            .map(|w| {
                acc += w / total;
                acc
            })
            .collect();
        SymbolDist { cumulative, symbols }
    }

    fn sample(&self, rng: &mut ChaCha8Rng) -> usize {
        let u: f64 = rng.random();
        let i = self.cumulative.partition_point(|&c| c <= u).min(self.symbols.len() - 1);
        FIRST_CONTENT + self.symbols[i]
    }

    fn sequence(&self, len: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
        (0..len).map(|_| self.sample(rng)).collect()
    }
}

struct Generator<'a> {
    spec: &'a CorpusSpec,
    remap: Vec<usize>,
    seen: HashSet<Vec<usize>>,
}

impl Generator<'_> {
    fn example(&self, dist: &SymbolDist, rng: &mut ChaCha8Rng) -> Example {
        let len = rng.random_range(self.spec.min_len..=self.spec.max_len);
        let source = dist.sequence(len, rng);
        match self.spec.task {
            TaskSpec::RemappedCopy => Example::Translation {
                target: source.iter().map(|&t| self.remap[t - FIRST_CONTENT]).collect(),
                source,
            },
            TaskSpec::Reversal => Example::Translation {
                target: source.iter().rev().copied().collect(),
                source,
            },
            TaskSpec::Sorted => {
                let mut target = source.clone();
                target.sort_unstable();
                Example::Translation { source, target }
            }
            TaskSpec::PairMatch => {
                let a = source;
                let k = rng.random_range(1..=a.len());
                let mut positions: Vec<usize> = (0..a.len()).collect();
                positions.shuffle(rng);
                let mut b: Vec<usize> = positions[..k].iter().map(|&p| a[p]).collect();
                let label = rng.random_range(0..2);
                if label == 0 {
                    // Replace at least one element with a symbol absent from A.
                    let n_foreign = rng.random_range(1..=k);
                    for slot in b.iter_mut().take(n_foreign) {
                        *slot = loop {
                            let s = dist.sample(rng);
                            if !a.contains(&s) {
                                break s;
                            }
                        };
                    }
                    b.shuffle(rng);
                }
                let mut tokens = Vec::with_capacity(a.len() + b.len() + 2);
                tokens.push(BOS);
                tokens.extend(&a);
                tokens.push(SEP);
                tokens.extend(&b);
                Example::Classification { tokens, label }
            }
        }
    }

    fn split(&mut self, n: usize, dist: &SymbolDist, rng: &mut ChaCha8Rng) -> Result<Vec<Example>> {
        let mut out = Vec::with_capacity(n);
        let mut attempts = 0usize;
        while out.len() < n {
            attempts += 1;
            if attempts > 1000 * n.max(1) {
                return Err(ModelError::VocabularyTooSmall(format!(
                    "could not draw {n} unseen examples for task {:?}",
                    self.spec.task
                )));
            }
            let ex = self.example(dist, rng);
            if self.seen.insert(ex.input().to_vec()) {
                out.push(ex);
            }
        }
        Ok(out)
    }
}

/// Generates a reproducible corpus with disjoint train / in-domain / out-of-domain splits.
pub fn synth_corpus(spec: &CorpusSpec, seed: u64) -> Result<Corpus> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut remap: Vec<usize> = (FIRST_CONTENT..FIRST_CONTENT + spec.n_symbols).collect();
    remap.shuffle(&mut rng);
    let in_domain = SymbolDist::uniform(spec.n_symbols);
    let out_domain = SymbolDist::zipf(spec.n_symbols, spec.ood_zipf, &mut rng);
    let mut generator = Generator {
        spec,
        remap,
        seen: HashSet::new(),
    };
    let train = generator.split(spec.train_size, &in_domain, &mut rng)?;
    let eval_in_domain = generator.split(spec.eval_size, &in_domain, &mut rng)?;
    let eval_out_domain = generator.split(spec.eval_size, &out_domain, &mut rng)?;
    Ok(Corpus {
        spec: spec.clone(),
        seed,
        train,
        eval_in_domain,
        eval_out_domain,
    })
}

/// Empirical unigram distribution over content symbols of the split's inputs.
pub fn unigram_distribution(examples: &[Example], n_symbols: usize) -> Vec<f64> {
    let mut counts = vec![0.0; n_symbols];
    for ex in examples {
        for &t in ex.input() {
            if t >= FIRST_CONTENT {
                counts[t - FIRST_CONTENT] += 1.0;
            }
        }
    }
    let total: f64 = counts.iter().sum();
    if total > 0.0 {
        counts.iter_mut().for_each(|c| *c /= total);
    }
    counts
}

pub fn total_variation(p: &[f64], q: &[f64]) -> f64 {
    0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(task: TaskSpec) -> CorpusSpec {
        CorpusSpec {
            train_size: 200,
            eval_size: 50,
            n_symbols: 12,
            ..CorpusSpec::new(task)
        }
    }

    #[test]
    fn reversal_definition() {
        let c = synth_corpus(&small(TaskSpec::Reversal), 1).unwrap();
        for ex in &c.train {
            let Example::Translation { source, target } = ex else {
                panic!()
            };
            let mut rev = source.clone();
            rev.reverse();
            assert_eq!(&rev, target);
        }
    }

    #[test]
    fn copy_and_sort_definitions() {
        let c = synth_corpus(&small(TaskSpec::RemappedCopy), 2).unwrap();
        let mut map = std::collections::HashMap::new();
        for ex in &c.train {
            let Example::Translation { source, target } = ex else {
                panic!()
            };
            for (s, t) in source.iter().zip(target) {
                assert_eq!(*map.entry(*s).or_insert(*t), *t, "remap is a function");
            }
        }
        let c = synth_corpus(&small(TaskSpec::Sorted), 2).unwrap();
        for ex in &c.train {
            let Example::Translation { target, .. } = ex else {
                panic!()
            };
            assert!(target.windows(2).all(|w| w[0] <= w[1]));
        }
    }

    #[test]
    fn pair_match_labels_are_correct() {
        let c = synth_corpus(&small(TaskSpec::PairMatch), 3).unwrap();
        let mut positives = 0;
        for ex in &c.train {
            let Example::Classification { tokens, label } = ex else {
                panic!()
            };
            let sep = tokens.iter().position(|&t| t == SEP).unwrap();
            let (a, b) = (&tokens[1..sep], &tokens[sep + 1..]);
            let mut pool = a.to_vec();
            let subset = b.iter().all(|t| match pool.iter().position(|x| x == t) {
                Some(i) => {
                    pool.swap_remove(i);
                    true
                }
                None => false,
            });
            assert_eq!(subset, *label == 1);
            positives += label;
        }
        assert!(positives > 60 && positives < 140);
    }

    #[test]
    fn splits_are_disjoint_and_deterministic() {
        let spec = small(TaskSpec::Reversal);
        let c = synth_corpus(&spec, 5).unwrap();
        let mut seen = HashSet::new();
        for split in [Split::Train, Split::EvalInDomain, Split::EvalOutDomain] {
            for ex in c.split(split) {
                assert!(seen.insert(ex.input().to_vec()));
            }
        }
        assert_eq!(c, synth_corpus(&spec, 5).unwrap());
        assert_ne!(c.train, synth_corpus(&spec, 6).unwrap().train);
    }

    #[test]
    fn out_of_domain_distribution_shifts() {
        let spec = small(TaskSpec::Reversal);
        let c = synth_corpus(&spec, 7).unwrap();
        let p = unigram_distribution(&c.eval_in_domain, spec.n_symbols);
        let q = unigram_distribution(&c.eval_out_domain, spec.n_symbols);
        assert!(total_variation(&p, &q) > 0.1);
    }

    #[test]
    fn too_small_vocabulary_is_rejected() {
        let mut spec = small(TaskSpec::Reversal);
        spec.n_symbols = 1;
        assert!(matches!(synth_corpus(&spec, 0), Err(ModelError::VocabularyTooSmall(_))));
        let mut spec = small(TaskSpec::PairMatch);
        spec.n_symbols = 8;
        assert!(matches!(synth_corpus(&spec, 0), Err(ModelError::VocabularyTooSmall(_))));
        let mut spec = small(TaskSpec::Reversal);
        spec.n_symbols = 2;
        spec.max_len = 3;
        assert!(matches!(synth_corpus(&spec, 0), Err(ModelError::VocabularyTooSmall(_))));
    }

    #[test]
    fn train_subset_is_seeded() {
        let c = synth_corpus(&small(TaskSpec::Reversal), 1).unwrap();
        assert_eq!(c.train_subset(20, 4), c.train_subset(20, 4));
        assert_eq!(c.train_subset(20, 4).len(), 20);
        assert_eq!(c.train_subset(10_000, 4).len(), c.train.len());
    }
}
