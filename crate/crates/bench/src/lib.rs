//! Shared fixtures for the criterion benchmarks: an untrained reversal
//! translator and its corpus. Timings do not depend on training.

use std::collections::BTreeSet;

use prunelab::attention::{HeadId, HeadMask};
use prunelab::model::{build_model, synth_corpus, Corpus, CorpusSpec, TaskSpec, TransformerModel};
use prunelab::pruning::structural_slice;

pub struct Fixture {
    pub corpus: Corpus,
    pub model: TransformerModel,
}

/// A `layers × heads` translator of width `d` on the default reversal corpus.
pub fn fixture(layers: usize, heads: usize, d: usize) -> Fixture {
    let spec = CorpusSpec::new(TaskSpec::Reversal);
    let corpus = synth_corpus(&spec, 0).expect("default corpus");
    let model = build_model(&spec.model_config(layers, heads, d, 4 * d), 0).expect("valid config");
    Fixture { corpus, model }
}

/// The model with every odd-numbered head removed (half of all heads).
pub fn half_sliced(model: &TransformerModel) -> TransformerModel {
    let removed: BTreeSet<HeadId> = model.head_ids().into_iter().filter(|id| id.head % 2 == 1).collect();
    let masked = model.with_mask(HeadMask::closing(removed.iter().copied()));
    structural_slice(&masked, &removed).expect("masked heads slice")
}
