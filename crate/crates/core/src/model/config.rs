//! Architecture hyperparameters.

use serde::{Deserialize, Serialize};

use super::{ModelError, Result};
use crate::attention::{AttentionKind, AttentionScale};
use crate::stats::Metric;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Task {
    Translation,
    Classification,
}

impl Task {
    pub fn kinds(self) -> &'static [AttentionKind] {
        match self {
            Task::Translation => &AttentionKind::TRANSLATOR,
            Task::Classification => &AttentionKind::CLASSIFIER,
        }
    }

    pub fn supports(self, metric: Metric) -> bool {
        match self {
            Task::Translation => metric != Metric::ClassificationAccuracy,
            Task::Classification => metric == Metric::ClassificationAccuracy,
        }
    }

    pub fn default_metric(self) -> Metric {
        match self {
            Task::Translation => Metric::SequenceAccuracy,
            Task::Classification => Metric::ClassificationAccuracy,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub task: Task,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    /// Source (encoder) vocabulary, including special tokens.
    pub src_vocab: usize,
    /// Target vocabulary for translators; number of classes for classifiers.
    pub tgt_vocab: usize,
    /// Longest sequence any input or output may have, special tokens included.
    pub max_len: usize,
    #[serde(default)]
    pub dropout: f64,
    #[serde(default)]
    pub attention_scale: AttentionScale,
}

impl ModelConfig {
    /// Default desk-scale translator: 4 layers × 8 heads, d = 128.
    pub fn translator(vocab: usize, max_len: usize) -> Self {
        ModelConfig {
            task: Task::Translation,
            n_layers: 4,
            n_heads: 8,
            d_model: 128,
            d_ff: 512,
            src_vocab: vocab,
            tgt_vocab: vocab,
            max_len,
            dropout: 0.0,
            attention_scale: AttentionScale::default(),
        }
    }

    /// Default desk-scale classifier: 4 layers × 8 heads, d = 128.
    pub fn classifier(vocab: usize, n_classes: usize, max_len: usize) -> Self {
        ModelConfig {
            task: Task::Classification,
            src_vocab: vocab,
            tgt_vocab: n_classes,
            ..Self::translator(vocab, max_len)
        }
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.n_heads.max(1)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(ModelError::InvalidConfig(msg));
        if self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return fail(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if self.n_layers == 0 || self.d_ff == 0 || self.d_model == 0 {
            return fail("n_layers, d_model and d_ff must be positive".into());
        }
        if self.src_vocab <= super::FIRST_CONTENT {
            return fail(format!("src_vocab {} leaves no content tokens", self.src_vocab));
        }
        match self.task {
            Task::Translation if self.tgt_vocab <= super::FIRST_CONTENT => {
                return fail(format!("tgt_vocab {} leaves no content tokens", self.tgt_vocab));
            }
            Task::Classification if self.tgt_vocab < 2 => {
                return fail("classifiers need at least 2 classes".into());
            }
            _ => {}
        }
        if self.max_len < 2 {
            return fail("max_len must be at least 2".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout {} outside [0, 1)", self.dropout));
        }
        Ok(())
    }

    /// Closed-form parameter count for an unsliced model.
    pub fn param_count(&self) -> usize {
        let d = self.d_model;
        let ff = 2 * d * self.d_ff + self.d_ff + d;
        let attn = self.attention_param_count_per_block();
        let norm = 2 * d;
        let out = self.tgt_vocab * d + self.tgt_vocab;
        match self.task {
            Task::Translation => {
                let enc_layer = 2 * norm + attn + ff;
                let dec_layer = 3 * norm + 2 * attn + ff;
                self.src_vocab * d + self.tgt_vocab * d + self.n_layers * (enc_layer + dec_layer) + 2 * norm + out
            }
            Task::Classification => self.src_vocab * d + self.n_layers * (2 * norm + attn + ff) + norm + out,
        }
    }

    /// `4·d²` per attention block (no biases), so `d_h × N_h = d` matches a vanilla layer.
    pub fn attention_param_count_per_block(&self) -> usize {
        4 * self.d_head() * self.d_model * self.n_heads
    }

    pub fn attention_param_count(&self) -> usize {
        self.task.kinds().len() * self.n_layers * self.attention_param_count_per_block()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_indivisible_heads() {
        let mut c = ModelConfig::translator(16, 12);
        c.n_heads = 3;
        assert!(matches!(c.validate(), Err(ModelError::InvalidConfig(_))));
    }

    #[test]
    fn default_translator_attention_share_matches_paper_range() {
        let c = ModelConfig::translator(14, 12);
        c.validate().unwrap();
        let share = c.attention_param_count() as f64 / c.param_count() as f64;
        assert!(share > 0.25 && share < 0.45, "share {share}");
    }

    #[test]
    fn metric_task_compatibility() {
        assert!(Task::Translation.supports(Metric::Bleu));
        assert!(!Task::Translation.supports(Metric::ClassificationAccuracy));
        assert!(!Task::Classification.supports(Metric::SequenceAccuracy));
    }
}
