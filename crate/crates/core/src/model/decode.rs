//! Greedy decoding, classification and metric evaluation under the model's
//! current head mask.

use std::collections::BTreeMap;

use super::config::Task;
use super::corpus::Example;
use super::transformer::{Batch, Dropout, Gates, TransformerModel};
use super::{ModelError, Result, BOS, EOS, PAD};
use crate::graph::Graph;
use crate::stats::{self, EvalResult, Metric, PerExample};
use crate::tensor::Tensor;

/// Examples per forward pass during evaluation.
pub const EVAL_BATCH: usize = 128;

/// Index of the largest value; ties resolve to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Greedy decoding of one source sequence (content tokens, no EOS).
pub fn generate(model: &TransformerModel, source: &[usize], max_len: usize) -> Result<Vec<usize>> {
    Ok(generate_batch(model, &[source.to_vec()], max_len)?.remove(0))
}

/// Greedy decoding of many sources at once. Each output stops before the
/// first EOS or after `max_len` tokens; `max_len` is capped so the decoder
/// input (BOS plus the emitted tokens) fits the model's positional table.
pub fn generate_batch(model: &TransformerModel, sources: &[Vec<usize>], max_len: usize) -> Result<Vec<Vec<usize>>> {
    if model.task() != Task::Translation {
        return Err(ModelError::WrongTask {
            op: "generate",
            task: model.task(),
        });
    }
    let n = sources.len();
    if n == 0 {
        return Ok(Vec::new());
    }
    let max_len = max_len.min(model.config().max_len.saturating_sub(1));
    let mut out: Vec<Vec<usize>> = vec![Vec::new(); n];
    if max_len == 0 {
        return Ok(out);
    }
    let src_examples: Vec<Example> = sources
        .iter()
        .map(|s| Example::Translation {
            source: s.clone(),
            target: Vec::new(),
        })
        .collect();
    let batch = Batch::new(&src_examples)?;

    let mut g = Graph::inference();
    let w = model.weights().bind_constant(&mut g);
    let gates = Gates::from_mask(&mut g, model);
    let mut taps = BTreeMap::new();
    let memory = model.encode(
        &mut g,
        &w,
        &gates,
        &batch.src_ids,
        &batch.src_pad,
        n,
        batch.src_len,
        &mut Dropout::none(),
        &mut taps,
    )?;
    let memory: Tensor = g.value(memory).clone();

    let vocab = model.config().tgt_vocab;
    let mut done = vec![false; n];
    let mut prefix: Vec<Vec<usize>> = vec![vec![BOS]; n];
    for step in 0..max_len {
        let len = step + 1;
        let mut g = Graph::inference();
        let w = model.weights().bind_constant(&mut g);
        let gates = Gates::from_mask(&mut g, model);
        let mem = g.constant(memory.clone());
        let ids: Vec<usize> = prefix.iter().flatten().copied().collect();
        let pad = vec![false; n * len];
        let mut taps = BTreeMap::new();
        let logits = model.decode(
            &mut g,
            &w,
            &gates,
            mem,
            &batch.src_pad,
            &ids,
            &pad,
            n,
            len,
            &mut Dropout::none(),
            &mut taps,
        )?;
        let logits = g.value(logits);
        for b in 0..n {
            let row = &logits.data()[(b * len + step) * vocab..(b * len + step + 1) * vocab];
            let next = if done[b] { PAD } else { argmax(row) };
            if !done[b] {
                if next == EOS {
                    done[b] = true;
                } else {
                    out[b].push(next);
                }
            }
            prefix[b].push(next);
        }
        if done.iter().all(|&d| d) {
            break;
        }
    }
    Ok(out)
}

/// Predicted class of one classification example.
pub fn classify(model: &TransformerModel, example: &Example) -> Result<usize> {
    Ok(classify_batch(model, std::slice::from_ref(example))?[0])
}

pub fn classify_batch(model: &TransformerModel, examples: &[Example]) -> Result<Vec<usize>> {
    if model.task() != Task::Classification {
        return Err(ModelError::WrongTask {
            op: "classify",
            task: model.task(),
        });
    }
    let mut out = Vec::with_capacity(examples.len());
    for chunk in examples.chunks(EVAL_BATCH) {
        let logits = model.logits(&Batch::new(chunk)?)?;
        let c = logits.last_dim();
        out.extend(logits.data().chunks(c).map(argmax));
    }
    Ok(out)
}

/// Parallel source and target token sequences.
type Pairs = (Vec<Vec<usize>>, Vec<Vec<usize>>);

fn translation_pairs(examples: &[Example]) -> Result<Pairs> {
    examples
        .iter()
        .map(|ex| match ex {
            Example::Translation { source, target } => Ok((source.clone(), target.clone())),
            Example::Classification { .. } => Err(ModelError::InvalidData(
                "classification example in a translation split".into(),
            )),
        })
        .collect::<Result<Vec<_>>>()
        .map(|pairs| pairs.into_iter().unzip())
}

/// Scores a split under the model's current head mask.
pub fn evaluate(model: &TransformerModel, examples: &[Example], metric: Metric) -> Result<EvalResult> {
    if !model.task().supports(metric) {
        return Err(ModelError::MetricMismatch {
            metric,
            task: model.task(),
        });
    }
    if examples.is_empty() {
        return Err(ModelError::EmptyData);
    }
    let per_example = match model.task() {
        Task::Translation => {
            let (sources, refs) = translation_pairs(examples)?;
            let mut hyps = Vec::with_capacity(sources.len());
            for chunk in sources.chunks(EVAL_BATCH) {
                hyps.extend(generate_batch(model, chunk, model.config().max_len)?);
            }
            match metric {
                Metric::SequenceAccuracy => stats::sequence_matches(&hyps, &refs)?,
                Metric::TokenAccuracy => stats::token_matches(&hyps, &refs)?,
                Metric::Bleu => PerExample::Bleu(stats::corpus_bleu(&hyps, &refs)?.1),
                Metric::ClassificationAccuracy => unreachable!("checked by Task::supports"),
            }
        }
        Task::Classification => {
            let labels: Vec<usize> = examples
                .iter()
                .map(|ex| match ex {
                    Example::Classification { label, .. } => Ok(*label),
                    Example::Translation { .. } => Err(ModelError::InvalidData(
                        "translation example in a classification split".into(),
                    )),
                })
                .collect::<Result<_>>()?;
            let preds = classify_batch(model, examples)?;
            stats::classification_matches(&preds, &labels)?
        }
    };
    Ok(EvalResult::new(metric, per_example)?)
}
