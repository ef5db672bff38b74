//! Mini-batch training with per-epoch checkpoints.
//!
//! The optimizer is SGD with momentum under an inverse-square-root warmup
//! schedule: `lr(t) = lr · min(t / warmup, sqrt(warmup / t))` for step
//! `t ≥ 1`. Gradients may be clipped by global ℓ2 norm.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::checkpoint::Checkpoint;
use super::corpus::{Corpus, Split};
use super::decode::evaluate;
use super::transformer::{Batch, Dropout, Gates, LossReduction, TransformerModel};
use super::{ModelError, Result};
use crate::graph::Graph;
use crate::stats::Metric;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerSpec {
    /// Peak learning rate, reached at the end of warmup.
    pub learning_rate: f64,
    pub momentum: f64,
    pub warmup_steps: usize,
    pub batch_size: usize,
    /// Global gradient-norm clip; `None` disables clipping.
    #[serde(default)]
    pub clip_norm: Option<f64>,
    /// Seeds batch shuffling and dropout masks.
    pub seed: u64,
    /// Metric recorded after every epoch; `None` uses the task default.
    #[serde(default)]
    pub metric: Option<Metric>,
    /// How many in-domain eval examples to score per epoch (0 = all).
    #[serde(default)]
    pub eval_examples: usize,
}

impl Default for OptimizerSpec {
    fn default() -> Self {
        OptimizerSpec {
            learning_rate: 0.1,
            momentum: 0.9,
            warmup_steps: 200,
            batch_size: 32,
            clip_norm: Some(1.0),
            seed: 0,
            metric: None,
            eval_examples: 0,
        }
    }
}

impl OptimizerSpec {
    pub fn learning_rate_at(&self, step: usize) -> f64 {
        let t = step.max(1) as f64;
        let w = self.warmup_steps.max(1) as f64;
        self.learning_rate * (t / w).min((w / t).sqrt())
    }

    fn validate(&self) -> Result<()> {
        if self.batch_size == 0
            || self.learning_rate.is_nan()
            || self.learning_rate <= 0.0
            || !(0.0..1.0).contains(&self.momentum)
        {
            return Err(ModelError::InvalidConfig(format!(
                "optimizer needs batch_size > 0, learning_rate > 0 and momentum in [0, 1): {self:?}"
            )));
        }
        Ok(())
    }
}

/// One row of the training log; epoch 0 is the untrained model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    /// Mean batch loss over the epoch; `None` for epoch 0.
    pub train_loss: Option<f64>,
    pub metric: Metric,
    pub eval_score: f64,
    pub eval_examples: usize,
}

/// One full pass of SGD-momentum state.
struct Optimizer {
    spec: OptimizerSpec,
    velocity: Vec<Vec<f64>>,
    step: usize,
}

impl Optimizer {
    fn new(spec: &OptimizerSpec, model: &TransformerModel) -> Self {
        let mut velocity = Vec::new();
        model.weights().map(&mut |_, t| velocity.push(vec![0.0; t.len()]));
        Optimizer {
            spec: spec.clone(),
            velocity,
            step: 0,
        }
    }

    fn apply(&mut self, model: &mut TransformerModel, grads: &[crate::tensor::Tensor]) {
        self.step += 1;
        let lr = self.spec.learning_rate_at(self.step);
        let scale = match self.spec.clip_norm {
            Some(max) => {
                let norm = grads
                    .iter()
                    .map(|g| g.data().iter().map(|v| v * v).sum::<f64>())
                    .sum::<f64>()
                    .sqrt();
                if norm > max {
                    max / norm
                } else {
                    1.0
                }
            }
            None => 1.0,
        };
        let mu = self.spec.momentum;
        let mut i = 0;
        let velocity = &mut self.velocity;
        model.weights_mut().visit_mut(&mut |_, p| {
            let v = &mut velocity[i];
            let g = grads[i].data();
            for ((pv, vv), gv) in p.data_mut().iter_mut().zip(v.iter_mut()).zip(g) {
                *vv = mu * *vv + scale * gv;
                *pv -= lr * *vv;
            }
            i += 1;
        });
    }
}

fn eval_split<'a>(corpus: &'a Corpus, spec: &OptimizerSpec) -> &'a [crate::model::Example] {
    let split = corpus.split(Split::EvalInDomain);
    if spec.eval_examples == 0 {
        split
    } else {
        &split[..spec.eval_examples.min(split.len())]
    }
}

/// Scores a model the way [`train`] records it in the log.
pub fn log_score(model: &TransformerModel, corpus: &Corpus, spec: &OptimizerSpec) -> Result<(Metric, f64, usize)> {
    let metric = spec.metric.unwrap_or(model.task().default_metric());
    let split = eval_split(corpus, spec);
    Ok((metric, evaluate(model, split, metric)?.score, split.len()))
}

/// Trains for `epochs` passes over the training split, returning the initial
/// checkpoint followed by one checkpoint per epoch. When `checkpoint_dir` is
/// given each checkpoint is also written there as `epoch_NNNN.ckpt`.
pub fn train(
    model: &TransformerModel,
    corpus: &Corpus,
    epochs: usize,
    spec: &OptimizerSpec,
    checkpoint_dir: Option<&Path>,
) -> Result<Vec<Checkpoint>> {
    spec.validate()?;
    if corpus.train.is_empty() {
        return Err(ModelError::EmptyData);
    }
    if corpus.task() != model.task() {
        return Err(ModelError::WrongTask {
            op: "train",
            task: model.task(),
        });
    }
    if let Some(dir) = checkpoint_dir {
        std::fs::create_dir_all(dir)?;
    }
    let mut model = model.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut opt = Optimizer::new(spec, &model);
    let mut log = Vec::with_capacity(epochs + 1);
    let mut checkpoints = Vec::with_capacity(epochs + 1);

    let record = |model: &TransformerModel,
                  epoch: usize,
                  train_loss: Option<f64>,
                  log: &mut Vec<EpochLog>|
     -> Result<Checkpoint> {
        let (metric, eval_score, eval_examples) = log_score(model, corpus, spec)?;
        log.push(EpochLog {
            epoch,
            train_loss,
            metric,
            eval_score,
            eval_examples,
        });
        let ckpt = Checkpoint {
            epoch,
            model: model.clone(),
            log: log.clone(),
        };
        if let Some(dir) = checkpoint_dir {
            ckpt.save(&dir.join(format!("epoch_{epoch:04}.ckpt")))?;
        }
        Ok(ckpt)
    };
    checkpoints.push(record(&model, 0, None, &mut log)?);

    let mut order: Vec<usize> = (0..corpus.train.len()).collect();
    for epoch in 1..=epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut n_batches = 0usize;
        for (b, chunk) in order.chunks(spec.batch_size).enumerate() {
            let examples: Vec<_> = chunk.iter().map(|&i| corpus.train[i].clone()).collect();
            let batch = Batch::new(&examples)?;
            let mut g = Graph::new();
            let w = model.weights().bind(&mut g);
            let gates = Gates::from_mask(&mut g, &model);
            let rate = model.config().dropout;
            let mut drop = Dropout {
                rate,
                rng: Some(&mut rng),
            };
            let (loss, loss_value) = match model
                .forward_with(&mut g, &w, &batch, &gates, &mut drop)
                .and_then(|fwd| model.loss(&mut g, &fwd, &batch, LossReduction::BatchMean))
            {
                Ok(loss) => (Some(loss), g.value(loss).item().unwrap_or(f64::NAN)),
                // overflowing activations can surface as an op error before any loss exists
                Err(_) if !g.all_finite() => (None, f64::NAN),
                Err(e) => return Err(e),
            };
            let Some(loss) = loss.filter(|_| loss_value.is_finite()) else {
                return Err(ModelError::Diverged {
                    epoch,
                    step: b,
                    loss: loss_value,
                });
            };
            let grads = g.backward(loss)?;
            let mut flat = Vec::new();
            w.map(&mut |_, v| flat.push(grads.get(*v)));
            opt.apply(&mut model, &flat);
            let mut finite = true;
            model.weights().map(&mut |_, t| finite &= t.all_finite());
            if !finite {
                return Err(ModelError::Diverged {
                    epoch,
                    step: b,
                    loss: f64::NAN,
                });
            }
            loss_sum += loss_value;
            n_batches += 1;
        }
        checkpoints.push(record(&model, epoch, Some(loss_sum / n_batches as f64), &mut log)?);
    }
    Ok(checkpoints)
}
