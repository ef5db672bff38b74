//! The pruning experiments: ablate-one sweeps (§3.2), ablate-all-but-one
//! (§3.3), greedy iterative pruning (§4.2), per-type pruning (§5),
//! cross-dataset correlation (§3.4), structural slicing (§4.3) and the
//! training-dynamics surface (§6).
//!
//! Traces and surfaces serialize to JSON lines, one record per step or cell:
//!
//! ```text
//! trace:   {"ordering","reestimate","scope","metric","total_heads","increment",
//!           "step","nominal_fraction","fraction","n_pruned","pruned":[HeadId],"score",
//!           "importance":{"n_samples","heads":[{kind,layer,head,raw,normalized}]}|null}
//! surface: {"epoch","step","fraction","score","relative"|null}
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attention::{AttentionKind, HeadId, HeadMask};
use crate::importance::{
    ablate_each, estimate_active_importance, oracle_delta_scores, DeltaTable, ImportanceError, ImportanceTable,
    StatTest,
};
use crate::model::{evaluate, Checkpoint, Example, ModelError, Task, TransformerModel};
use crate::stats::{pearson, Metric, StatsError};

#[derive(Debug, Error)]
pub enum PruningError {
    #[error("model has no {0} attention")]
    AbsentKind(AttentionKind),
    #[error("model has no {kind} layer {layer}")]
    NoSuchLayer { kind: AttentionKind, layer: usize },
    #[error("increment must be in (0, 1], got {0}")]
    InvalidIncrement(f64),
    #[error("head {0} is already masked; pruning starts from an unmasked scope")]
    AlreadyMasked(HeadId),
    #[error("head {0} must be masked before it can be sliced away")]
    NotMasked(HeadId),
    #[error("delta tables cover different heads")]
    KeyMismatch,
    #[error("need at least {needed} checkpoints, got {got}")]
    TooFewCheckpoints { needed: usize, got: usize },
    #[error("malformed record: {0}")]
    Format(String),
    #[error(transparent)]
    Importance(#[from] ImportanceError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Stats(#[from] StatsError),
}

pub type Result<T, E = PruningError> = std::result::Result<T, E>;

/// Full ablate-one sweep with per-head significance (Table 1, Fig. 1).
pub fn ablate_one_sweep(
    model: &TransformerModel,
    eval: &[Example],
    metric: Metric,
    test: StatTest,
) -> Result<DeltaTable> {
    Ok(ablate_each(model, eval, metric, test)?)
}

/// Result of keeping exactly one head of a layer (Table 2).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerAblation {
    pub kind: AttentionKind,
    pub layer: usize,
    pub base_score: f64,
    /// Per kept head: its score with every other head of the layer masked,
    /// and the difference to `base_score`.
    pub per_head: Vec<KeptHead>,
    pub best_head: HeadId,
    pub best_delta: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KeptHead {
    pub head: HeadId,
    pub score: f64,
    pub delta: f64,
}

/// For each head of one layer, masks all other heads of that layer (other
/// layers untouched, beyond the model's existing mask) and evaluates. The best
/// head is the highest-scoring one; ties go to the lowest index.
pub fn ablate_all_but_one(
    model: &TransformerModel,
    kind: AttentionKind,
    layer: usize,
    eval: &[Example],
    metric: Metric,
) -> Result<LayerAblation> {
    let n = model
        .mha_layer(kind, layer)
        .ok_or(PruningError::NoSuchLayer { kind, layer })?
        .n_heads();
    let base = evaluate(model, eval, metric)?.score;
    let mut per_head = Vec::with_capacity(n);
    for keep in 0..n {
        let mut mask = model.mask().clone();
        for h in (0..n).filter(|&h| h != keep) {
            mask.close(HeadId::new(kind, layer, h));
        }
        let score = evaluate(&model.with_mask(mask), eval, metric)?.score;
        per_head.push(KeptHead {
            head: HeadId::new(kind, layer, keep),
            score,
            delta: score - base,
        });
    }
    let best = per_head
        .iter()
        .fold(None::<&KeptHead>, |best, k| match best {
            Some(b) if b.score >= k.score => Some(b),
            _ => Some(k),
        })
        .ok_or(PruningError::NoSuchLayer { kind, layer })?;
    Ok(LayerAblation {
        kind,
        layer,
        base_score: base,
        best_head: best.head,
        best_delta: best.delta,
        per_head: per_head.clone(),
    })
}

/// How heads are ranked for greedy pruning; the lowest-ranked go first.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Ordering {
    /// Ascending layer-normalized `I_h` (the paper's method).
    Importance,
    /// Descending `I_h`: the most important heads go first (control).
    ReverseImportance,
    /// Ascending `|delta|` of an ablate-one sweep on the eval split.
    OracleDelta,
    /// Descending signed delta: heads whose removal helps most go first.
    OracleSignedDelta,
    /// Seeded random shuffle.
    Random,
}

impl Ordering {
    pub const ALL: [Ordering; 5] = [
        Self::Importance,
        Self::ReverseImportance,
        Self::OracleDelta,
        Self::OracleSignedDelta,
        Self::Random,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Importance => "importance",
            Self::ReverseImportance => "reverse-importance",
            Self::OracleDelta => "oracle-delta",
            Self::OracleSignedDelta => "oracle-signed-delta",
            Self::Random => "random",
        }
    }

    fn uses_importance(self) -> bool {
        matches!(self, Self::Importance | Self::ReverseImportance)
    }
}

impl fmt::Display for Ordering {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Ordering {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Self::ALL
            .into_iter()
            .find(|o| o.as_str() == s)
            .ok_or_else(|| format!("unknown ordering {s:?}"))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PruneOptions {
    /// Fraction of the heads in scope removed per step.
    pub increment: f64,
    pub ordering: Ordering,
    /// Recompute the ranking on the partially pruned model before every step.
    pub reestimate: bool,
    /// Seeds the `random` ordering.
    pub seed: u64,
}

impl Default for PruneOptions {
    fn default() -> Self {
        PruneOptions {
            increment: 0.1,
            ordering: Ordering::Importance,
            reestimate: true,
            seed: 0,
        }
    }
}

/// One step of a pruning trace.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PruneStep {
    pub step: usize,
    /// `min(step × increment, 1)`.
    pub nominal_fraction: f64,
    /// `n_pruned / total_heads`.
    pub fraction: f64,
    pub n_pruned: usize,
    /// Heads removed at this step (disjoint across steps).
    pub pruned: Vec<HeadId>,
    pub score: f64,
    /// Ranking table the step's heads were chosen from (importance orderings).
    pub importance: Option<ImportanceTable>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PruningTrace {
    pub metric: Metric,
    pub ordering: Ordering,
    pub reestimate: bool,
    /// Attention kind the pruning was restricted to, if any.
    pub scope: Option<AttentionKind>,
    pub total_heads: usize,
    pub increment: f64,
    pub steps: Vec<PruneStep>,
}

#[derive(Serialize, Deserialize)]
struct TraceRecord {
    ordering: Ordering,
    reestimate: bool,
    scope: Option<AttentionKind>,
    metric: Metric,
    total_heads: usize,
    increment: f64,
    #[serde(flatten)]
    step: PruneStep,
}

impl PruningTrace {
    pub fn base_score(&self) -> f64 {
        self.steps[0].score
    }

    /// Every head pruned by the end of the trace, in pruning order.
    pub fn pruned_heads(&self) -> Vec<HeadId> {
        self.steps.iter().flat_map(|s| s.pruned.iter().copied()).collect()
    }

    /// Heads pruned up to and including `step`.
    pub fn pruned_through(&self, step: usize) -> BTreeSet<HeadId> {
        self.steps
            .iter()
            .take_while(|s| s.step <= step)
            .flat_map(|s| s.pruned.iter().copied())
            .collect()
    }

    /// The step whose nominal fraction is closest to `fraction` (earlier on ties).
    pub fn step_near(&self, fraction: f64) -> &PruneStep {
        self.steps
            .iter()
            .min_by(|a, b| {
                (a.nominal_fraction - fraction)
                    .abs()
                    .total_cmp(&(b.nominal_fraction - fraction).abs())
            })
            .expect("trace has a baseline step")
    }

    pub fn score_at(&self, fraction: f64) -> f64 {
        self.step_near(fraction).score
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for step in &self.steps {
            let rec = TraceRecord {
                ordering: self.ordering,
                reestimate: self.reestimate,
                scope: self.scope,
                metric: self.metric,
                total_heads: self.total_heads,
                increment: self.increment,
                step: step.clone(),
            };
            out.push_str(&serde_json::to_string(&rec).expect("trace records serialize"));
            out.push('\n');
        }
        out
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let mut trace: Option<PruningTrace> = None;
        for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let rec: TraceRecord =
                serde_json::from_str(line).map_err(|e| PruningError::Format(format!("line {}: {e}", i + 1)))?;
            let t = trace.get_or_insert_with(|| PruningTrace {
                metric: rec.metric,
                ordering: rec.ordering,
                reestimate: rec.reestimate,
                scope: rec.scope,
                total_heads: rec.total_heads,
                increment: rec.increment,
                steps: Vec::new(),
            });
            if (t.metric, t.ordering, t.reestimate, t.scope, t.total_heads)
                != (rec.metric, rec.ordering, rec.reestimate, rec.scope, rec.total_heads)
            {
                return Err(PruningError::Format(format!("line {}: mixes traces", i + 1)));
            }
            t.steps.push(rec.step);
        }
        trace.ok_or_else(|| PruningError::Format("empty trace".into()))
    }
}

fn sort_by_score(heads: &mut [HeadId], score: impl Fn(HeadId) -> f64, descending: bool) {
    heads.sort_by(|a, b| {
        let (sa, sb) = (score(*a), score(*b));
        let ord = if descending {
            sb.total_cmp(&sa)
        } else {
            sa.total_cmp(&sb)
        };
        ord.then(a.cmp(b))
    });
}

/// Ranks the candidate heads of `current` (lowest-ranked first).
fn rank(
    current: &TransformerModel,
    candidates: &[HeadId],
    opts: &PruneOptions,
    estimation: &[Example],
    eval: &[Example],
    metric: Metric,
) -> Result<(Vec<HeadId>, Option<ImportanceTable>)> {
    let mut order = candidates.to_vec();
    match opts.ordering {
        Ordering::Importance | Ordering::ReverseImportance => {
            let table = estimate_active_importance(current, estimation)?;
            let descending = opts.ordering == Ordering::ReverseImportance;
            sort_by_score(&mut order, |h| table.rank_score(h), descending);
            Ok((order, Some(table)))
        }
        Ordering::OracleDelta | Ordering::OracleSignedDelta => {
            let deltas = oracle_delta_scores(current, eval, metric)?;
            if opts.ordering == Ordering::OracleDelta {
                sort_by_score(&mut order, |h| deltas.delta(h).map_or(f64::INFINITY, f64::abs), false);
            } else {
                sort_by_score(&mut order, |h| deltas.delta(h).unwrap_or(f64::NEG_INFINITY), true);
            }
            Ok((order, None))
        }
        Ordering::Random => {
            order.sort();
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(opts.seed));
            Ok((order, None))
        }
    }
}

fn prune_scope(
    model: &TransformerModel,
    scope: Option<AttentionKind>,
    estimation: &[Example],
    eval: &[Example],
    metric: Metric,
    opts: &PruneOptions,
) -> Result<PruningTrace> {
    if !(opts.increment > 0.0 && opts.increment <= 1.0) {
        return Err(PruningError::InvalidIncrement(opts.increment));
    }
    let in_scope: Vec<HeadId> = model
        .head_ids()
        .into_iter()
        .filter(|h| scope.is_none_or(|k| h.kind == k))
        .collect();
    if let Some(kind) = scope {
        if in_scope.is_empty() {
            return Err(PruningError::AbsentKind(kind));
        }
    }
    if let Some(h) = in_scope.iter().find(|h| model.mask().is_closed(**h)) {
        return Err(PruningError::AlreadyMasked(*h));
    }
    let total = in_scope.len();
    let mut steps = vec![PruneStep {
        step: 0,
        nominal_fraction: 0.0,
        fraction: 0.0,
        n_pruned: 0,
        pruned: Vec::new(),
        score: evaluate(model, eval, metric)?.score,
        importance: None,
    }];
    let mut pruned: BTreeSet<HeadId> = BTreeSet::new();
    let mut fixed: Option<(Vec<HeadId>, Option<ImportanceTable>)> = None;
    let one_shot = !opts.reestimate || opts.ordering == Ordering::Random;
    let mut k = 0usize;
    while pruned.len() < total {
        k += 1;
        let target = ((k as f64 * opts.increment * total as f64).round() as usize).min(total);
        if target <= pruned.len() {
            continue;
        }
        let mut mask: HeadMask = model.mask().clone();
        pruned.iter().for_each(|h| mask.close(*h));
        let current = model.with_mask(mask.clone());
        let (order, table) = match &fixed {
            Some(f) if one_shot => f.clone(),
            _ => {
                let remaining: Vec<HeadId> = in_scope.iter().filter(|h| !pruned.contains(h)).copied().collect();
                let ranked = rank(&current, &remaining, opts, estimation, eval, metric)?;
                if one_shot {
                    fixed = Some(ranked.clone());
                }
                ranked
            }
        };
        let take: Vec<HeadId> = order
            .into_iter()
            .filter(|h| !pruned.contains(h))
            .take(target - pruned.len())
            .collect();
        for h in &take {
            pruned.insert(*h);
            mask.close(*h);
        }
        let score = evaluate(&model.with_mask(mask), eval, metric)?.score;
        steps.push(PruneStep {
            step: k,
            nominal_fraction: (k as f64 * opts.increment).min(1.0),
            fraction: pruned.len() as f64 / total as f64,
            n_pruned: pruned.len(),
            pruned: take,
            score,
            importance: if opts.ordering.uses_importance() { table } else { None },
        });
    }
    Ok(PruningTrace {
        metric,
        ordering: opts.ordering,
        reestimate: opts.reestimate && opts.ordering != Ordering::Random,
        scope,
        total_heads: total,
        increment: opts.increment,
        steps,
    })
}

/// Greedy pruning over every head of the model (Fig. 3). The step-`k` pruned
/// set has exactly `round(k · increment · total)` heads; the last step may be
/// partial. The model passed in is never modified.
pub fn iterative_prune(
    model: &TransformerModel,
    estimation: &[Example],
    eval: &[Example],
    metric: Metric,
    opts: &PruneOptions,
) -> Result<PruningTrace> {
    prune_scope(model, None, estimation, eval, metric, opts)
}

/// Greedy pruning restricted to one attention kind (Fig. 5); fractions are
/// relative to that kind's head count.
pub fn prune_by_type(
    model: &TransformerModel,
    kind: AttentionKind,
    estimation: &[Example],
    eval: &[Example],
    metric: Metric,
    opts: &PruneOptions,
) -> Result<PruningTrace> {
    if model.task() != Task::Translation || !model.kinds().contains(&kind) {
        return Err(PruningError::AbsentKind(kind));
    }
    prune_scope(model, Some(kind), estimation, eval, metric, opts)
}

/// Pearson correlation between two ablate-one tables (Figs. 2a/2b).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CrossCorrelation {
    pub r: f64,
    pub p_value: f64,
    pub n: usize,
    /// `(head, delta_a, delta_b)`.
    pub points: Vec<(HeadId, f64, f64)>,
}

pub fn cross_dataset_correlation(a: &DeltaTable, b: &DeltaTable) -> Result<CrossCorrelation> {
    if !a.entries.keys().eq(b.entries.keys()) {
        return Err(PruningError::KeyMismatch);
    }
    let points: Vec<(HeadId, f64, f64)> = a
        .entries
        .iter()
        .map(|(id, e)| (*id, e.delta, b.entries[id].delta))
        .collect();
    let xs: Vec<f64> = points.iter().map(|p| p.1).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.2).collect();
    let c = pearson(&xs, &ys)?;
    Ok(CrossCorrelation {
        r: c.r,
        p_value: c.p_value,
        n: c.n,
        points,
    })
}

/// Physically removes masked heads. Every head in `pruned` must currently be
/// masked; the result computes exactly what the masked model computes. A
/// layer that loses all its heads becomes the zero function.
pub fn structural_slice(model: &TransformerModel, pruned: &BTreeSet<HeadId>) -> Result<TransformerModel> {
    for id in pruned {
        if model
            .mha_layer(id.kind, id.layer)
            .is_none_or(|l| id.head >= l.n_heads())
        {
            return Err(ModelError::InvalidData(format!("head {id} is not in the model")).into());
        }
        if !model.mask().is_closed(*id) {
            return Err(PruningError::NotMasked(*id));
        }
    }
    Ok(model.remove_heads(pruned)?)
}

/// One cell of the training-dynamics surface (Fig. 6).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DynamicsCell {
    pub epoch: usize,
    pub step: usize,
    pub fraction: f64,
    pub score: f64,
    /// `score / unpruned score at this epoch`; `None` when that score is 0.
    pub relative: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DynamicsSurface {
    pub metric: Metric,
    pub cells: Vec<DynamicsCell>,
    /// Epochs whose unpruned score was 0 (relative scores undefined).
    pub flagged: Vec<usize>,
}

impl DynamicsSurface {
    pub fn epochs(&self) -> Vec<usize> {
        let set: BTreeSet<usize> = self.cells.iter().map(|c| c.epoch).collect();
        set.into_iter().collect()
    }

    /// `(fraction, relative)` points of one epoch, skipping flagged epochs.
    pub fn curve(&self, epoch: usize) -> Vec<(f64, f64)> {
        self.cells
            .iter()
            .filter(|c| c.epoch == epoch)
            .filter_map(|c| c.relative.map(|r| (c.fraction, r)))
            .collect()
    }

    /// Relative score at the pruning fraction closest to `fraction`.
    pub fn relative_at(&self, epoch: usize, fraction: f64) -> Option<f64> {
        self.curve(epoch)
            .into_iter()
            .min_by(|a, b| (a.0 - fraction).abs().total_cmp(&(b.0 - fraction).abs()))
            .map(|p| p.1)
    }

    /// R² of a least-squares line through one epoch's curve.
    pub fn linear_fit_r2(&self, epoch: usize) -> Option<f64> {
        linear_fit_r2(&self.curve(epoch))
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for c in &self.cells {
            out.push_str(&serde_json::to_string(c).expect("cells serialize"));
            out.push('\n');
        }
        out
    }
}

/// Coefficient of determination of the least-squares line through `points`;
/// `None` with fewer than 3 points or constant x. Constant y is a perfect fit.
pub fn linear_fit_r2(points: &[(f64, f64)]) -> Option<f64> {
    let n = points.len();
    if n < 3 {
        return None;
    }
    let nf = n as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / nf;
    let my = points.iter().map(|p| p.1).sum::<f64>() / nf;
    let sxx: f64 = points.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let syy: f64 = points.iter().map(|p| (p.1 - my).powi(2)).sum();
    if sxx == 0.0 {
        return None;
    }
    if syy == 0.0 {
        return Some(1.0);
    }
    Some(sxy * sxy / (sxx * syy))
}

/// Runs the same greedy pruning on every checkpoint and records scores
/// relative to each checkpoint's unpruned model.
pub fn training_dynamics(
    checkpoints: &[Checkpoint],
    estimation: &[Example],
    eval: &[Example],
    metric: Metric,
    opts: &PruneOptions,
) -> Result<DynamicsSurface> {
    if checkpoints.len() < 2 {
        return Err(PruningError::TooFewCheckpoints {
            needed: 2,
            got: checkpoints.len(),
        });
    }
    let mut cells = Vec::new();
    let mut flagged = Vec::new();
    for ckpt in checkpoints {
        let trace = iterative_prune(&ckpt.model, estimation, eval, metric, opts)?;
        let base = trace.base_score();
        if base == 0.0 {
            flagged.push(ckpt.epoch);
        }
        for s in &trace.steps {
            cells.push(DynamicsCell {
                epoch: ckpt.epoch,
                step: s.step,
                fraction: s.fraction,
                score: s.score,
                relative: (base != 0.0).then(|| if s.step == 0 { 1.0 } else { s.score / base }),
            });
        }
    }
    Ok(DynamicsSurface { metric, cells, flagged })
}

/// Groups per-head values by (kind, layer) for layer × head grids.
pub fn layer_grid(values: &BTreeMap<HeadId, f64>) -> BTreeMap<(AttentionKind, usize), Vec<Option<f64>>> {
    let mut grid: BTreeMap<(AttentionKind, usize), Vec<Option<f64>>> = BTreeMap::new();
    for (id, v) in values {
        let row = grid.entry((id.kind, id.layer)).or_default();
        if row.len() <= id.head {
            row.resize(id.head + 1, None);
        }
        row[id.head] = Some(*v);
    }
    grid
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_model, synth_corpus, Batch, Corpus, CorpusSpec, EpochLog, TaskSpec};
    fn setup(task: TaskSpec, seed: u64) -> (TransformerModel, Corpus) {
        let spec = CorpusSpec {
            train_size: 24,
            eval_size: 12,
            max_len: 5,
            ..CorpusSpec::new(task)
        };
        let corpus = synth_corpus(&spec, seed).unwrap();
        let model = build_model(&spec.model_config(2, 4, 8, 16), seed).unwrap();
        (model, corpus)
    }

    fn check_bookkeeping(t: &PruningTrace) {
        assert_eq!(t.steps[0].n_pruned, 0);
        assert!(t.steps[0].pruned.is_empty());
        let mut seen = BTreeSet::new();
        for w in t.steps.windows(2) {
            assert!(w[1].fraction > w[0].fraction);
        }
        for s in &t.steps[1..] {
            for h in &s.pruned {
                assert!(seen.insert(*h), "{h} pruned twice");
            }
            let expect = ((s.step as f64 * t.increment * t.total_heads as f64).round() as usize).min(t.total_heads);
            assert_eq!(seen.len(), expect);
            assert_eq!(s.n_pruned, expect);
        }
        assert_eq!(seen.len(), t.total_heads);
    }

    #[test]
    fn traces_follow_bookkeeping_for_every_ordering() {
        let (m, c) = setup(TaskSpec::Reversal, 0);
        for ordering in Ordering::ALL {
            for reestimate in [true, false] {
                let opts = PruneOptions {
                    increment: 0.15,
                    ordering,
                    reestimate,
                    seed: 3,
                };
                let t = iterative_prune(&m, &c.train, &c.eval_in_domain, Metric::TokenAccuracy, &opts).unwrap();
                check_bookkeeping(&t);
                assert_eq!(t.total_heads, 24);
                assert_eq!(t.steps.last().unwrap().fraction, 1.0);
                assert!(m.mask().is_all_open());
            }
        }
    }

    #[test]
    fn baseline_step_and_full_pruning() {
        let (m, c) = setup(TaskSpec::Reversal, 1);
        let t = iterative_prune(
            &m,
            &c.train,
            &c.eval_in_domain,
            Metric::TokenAccuracy,
            &PruneOptions::default(),
        )
        .unwrap();
        let base = evaluate(&m, &c.eval_in_domain, Metric::TokenAccuracy).unwrap().score;
        assert_eq!(t.base_score(), base);
        // every step's score equals a direct evaluation of the cumulative mask
        for s in &t.steps {
            let masked = m.with_mask(HeadMask::closing(t.pruned_through(s.step)));
            assert_eq!(
                evaluate(&masked, &c.eval_in_domain, Metric::TokenAccuracy)
                    .unwrap()
                    .score,
                s.score
            );
        }
        assert_eq!(t.steps.len(), 11);
    }

    #[test]
    fn importance_ordering_prunes_lowest_first() {
        let (m, c) = setup(TaskSpec::Reversal, 2);
        let opts = PruneOptions {
            reestimate: false,
            ..PruneOptions::default()
        };
        let t = iterative_prune(&m, &c.train, &c.eval_in_domain, Metric::TokenAccuracy, &opts).unwrap();
        let table = t.steps[1].importance.clone().unwrap();
        let mut expected = m.head_ids();
        expected.sort_by(|a, b| table.normalized[a].total_cmp(&table.normalized[b]).then(a.cmp(b)));
        assert_eq!(t.pruned_heads(), expected);
        let rev = iterative_prune(
            &m,
            &c.train,
            &c.eval_in_domain,
            Metric::TokenAccuracy,
            &PruneOptions {
                ordering: Ordering::ReverseImportance,
                ..opts
            },
        )
        .unwrap();
        // descending score; equal scores keep ascending HeadId order
        let mut desc = m.head_ids();
        desc.sort_by(|a, b| table.normalized[b].total_cmp(&table.normalized[a]).then(a.cmp(b)));
        assert_eq!(rev.pruned_heads(), desc);
    }

    #[test]
    fn reestimated_tables_exclude_pruned_heads() {
        let (m, c) = setup(TaskSpec::PairMatch, 3);
        let t = iterative_prune(
            &m,
            &c.train,
            &c.eval_in_domain,
            Metric::ClassificationAccuracy,
            &PruneOptions::default(),
        )
        .unwrap();
        for s in &t.steps[1..] {
            let table = s.importance.as_ref().unwrap();
            let before = t.pruned_through(s.step - 1);
            assert_eq!(table.len(), t.total_heads - before.len());
            assert!(before.iter().all(|h| !table.raw.contains_key(h)));
        }
    }

    #[test]
    fn random_ordering_is_seeded() {
        let (m, c) = setup(TaskSpec::Reversal, 4);
        let opts = |seed| PruneOptions {
            ordering: Ordering::Random,
            seed,
            ..PruneOptions::default()
        };
        let run = |s| iterative_prune(&m, &c.train, &c.eval_in_domain, Metric::TokenAccuracy, &opts(s)).unwrap();
        assert_eq!(run(1), run(1));
        assert_ne!(run(1).pruned_heads(), run(2).pruned_heads());
    }

    #[test]
    fn oversized_increment_gives_one_partial_step() {
        let (m, c) = setup(TaskSpec::Reversal, 5);
        let opts = PruneOptions {
            increment: 0.3,
            ..PruneOptions::default()
        };
        let t = prune_by_type(
            &m,
            AttentionKind::EncDec,
            &c.train,
            &c.eval_in_domain,
            Metric::TokenAccuracy,
            &opts,
        )
        .unwrap();
        // 8 Enc-Dec heads: round(2.4)=2, round(4.8)=5, round(7.2)=7, then the final partial step
        let sizes: Vec<usize> = t.steps.iter().map(|s| s.n_pruned).collect();
        assert_eq!(sizes, vec![0, 2, 5, 7, 8]);
        assert!(t.pruned_heads().iter().all(|h| h.kind == AttentionKind::EncDec));
        assert_eq!(t.scope, Some(AttentionKind::EncDec));
    }

    #[test]
    fn prune_errors() {
        let (m, c) = setup(TaskSpec::PairMatch, 0);
        let opts = PruneOptions::default();
        assert!(matches!(
            prune_by_type(
                &m,
                AttentionKind::EncDec,
                &c.train,
                &c.eval_in_domain,
                Metric::ClassificationAccuracy,
                &opts
            ),
            Err(PruningError::AbsentKind(AttentionKind::EncDec))
        ));
        for increment in [0.0, 1.5, f64::NAN] {
            let bad = PruneOptions {
                increment,
                ..opts.clone()
            };
            assert!(matches!(
                iterative_prune(&m, &c.train, &c.eval_in_domain, Metric::ClassificationAccuracy, &bad),
                Err(PruningError::InvalidIncrement(_))
            ));
        }
        let id = HeadId::new(AttentionKind::SelfOnly, 0, 0);
        let masked = m.with_mask(HeadMask::closing([id]));
        assert!(matches!(
            iterative_prune(&masked, &c.train, &c.eval_in_domain, Metric::ClassificationAccuracy, &opts),
            Err(PruningError::AlreadyMasked(h)) if h == id
        ));
    }

    #[test]
    fn trace_jsonl_round_trip() {
        let (m, c) = setup(TaskSpec::Reversal, 6);
        let t = iterative_prune(&m, &c.train, &c.eval_in_domain, Metric::Bleu, &PruneOptions::default()).unwrap();
        let text = t.to_jsonl();
        assert_eq!(text.lines().count(), t.steps.len());
        assert_eq!(PruningTrace::from_jsonl(&text).unwrap(), t);
        assert!(PruningTrace::from_jsonl("").is_err());
        assert!(PruningTrace::from_jsonl("{").is_err());
    }

    #[test]
    fn all_but_one_matches_exhaustive_evaluation() {
        let (m, c) = setup(TaskSpec::Reversal, 7);
        let (kind, layer) = (AttentionKind::EncDec, 1);
        let r = ablate_all_but_one(&m, kind, layer, &c.eval_in_domain, Metric::TokenAccuracy).unwrap();
        let base = evaluate(&m, &c.eval_in_domain, Metric::TokenAccuracy).unwrap().score;
        let mut best: Option<(HeadId, f64)> = None;
        for keep in 0..4 {
            let closed = (0..4).filter(|&h| h != keep).map(|h| HeadId::new(kind, layer, h));
            let s = evaluate(
                &m.with_mask(HeadMask::closing(closed)),
                &c.eval_in_domain,
                Metric::TokenAccuracy,
            )
            .unwrap()
            .score;
            assert_eq!(r.per_head[keep].score, s);
            if best.is_none_or(|b| s > b.1) {
                best = Some((HeadId::new(kind, layer, keep), s));
            }
        }
        assert_eq!(r.best_head, best.unwrap().0);
        assert_eq!(r.best_delta, best.unwrap().1 - base);
        assert!(matches!(
            ablate_all_but_one(&m, kind, 9, &c.eval_in_domain, Metric::TokenAccuracy),
            Err(PruningError::NoSuchLayer { .. })
        ));
    }

    #[test]
    fn single_head_layer_keeps_delta_zero() {
        let (m, c) = setup(TaskSpec::Reversal, 8);
        let removed: BTreeSet<HeadId> = (1..4).map(|h| HeadId::new(AttentionKind::DecDec, 0, h)).collect();
        let sliced = structural_slice(&m.with_mask(HeadMask::closing(removed.iter().copied())), &removed).unwrap();
        let r = ablate_all_but_one(&sliced, AttentionKind::DecDec, 0, &c.eval_in_domain, Metric::Bleu).unwrap();
        assert_eq!(r.per_head.len(), 1);
        assert_eq!(r.best_delta, 0.0);
    }

    #[test]
    fn slicing_matches_masking() {
        let (m, c) = setup(TaskSpec::Reversal, 9);
        let pruned: BTreeSet<HeadId> = [
            HeadId::new(AttentionKind::EncEnc, 0, 1),
            HeadId::new(AttentionKind::EncDec, 1, 0),
            HeadId::new(AttentionKind::EncDec, 1, 3),
            HeadId::new(AttentionKind::DecDec, 1, 2),
        ]
        .into();
        let masked = m.with_mask(HeadMask::closing(pruned.iter().copied()));
        let sliced = structural_slice(&masked, &pruned).unwrap();
        let d = m.config().d_model;
        let dh = m.config().d_head();
        assert_eq!(m.param_count() - sliced.param_count(), pruned.len() * 4 * dh * d);
        assert!(sliced.mask().is_all_open());
        let batch = Batch::new(&c.eval_in_domain).unwrap();
        let a = masked.logits(&batch).unwrap();
        let b = sliced.logits(&batch).unwrap();
        assert!(a.data().iter().zip(b.data()).all(|(x, y)| (x - y).abs() < 1e-10));
        assert!(matches!(structural_slice(&m, &pruned), Err(PruningError::NotMasked(_))));
        assert_eq!(structural_slice(&m, &BTreeSet::new()).unwrap(), m);
    }

    #[test]
    fn correlation_of_tables() {
        let (m, c) = setup(TaskSpec::Reversal, 10);
        let a = oracle_delta_scores(&m, &c.eval_in_domain, Metric::TokenAccuracy).unwrap();
        let same = cross_dataset_correlation(&a, &a).unwrap();
        assert!((same.r - 1.0).abs() < 1e-12);
        let mut neg = a.clone();
        neg.entries.values_mut().for_each(|e| e.delta = -e.delta);
        assert!((cross_dataset_correlation(&a, &neg).unwrap().r + 1.0).abs() < 1e-12);
        let mut fewer = a.clone();
        fewer.entries.pop_first();
        assert!(matches!(
            cross_dataset_correlation(&a, &fewer),
            Err(PruningError::KeyMismatch)
        ));
    }

    #[test]
    fn dynamics_surface() {
        let (m, c) = setup(TaskSpec::Reversal, 11);
        let ckpt = |epoch, model: TransformerModel| Checkpoint {
            epoch,
            model,
            log: Vec::<EpochLog>::new(),
        };
        let (m2, _) = setup(TaskSpec::Reversal, 12);
        let ckpts = vec![ckpt(1, m.clone()), ckpt(2, m2)];
        let opts = PruneOptions {
            increment: 0.25,
            ..PruneOptions::default()
        };
        let s = training_dynamics(&ckpts, &c.train, &c.eval_in_domain, Metric::TokenAccuracy, &opts).unwrap();
        assert_eq!(s.epochs(), vec![1, 2]);
        for e in s.epochs() {
            if !s.flagged.contains(&e) {
                assert_eq!(s.curve(e)[0], (0.0, 1.0));
            }
        }
        assert_eq!(s.to_jsonl().lines().count(), s.cells.len());
        assert!(matches!(
            training_dynamics(&ckpts[..1], &c.train, &c.eval_in_domain, Metric::TokenAccuracy, &opts),
            Err(PruningError::TooFewCheckpoints { .. })
        ));
    }

    #[test]
    fn linear_fit() {
        let pts: Vec<(f64, f64)> = (0..5).map(|i| (i as f64, 2.0 * i as f64 + 1.0)).collect();
        assert!((linear_fit_r2(&pts).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(linear_fit_r2(&pts[..2]), None);
        let flat = [(0.0, 1.0), (1.0, 1.0), (2.0, 1.0)];
        assert_eq!(linear_fit_r2(&flat), Some(1.0));
    }

    #[test]
    fn grid_layout() {
        let values: BTreeMap<HeadId, f64> = [
            (HeadId::new(AttentionKind::EncEnc, 0, 1), 2.0),
            (HeadId::new(AttentionKind::EncEnc, 0, 0), 1.0),
            (HeadId::new(AttentionKind::EncDec, 1, 0), 3.0),
        ]
        .into();
        let g = layer_grid(&values);
        assert_eq!(g[&(AttentionKind::EncEnc, 0)], vec![Some(1.0), Some(2.0)]);
        assert_eq!(g[&(AttentionKind::EncDec, 1)], vec![Some(3.0)]);
    }
}
