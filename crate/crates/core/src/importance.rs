//! Head importance (Eq. 2 of the paper) and oracle ablation deltas.
//!
//! `I_h = E_x |Att_h(x)ᵀ ∂L(x)/∂Att_h(x)|`, which by the chain rule equals
//! `E_x |∂L(x)/∂ξ_h|` at `ξ = 1`. The expectation runs over individual
//! examples with the absolute value taken per example; each example's loss is
//! its own sentence-mean cross-entropy. Scores are then ℓ2-normalized within
//! each (kind, layer).
//!
//! Both tables serialize to one tab-separated text format, one row per head:
//!
//! ```text
//! # key=value            metadata lines (metric, base_score, n_samples, ...)
//! kind  layer  head  raw  normalized  delta  p_value
//! ```
//!
//! Missing values are written as `NA`; numbers use Rust's shortest
//! round-trip formatting so parsing a table reproduces it bit for bit.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attention::{AttentionKind, HeadId, HeadMask};
use crate::graph::Graph;
use crate::model::{evaluate, Batch, Example, Gates, LossReduction, ModelError, TransformerModel};
use crate::stats::{
    self, kahan_sum, paired_t_test, two_sided_bootstrap, EvalResult, Metric, PerExample, SignificanceResult,
    StatsError, DEFAULT_RESAMPLES, SIGNIFICANCE_LEVEL,
};

/// Default size of the seeded training subsample used for estimation.
pub const DEFAULT_ESTIMATION_SAMPLES: usize = 512;
/// Examples per forward/backward pass during estimation.
pub const ESTIMATION_BATCH: usize = 64;

#[derive(Debug, Error)]
pub enum ImportanceError {
    #[error("no estimation data")]
    EmptyData,
    #[error("importance estimation needs every gate open; closed heads: {0:?}")]
    ClosedGates(Vec<HeadId>),
    #[error("malformed head table: {0}")]
    Format(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Stats(#[from] StatsError),
}

pub type Result<T, E = ImportanceError> = std::result::Result<T, E>;

/// Per-head importance scores.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(into = "ImportanceRecord", try_from = "ImportanceRecord")]
pub struct ImportanceTable {
    /// `I_h`, always ≥ 0.
    pub raw: BTreeMap<HeadId, f64>,
    /// `I_h` divided by the ℓ2 norm of its (kind, layer) group.
    pub normalized: BTreeMap<HeadId, f64>,
    pub n_samples: usize,
}

#[derive(Serialize, Deserialize)]
struct ImportanceRecord {
    n_samples: usize,
    heads: Vec<ImportanceRow>,
}

#[derive(Serialize, Deserialize)]
struct ImportanceRow {
    kind: AttentionKind,
    layer: usize,
    head: usize,
    raw: f64,
    normalized: f64,
}

impl From<ImportanceTable> for ImportanceRecord {
    fn from(t: ImportanceTable) -> Self {
        ImportanceRecord {
            n_samples: t.n_samples,
            heads: t
                .raw
                .iter()
                .map(|(id, &raw)| ImportanceRow {
                    kind: id.kind,
                    layer: id.layer,
                    head: id.head,
                    raw,
                    normalized: t.normalized[id],
                })
                .collect(),
        }
    }
}

impl TryFrom<ImportanceRecord> for ImportanceTable {
    type Error = String;

    fn try_from(r: ImportanceRecord) -> std::result::Result<Self, String> {
        let mut raw = BTreeMap::new();
        let mut normalized = BTreeMap::new();
        for row in r.heads {
            let id = HeadId::new(row.kind, row.layer, row.head);
            if raw.insert(id, row.raw).is_some() {
                return Err(format!("duplicate head {id}"));
            }
            normalized.insert(id, row.normalized);
        }
        Ok(ImportanceTable {
            raw,
            normalized,
            n_samples: r.n_samples,
        })
    }
}

impl ImportanceTable {
    /// Builds a table from raw scores, filling in the layer-normalized view.
    pub fn from_raw(raw: BTreeMap<HeadId, f64>, n_samples: usize) -> Self {
        normalize_by_layer(ImportanceTable {
            raw,
            normalized: BTreeMap::new(),
            n_samples,
        })
    }

    pub fn len(&self) -> usize {
        self.raw.len()
    }

    pub fn is_empty(&self) -> bool {
        self.raw.is_empty()
    }

    /// Sort key for pruning: the normalized score, or −∞ for heads that were
    /// excluded from estimation (already pruned).
    pub fn rank_score(&self, id: HeadId) -> f64 {
        self.normalized.get(&id).copied().unwrap_or(f64::NEG_INFINITY)
    }
}

/// Per-sample sensitivities of every open head, in data order.
#[derive(Clone, Debug, PartialEq)]
pub struct Sensitivities {
    /// `∂L(x)/∂ξ_h` with ξ treated as a differentiable input at its mask value.
    pub gate: BTreeMap<HeadId, Vec<f64>>,
    /// `Att_h(x)ᵀ ∂L(x)/∂Att_h(x)`.
    pub chain_rule: BTreeMap<HeadId, Vec<f64>>,
}

/// Computes both forms of the per-sample sensitivity for every open head.
/// Each sample's loss is its own sentence-mean cross-entropy.
pub fn sample_sensitivities(model: &TransformerModel, data: &[Example]) -> Result<Sensitivities> {
    if data.is_empty() {
        return Err(ImportanceError::EmptyData);
    }
    let open: Vec<HeadId> = model
        .head_ids()
        .into_iter()
        .filter(|&id| !model.mask().is_closed(id))
        .collect();
    let mut gate: BTreeMap<HeadId, Vec<f64>> = open.iter().map(|&id| (id, Vec::with_capacity(data.len()))).collect();
    let mut chain_rule = gate.clone();
    for chunk in data.chunks(ESTIMATION_BATCH) {
        let batch = Batch::new(chunk)?;
        let mut g = Graph::new();
        // Parameters must be differentiable so that every head output,
        // including those of the first layer, receives a gradient.
        let w = model.weights().bind(&mut g);
        let mask = model.mask();
        let gates = Gates::inputs(&mut g, model, batch.size, |id| mask.gate(id));
        let fwd = model.forward(&mut g, &w, &batch, &gates)?;
        let loss = model.loss(&mut g, &fwd, &batch, LossReduction::ExampleSum)?;
        let grads = g.backward(loss).map_err(ModelError::from)?;
        for &id in &open {
            let xi = gates.get(id).expect("gate for every head");
            gate.get_mut(&id)
                .expect("open head")
                .extend_from_slice(grads.get(xi).data());
            let att = fwd.heads[&id];
            let value = g.value(att);
            let upstream = grads.get(att);
            let per = value.len() / batch.size;
            let out = chain_rule.get_mut(&id).expect("open head");
            for (v, u) in value.data().chunks(per).zip(upstream.data().chunks(per)) {
                out.push(kahan_sum(v.iter().zip(u).map(|(a, b)| a * b)));
            }
        }
    }
    Ok(Sensitivities { gate, chain_rule })
}

fn importance_from(sens: &Sensitivities, n_samples: usize) -> ImportanceTable {
    let raw = sens
        .chain_rule
        .iter()
        .map(|(&id, v)| (id, kahan_sum(v.iter().map(|x| x.abs())) / n_samples as f64))
        .collect();
    ImportanceTable::from_raw(raw, n_samples)
}

/// `I_h` for every head of a fully unmasked model.
pub fn estimate_importance(model: &TransformerModel, data: &[Example]) -> Result<ImportanceTable> {
    if data.is_empty() {
        return Err(ImportanceError::EmptyData);
    }
    if !model.mask().is_all_open() {
        return Err(ImportanceError::ClosedGates(model.mask().closed().collect()));
    }
    estimate_active_importance(model, data)
}

/// `I_h` for the open heads of a partially pruned model; closed heads are
/// absent from the table (and rank at −∞).
pub fn estimate_active_importance(model: &TransformerModel, data: &[Example]) -> Result<ImportanceTable> {
    let sens = sample_sensitivities(model, data)?;
    Ok(importance_from(&sens, data.len()))
}

/// Recomputes `normalized` from `raw`: each (kind, layer) group is divided by
/// its ℓ2 norm; all-zero groups stay zero.
pub fn normalize_by_layer(table: ImportanceTable) -> ImportanceTable {
    let mut groups: BTreeMap<(AttentionKind, usize), Vec<f64>> = BTreeMap::new();
    for (id, &v) in &table.raw {
        groups.entry((id.kind, id.layer)).or_default().push(v * v);
    }
    let norms: BTreeMap<_, f64> = groups.into_iter().map(|(k, sq)| (k, kahan_sum(sq).sqrt())).collect();
    let normalized = table
        .raw
        .iter()
        .map(|(id, &v)| {
            let n = norms[&(id.kind, id.layer)];
            (*id, if n > 0.0 { v / n } else { 0.0 })
        })
        .collect();
    ImportanceTable { normalized, ..table }
}

/// Significance test applied to each ablated head against the full model.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "test")]
pub enum StatTest {
    None,
    /// Two-sided paired bootstrap (min of both one-sided p-values, doubled).
    Bootstrap {
        n_resamples: usize,
        seed: u64,
    },
    /// Two-sided paired t-test on per-example scores.
    TTest,
}

impl Default for StatTest {
    fn default() -> Self {
        StatTest::Bootstrap {
            n_resamples: DEFAULT_RESAMPLES,
            seed: 0,
        }
    }
}

impl StatTest {
    pub fn run(&self, base: &PerExample, other: &PerExample) -> Result<Option<SignificanceResult>> {
        Ok(match *self {
            StatTest::None => None,
            StatTest::Bootstrap { n_resamples, seed } => Some(two_sided_bootstrap(base, other, n_resamples, seed)?),
            StatTest::TTest => Some(paired_t_test(&sentence_scores(base), &sentence_scores(other))?),
        })
    }
}

/// Per-example scalar scores for the t-test: the score itself, the example's
/// own ratio, or its sentence-level BLEU.
pub fn sentence_scores(per: &PerExample) -> Vec<f64> {
    match per {
        PerExample::Scores(v) => v.clone(),
        PerExample::Ratios(v) => v
            .iter()
            .map(|&(n, d)| if d > 0.0 { 100.0 * n / d } else { 100.0 })
            .collect(),
        PerExample::Bleu(v) => v.iter().map(|s| s.score()).collect(),
    }
}

/// Outcome of masking one head.
#[derive(Clone, Debug, PartialEq)]
pub struct DeltaEntry {
    /// Score of the model with this head masked.
    pub score: f64,
    /// `score − base_score`.
    pub delta: f64,
    pub significance: Option<SignificanceResult>,
}

impl DeltaEntry {
    pub fn p_value(&self) -> Option<f64> {
        self.significance.as_ref().map(|s| s.p_value)
    }

    pub fn is_significant(&self) -> bool {
        self.significance.as_ref().is_some_and(|s| s.significant_at_01)
    }
}

/// Ablate-one results: per-head metric change when only that head is masked.
#[derive(Clone, Debug, PartialEq)]
pub struct DeltaTable {
    pub metric: Metric,
    pub base_score: f64,
    pub n_examples: usize,
    pub entries: BTreeMap<HeadId, DeltaEntry>,
}

/// One bar of the Fig. 1 histogram.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistogramBin {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
}

impl DeltaTable {
    pub fn delta(&self, id: HeadId) -> Option<f64> {
        self.entries.get(&id).map(|e| e.delta)
    }

    pub fn deltas(&self) -> BTreeMap<HeadId, f64> {
        self.entries.iter().map(|(id, e)| (*id, e.delta)).collect()
    }

    pub fn n_significant(&self) -> usize {
        self.entries.values().filter(|e| e.is_significant()).count()
    }

    /// Distribution of heads by masked-model score (Fig. 1), in bins of
    /// `width` anchored at multiples of `width`.
    pub fn histogram(&self, width: f64) -> Vec<HistogramBin> {
        assert!(width > 0.0, "histogram bin width must be positive");
        let mut counts: BTreeMap<i64, usize> = BTreeMap::new();
        for e in self.entries.values() {
            *counts.entry((e.score / width).floor() as i64).or_default() += 1;
        }
        let (Some(&first), Some(&last)) = (counts.keys().next(), counts.keys().next_back()) else {
            return Vec::new();
        };
        (first..=last)
            .map(|k| HistogramBin {
                lo: k as f64 * width,
                hi: (k + 1) as f64 * width,
                count: counts.get(&k).copied().unwrap_or(0),
            })
            .collect()
    }
}

/// Evaluates the model with exactly `closed` added to its current mask.
pub(crate) fn evaluate_with_closed(
    model: &TransformerModel,
    closed: impl IntoIterator<Item = HeadId>,
    eval: &[Example],
    metric: Metric,
) -> Result<EvalResult> {
    let mut mask: HeadMask = model.mask().clone();
    for id in closed {
        mask.close(id);
    }
    Ok(evaluate(&model.with_mask(mask), eval, metric)?)
}

/// Masks each open head in turn and records the metric change, optionally
/// testing each change for significance against the unmasked model. The
/// caller's model is never modified.
pub fn ablate_each(model: &TransformerModel, eval: &[Example], metric: Metric, test: StatTest) -> Result<DeltaTable> {
    let base = evaluate(model, eval, metric)?;
    let mut entries = BTreeMap::new();
    for id in model.head_ids() {
        if model.mask().is_closed(id) {
            continue;
        }
        let masked = evaluate_with_closed(model, [id], eval, metric)?;
        let significance = test.run(&base.per_example, &masked.per_example)?;
        entries.insert(
            id,
            DeltaEntry {
                score: masked.score,
                delta: masked.score - base.score,
                significance,
            },
        );
    }
    Ok(DeltaTable {
        metric,
        base_score: base.score,
        n_examples: base.n,
        entries,
    })
}

/// Ablate-one deltas without significance testing (the oracle ordering of Fig. 3).
pub fn oracle_delta_scores(model: &TransformerModel, eval: &[Example], metric: Metric) -> Result<DeltaTable> {
    ablate_each(model, eval, metric, StatTest::None)
}

/// One row of the tabular head format.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadRow {
    pub id: HeadId,
    pub raw: Option<f64>,
    pub normalized: Option<f64>,
    pub delta: Option<f64>,
    pub p_value: Option<f64>,
}

/// Tabular text view joining an importance table and/or a delta table.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadTable {
    pub meta: BTreeMap<String, String>,
    pub rows: Vec<HeadRow>,
}

pub const HEAD_TABLE_COLUMNS: [&str; 7] = ["kind", "layer", "head", "raw", "normalized", "delta", "p_value"];

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |v| format!("{v:?}"))
}

fn parse_opt(s: &str, line: usize) -> Result<Option<f64>> {
    if s == "NA" {
        return Ok(None);
    }
    s.parse()
        .map(Some)
        .map_err(|_| ImportanceError::Format(format!("line {line}: bad number {s:?}")))
}

impl HeadTable {
    pub fn new(importance: Option<&ImportanceTable>, deltas: Option<&DeltaTable>) -> Self {
        let mut meta = BTreeMap::new();
        let mut ids = BTreeSet::new();
        if let Some(t) = importance {
            meta.insert("n_samples".into(), t.n_samples.to_string());
            ids.extend(t.raw.keys().copied());
        }
        if let Some(d) = deltas {
            meta.insert("metric".into(), d.metric.to_string());
            meta.insert("base_score".into(), format!("{:?}", d.base_score));
            meta.insert("n_examples".into(), d.n_examples.to_string());
            ids.extend(d.entries.keys().copied());
        }
        let rows = ids
            .into_iter()
            .map(|id| HeadRow {
                id,
                raw: importance.and_then(|t| t.raw.get(&id).copied()),
                normalized: importance.and_then(|t| t.normalized.get(&id).copied()),
                delta: deltas.and_then(|d| d.delta(id)),
                p_value: deltas.and_then(|d| d.entries.get(&id).and_then(DeltaEntry::p_value)),
            })
            .collect();
        HeadTable { meta, rows }
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.meta {
            let _ = writeln!(out, "# {k}={v}");
        }
        let _ = writeln!(out, "{}", HEAD_TABLE_COLUMNS.join("\t"));
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{}\t{}\t{}\t{}\t{}\t{}\t{}",
                r.id.kind,
                r.id.layer,
                r.id.head,
                fmt_opt(r.raw),
                fmt_opt(r.normalized),
                fmt_opt(r.delta),
                fmt_opt(r.p_value)
            );
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut meta = BTreeMap::new();
        let mut rows = Vec::new();
        let mut saw_header = false;
        for (i, line) in text.lines().enumerate() {
            let n = i + 1;
            if line.trim().is_empty() {
                continue;
            }
            if let Some(m) = line.strip_prefix('#') {
                let (k, v) = m
                    .trim()
                    .split_once('=')
                    .ok_or_else(|| ImportanceError::Format(format!("line {n}: metadata without '='")))?;
                meta.insert(k.trim().to_string(), v.trim().to_string());
                continue;
            }
            let cols: Vec<&str> = line.split('\t').collect();
            if !saw_header {
                if cols != HEAD_TABLE_COLUMNS {
                    return Err(ImportanceError::Format(format!("line {n}: unexpected header {line:?}")));
                }
                saw_header = true;
                continue;
            }
            if cols.len() != HEAD_TABLE_COLUMNS.len() {
                return Err(ImportanceError::Format(format!("line {n}: expected 7 columns")));
            }
            let kind: AttentionKind = cols[0]
                .parse()
                .map_err(|_| ImportanceError::Format(format!("line {n}: bad kind {:?}", cols[0])))?;
            let int = |s: &str| {
                s.parse::<usize>()
                    .map_err(|_| ImportanceError::Format(format!("line {n}: bad index {s:?}")))
            };
            rows.push(HeadRow {
                id: HeadId::new(kind, int(cols[1])?, int(cols[2])?),
                raw: parse_opt(cols[3], n)?,
                normalized: parse_opt(cols[4], n)?,
                delta: parse_opt(cols[5], n)?,
                p_value: parse_opt(cols[6], n)?,
            });
        }
        if !saw_header {
            return Err(ImportanceError::Format("missing header row".into()));
        }
        Ok(HeadTable { meta, rows })
    }

    fn meta_value<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        self.meta
            .get(key)
            .ok_or_else(|| ImportanceError::Format(format!("missing metadata {key}")))?
            .parse()
            .map_err(|_| ImportanceError::Format(format!("bad metadata {key}")))
    }

    /// Rebuilds the delta table; p-values become significance flags at p < 0.01.
    pub fn delta_table(&self) -> Result<DeltaTable> {
        let metric: Metric = self.meta_value("metric")?;
        let base_score: f64 = self.meta_value("base_score")?;
        let n_examples: usize = self.meta_value("n_examples")?;
        let mut entries = BTreeMap::new();
        for r in &self.rows {
            let delta = r
                .delta
                .ok_or_else(|| ImportanceError::Format(format!("no delta for head {}", r.id)))?;
            entries.insert(
                r.id,
                DeltaEntry {
                    score: base_score + delta,
                    delta,
                    significance: r.p_value.map(|p| SignificanceResult {
                        test: stats::TestKind::TwoSidedBootstrap,
                        p_value: p,
                        n_resamples: None,
                        dof: None,
                        significant_at_01: p < SIGNIFICANCE_LEVEL,
                        degenerate: false,
                    }),
                },
            );
        }
        Ok(DeltaTable {
            metric,
            base_score,
            n_examples,
            entries,
        })
    }

    pub fn importance_table(&self) -> Result<ImportanceTable> {
        let n_samples: usize = self.meta_value("n_samples")?;
        let mut raw = BTreeMap::new();
        let mut normalized = BTreeMap::new();
        for r in &self.rows {
            let (Some(a), Some(b)) = (r.raw, r.normalized) else {
                return Err(ImportanceError::Format(format!("no importance for head {}", r.id)));
            };
            raw.insert(r.id, a);
            normalized.insert(r.id, b);
        }
        Ok(ImportanceTable {
            raw,
            normalized,
            n_samples,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_model, synth_corpus, Corpus, CorpusSpec, TaskSpec};
    use crate::tensor::Tensor;

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

    fn rel(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-300)
    }

    fn zero_output(model: &mut TransformerModel, id: HeadId) {
        for layer in model.weights_mut().mha_layers_mut() {
            if layer.kind == id.kind && layer.layer == id.layer {
                let w = &mut layer.heads[id.head].w_o;
                *w = Tensor::zeros(w.shape());
            }
        }
    }

    #[test]
    fn chain_rule_equals_gate_gradient() {
        for task in [TaskSpec::Reversal, TaskSpec::PairMatch] {
            let (m, c) = setup(task, 3);
            let s = sample_sensitivities(&m, &c.train).unwrap();
            for (id, gate) in &s.gate {
                for (a, b) in gate.iter().zip(&s.chain_rule[id]) {
                    assert!(rel(*a, *b) < 1e-10 || (a - b).abs() < 1e-14, "{id}: {a} vs {b}");
                }
            }
        }
    }

    #[test]
    fn gate_gradient_matches_finite_differences() {
        let (m, c) = setup(TaskSpec::Reversal, 5);
        let data = &c.train[..3];
        let s = sample_sensitivities(&m, data).unwrap();
        let eps = 1e-3;
        for id in [
            HeadId::new(AttentionKind::EncEnc, 1, 2),
            HeadId::new(AttentionKind::EncDec, 0, 0),
            HeadId::new(AttentionKind::DecDec, 1, 3),
        ] {
            for (i, ex) in data.iter().enumerate() {
                let batch = Batch::new(std::slice::from_ref(ex)).unwrap();
                let loss_at = |xi: f64| {
                    let mut g = Graph::inference();
                    let w = m.weights().bind_constant(&mut g);
                    let gates = Gates::inputs(&mut g, &m, 1, |h| if h == id { xi } else { 1.0 });
                    let fwd = m.forward(&mut g, &w, &batch, &gates).unwrap();
                    let loss = m.loss(&mut g, &fwd, &batch, LossReduction::ExampleSum).unwrap();
                    g.value(loss).item().unwrap()
                };
                let fd = (loss_at(1.0 + eps) - loss_at(1.0 - eps)) / (2.0 * eps);
                let an = s.gate[&id][i];
                assert!(rel(fd, an) < 1e-4, "{id} sample {i}: fd {fd} vs {an}");
            }
        }
    }

    #[test]
    fn zero_head_scores_zero_and_all_nonnegative() {
        let (mut m, c) = setup(TaskSpec::Reversal, 1);
        let id = HeadId::new(AttentionKind::EncDec, 1, 2);
        zero_output(&mut m, id);
        let t = estimate_importance(&m, &c.train).unwrap();
        assert_eq!(t.raw[&id], 0.0);
        assert_eq!(t.len(), m.n_heads_total());
        assert!(t.raw.values().all(|v| *v >= 0.0));
        assert_eq!(t.n_samples, c.train.len());
    }

    #[test]
    fn identical_heads_score_identically() {
        let (mut m, c) = setup(TaskSpec::Reversal, 2);
        for layer in m.weights_mut().mha_layers_mut() {
            if layer.kind == AttentionKind::EncEnc && layer.layer == 0 {
                layer.heads[1] = layer.heads[0].clone();
            }
        }
        let t = estimate_importance(&m, &c.train).unwrap();
        let a = t.raw[&HeadId::new(AttentionKind::EncEnc, 0, 0)];
        let b = t.raw[&HeadId::new(AttentionKind::EncEnc, 0, 1)];
        assert!(rel(a, b) < 1e-12, "{a} vs {b}");
    }

    #[test]
    fn estimation_errors() {
        let (m, c) = setup(TaskSpec::Reversal, 0);
        assert!(matches!(estimate_importance(&m, &[]), Err(ImportanceError::EmptyData)));
        let id = HeadId::new(AttentionKind::DecDec, 0, 0);
        let masked = m.with_mask(HeadMask::closing([id]));
        assert!(matches!(
            estimate_importance(&masked, &c.train),
            Err(ImportanceError::ClosedGates(v)) if v == vec![id]
        ));
        let active = estimate_active_importance(&masked, &c.train).unwrap();
        assert!(!active.raw.contains_key(&id));
        assert_eq!(active.rank_score(id), f64::NEG_INFINITY);
        assert_eq!(active.len(), m.n_heads_total() - 1);
    }

    #[test]
    fn estimation_is_batch_order_stable() {
        let (m, c) = setup(TaskSpec::PairMatch, 4);
        let a = estimate_importance(&m, &c.train).unwrap();
        let mut rev = c.train.clone();
        rev.reverse();
        let b = estimate_importance(&m, &rev).unwrap();
        for (id, v) in &a.raw {
            assert!((v - b.raw[id]).abs() <= 1e-12 * v.abs().max(1.0));
        }
    }

    fn table(values: &[(AttentionKind, usize, usize, f64)]) -> ImportanceTable {
        ImportanceTable::from_raw(
            values.iter().map(|&(k, l, h, v)| (HeadId::new(k, l, h), v)).collect(),
            1,
        )
    }

    #[test]
    fn layer_normalization() {
        use AttentionKind::*;
        let t = table(&[
            (SelfOnly, 0, 0, 3.0),
            (SelfOnly, 0, 1, 4.0),
            (SelfOnly, 1, 0, 2.5),
            (EncDec, 0, 0, 0.0),
            (EncDec, 0, 1, 0.0),
        ]);
        let n = |k, l, h| t.normalized[&HeadId::new(k, l, h)];
        assert!((n(SelfOnly, 0, 0) - 0.6).abs() < 1e-15);
        assert!((n(SelfOnly, 0, 1) - 0.8).abs() < 1e-15);
        assert_eq!(n(SelfOnly, 1, 0), 1.0);
        assert_eq!(n(EncDec, 0, 0), 0.0);
        assert_eq!(n(EncDec, 0, 1), 0.0);
        let twice = normalize_by_layer(normalize_by_layer(t.clone()));
        for (id, v) in &t.normalized {
            assert!((v - twice.normalized[id]).abs() < 1e-12);
        }
    }

    #[test]
    fn delta_table_matches_independent_reevaluation() {
        let (mut m, c) = setup(TaskSpec::Reversal, 6);
        let zeroed = HeadId::new(AttentionKind::EncEnc, 0, 3);
        zero_output(&mut m, zeroed);
        let before = m.mask().clone();
        let d = oracle_delta_scores(&m, &c.eval_in_domain, Metric::TokenAccuracy).unwrap();
        assert_eq!(m.mask(), &before);
        assert_eq!(d.entries.len(), m.n_heads_total());
        assert_eq!(d.delta(zeroed), Some(0.0));
        let base = evaluate(&m, &c.eval_in_domain, Metric::TokenAccuracy).unwrap().score;
        assert_eq!(d.base_score, base);
        for id in m.head_ids() {
            let mut probe = m.clone();
            probe.set_mask(HeadMask::closing([id]));
            let s = evaluate(&probe, &c.eval_in_domain, Metric::TokenAccuracy)
                .unwrap()
                .score;
            assert_eq!(d.entries[&id].score, s);
            assert_eq!(d.entries[&id].delta, s - base);
        }
    }

    #[test]
    fn zeroed_head_is_never_significant() {
        let (mut m, c) = setup(TaskSpec::PairMatch, 7);
        let zeroed = HeadId::new(AttentionKind::SelfOnly, 1, 1);
        zero_output(&mut m, zeroed);
        for test in [StatTest::default(), StatTest::TTest] {
            let d = ablate_each(&m, &c.eval_in_domain, Metric::ClassificationAccuracy, test).unwrap();
            let e = &d.entries[&zeroed];
            assert_eq!(e.delta, 0.0);
            assert!(!e.is_significant());
            assert_eq!(e.p_value(), Some(1.0));
        }
    }

    #[test]
    fn histogram_counts_every_head() {
        let (m, c) = setup(TaskSpec::Reversal, 8);
        let d = oracle_delta_scores(&m, &c.eval_in_domain, Metric::TokenAccuracy).unwrap();
        let h = d.histogram(5.0);
        assert_eq!(h.iter().map(|b| b.count).sum::<usize>(), d.entries.len());
        assert!(h.windows(2).all(|w| w[0].hi == w[1].lo));
    }

    #[test]
    fn tsv_round_trip_is_exact() {
        let (m, c) = setup(TaskSpec::Reversal, 9);
        let imp = estimate_importance(&m, &c.train[..8]).unwrap();
        let d = ablate_each(&m, &c.eval_in_domain, Metric::Bleu, StatTest::default()).unwrap();
        let t = HeadTable::new(Some(&imp), Some(&d));
        let text = t.to_tsv();
        let back = HeadTable::parse(&text).unwrap();
        assert_eq!(back, t);
        assert_eq!(back.importance_table().unwrap(), imp);
        let dt = back.delta_table().unwrap();
        assert_eq!(dt.base_score, d.base_score);
        assert_eq!(dt.deltas(), d.deltas());
        assert!(HeadTable::parse("kind\tlayer\n").is_err());
        let json = serde_json::to_string(&imp).unwrap();
        assert_eq!(serde_json::from_str::<ImportanceTable>(&json).unwrap(), imp);
    }
}
