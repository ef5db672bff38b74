//! Scaled bilinear attention, multi-head attention and head gating.
//!
//! Each head owns four projections: `W_q, W_k, W_v ∈ R^{d_h×d}` and
//! `W_o ∈ R^{d×d_h}`. A head's output is
//! `Att_h(x, q) = W_o Σ_i α_i W_v x_i` with
//! `α = softmax(qᵀ W_qᵀ W_k x_i / s)`, and the layer output is
//! `Σ_h ξ_h · Att_h(x, q)` where `ξ_h ∈ {0, 1}` is the head's gate.
//!
//! The scale `s` defaults to `√d` (full model width); `√d_h` is available via
//! [`AttentionScale::HeadDim`].

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{Graph, Var};
use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AttentionError {
    #[error("every key position is masked for query {query} of sequence {sequence}")]
    AllKeysMasked { sequence: usize, query: usize },
    #[error("head {head} out of range for a layer with {n_heads} heads")]
    HeadOutOfRange { head: usize, n_heads: usize },
    #[error("gate values must be exactly 0.0 or 1.0, got {0}")]
    InvalidGate(f64),
    #[error("inconsistent head parameters: {0}")]
    InconsistentParams(String),
    #[error("unknown attention kind {0:?}")]
    UnknownKind(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T, E = AttentionError> = std::result::Result<T, E>;

/// Where an attention layer sits in the network.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AttentionKind {
    /// Encoder self-attention.
    EncEnc,
    /// Decoder attention over encoder states.
    EncDec,
    /// Causal decoder self-attention.
    DecDec,
    /// Self-attention in a single-stack (classifier) model.
    #[serde(rename = "self")]
    SelfOnly,
}

impl AttentionKind {
    pub const TRANSLATOR: [AttentionKind; 3] = [Self::EncEnc, Self::EncDec, Self::DecDec];
    pub const CLASSIFIER: [AttentionKind; 1] = [Self::SelfOnly];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::EncEnc => "enc-enc",
            Self::EncDec => "enc-dec",
            Self::DecDec => "dec-dec",
            Self::SelfOnly => "self",
        }
    }

    pub fn is_causal(self) -> bool {
        self == Self::DecDec
    }
}

impl fmt::Display for AttentionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AttentionKind {
    type Err = AttentionError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "enc-enc" | "encenc" => Ok(Self::EncEnc),
            "enc-dec" | "encdec" => Ok(Self::EncDec),
            "dec-dec" | "decdec" => Ok(Self::DecDec),
            "self" | "selfonly" => Ok(Self::SelfOnly),
            _ => Err(AttentionError::UnknownKind(s.to_string())),
        }
    }
}

/// One attention head: (kind, layer, head), all 0-based.
///
/// The derived ordering is the lexicographic (kind, layer, head) order used
/// for deterministic tie-breaking.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct HeadId {
    pub kind: AttentionKind,
    pub layer: usize,
    pub head: usize,
}

impl HeadId {
    pub fn new(kind: AttentionKind, layer: usize, head: usize) -> Self {
        Self { kind, layer, head }
    }
}

impl fmt::Display for HeadId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}/{}", self.kind, self.layer, self.head)
    }
}

/// Gate values ξ_h. Unlisted heads are open (1.0).
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct HeadMask {
    gates: BTreeMap<HeadId, f64>,
}

impl HeadMask {
    pub fn new() -> Self {
        Self::default()
    }

    /// Mask with every listed head closed.
    pub fn closing(heads: impl IntoIterator<Item = HeadId>) -> Self {
        let mut m = Self::new();
        for h in heads {
            m.close(h);
        }
        m
    }

    pub fn set(&mut self, head: HeadId, value: f64) -> Result<()> {
        if value == 1.0 {
            self.gates.remove(&head);
        } else if value == 0.0 {
            self.gates.insert(head, 0.0);
        } else {
            return Err(AttentionError::InvalidGate(value));
        }
        Ok(())
    }

    pub fn close(&mut self, head: HeadId) {
        self.gates.insert(head, 0.0);
    }

    pub fn open(&mut self, head: HeadId) {
        self.gates.remove(&head);
    }

    pub fn gate(&self, head: HeadId) -> f64 {
        self.gates.get(&head).copied().unwrap_or(1.0)
    }

    pub fn is_closed(&self, head: HeadId) -> bool {
        self.gate(head) == 0.0
    }

    /// Closed heads in (kind, layer, head) order.
    pub fn closed(&self) -> impl Iterator<Item = HeadId> + '_ {
        self.gates.iter().filter(|(_, &v)| v == 0.0).map(|(h, _)| *h)
    }

    pub fn n_closed(&self) -> usize {
        self.closed().count()
    }

    pub fn is_all_open(&self) -> bool {
        self.gates.is_empty()
    }
}

/// Denominator of the attention logits.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AttentionScale {
    /// `√d` with `d` the model width.
    #[default]
    ModelDim,
    /// `√d_h` with `d_h` the per-head width.
    HeadDim,
}

impl AttentionScale {
    pub fn divisor(self, d_model: usize, d_head: usize) -> f64 {
        match self {
            Self::ModelDim => (d_model as f64).sqrt(),
            Self::HeadDim => (d_head as f64).sqrt(),
        }
    }
}

/// Projections of one head, generic over storage (`Tensor` for owned
/// parameters, `Var` once bound to a graph).
#[derive(Clone, Debug, PartialEq)]
pub struct HeadParams<T> {
    pub w_q: T,
    pub w_k: T,
    pub w_v: T,
    pub w_o: T,
}

impl<T> HeadParams<T> {
    pub fn map<U>(&self, prefix: &str, f: &mut impl FnMut(&str, &T) -> U) -> HeadParams<U> {
        HeadParams {
            w_q: f(&format!("{prefix}.w_q"), &self.w_q),
            w_k: f(&format!("{prefix}.w_k"), &self.w_k),
            w_v: f(&format!("{prefix}.w_v"), &self.w_v),
            w_o: f(&format!("{prefix}.w_o"), &self.w_o),
        }
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut impl FnMut(&str, &mut T)) {
        f(&format!("{prefix}.w_q"), &mut self.w_q);
        f(&format!("{prefix}.w_k"), &mut self.w_k);
        f(&format!("{prefix}.w_v"), &mut self.w_v);
        f(&format!("{prefix}.w_o"), &mut self.w_o);
    }

    pub fn iter(&self) -> impl Iterator<Item = &T> {
        [&self.w_q, &self.w_k, &self.w_v, &self.w_o].into_iter()
    }
}

impl HeadParams<Tensor> {
    /// Validates shapes: `W_q, W_k, W_v` are `d_h×d` and `W_o` is `d×d_h`.
    pub fn new(w_q: Tensor, w_k: Tensor, w_v: Tensor, w_o: Tensor) -> Result<Self> {
        let in_shape = w_q.shape().to_vec();
        let [d_head, d_model] = in_shape[..] else {
            return Err(AttentionError::InconsistentParams(format!(
                "W_q has shape {in_shape:?}"
            )));
        };
        if w_k.shape() != in_shape || w_v.shape() != in_shape || w_o.shape() != [d_model, d_head] {
            return Err(AttentionError::InconsistentParams(format!(
                "W_q {:?}, W_k {:?}, W_v {:?}, W_o {:?}",
                w_q.shape(),
                w_k.shape(),
                w_v.shape(),
                w_o.shape()
            )));
        }
        Ok(Self { w_q, w_k, w_v, w_o })
    }

    pub fn d_model(&self) -> usize {
        self.w_q.shape()[1]
    }

    pub fn d_head(&self) -> usize {
        self.w_q.shape()[0]
    }

    pub fn param_count(&self) -> usize {
        self.iter().map(Tensor::len).sum()
    }

    pub fn bind(&self, g: &mut Graph) -> HeadParams<Var> {
        self.map("", &mut |_, t| g.input(t.clone()))
    }
}

/// One multi-head attention block.
#[derive(Clone, Debug, PartialEq)]
pub struct MhaLayer<T> {
    pub kind: AttentionKind,
    pub layer: usize,
    pub heads: Vec<HeadParams<T>>,
}

impl<T> MhaLayer<T> {
    pub fn n_heads(&self) -> usize {
        self.heads.len()
    }

    pub fn head_id(&self, head: usize) -> HeadId {
        HeadId::new(self.kind, self.layer, head)
    }

    pub fn map<U>(&self, prefix: &str, f: &mut impl FnMut(&str, &T) -> U) -> MhaLayer<U> {
        MhaLayer {
            kind: self.kind,
            layer: self.layer,
            heads: self
                .heads
                .iter()
                .enumerate()
                .map(|(h, p)| p.map(&format!("{prefix}.head{h}"), f))
                .collect(),
        }
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut impl FnMut(&str, &mut T)) {
        for (h, p) in self.heads.iter_mut().enumerate() {
            p.visit_mut(&format!("{prefix}.head{h}"), f);
        }
    }
}

impl MhaLayer<Tensor> {
    pub fn param_count(&self) -> usize {
        self.heads.iter().map(HeadParams::param_count).sum()
    }

    pub fn bind(&self, g: &mut Graph) -> MhaLayer<Var> {
        self.map("", &mut |_, t| g.input(t.clone()))
    }
}

/// Additive pre-softmax mask of shape `[batch, n_query, n_key]`: `0` where
/// attention is allowed, `-inf` for padded keys and (when `causal`) future
/// positions.
///
/// `key_pad[b * n_key + j]` is true when key `j` of sequence `b` is padding.
pub fn attention_bias(batch: usize, n_query: usize, n_key: usize, key_pad: &[bool], causal: bool) -> Result<Tensor> {
    assert_eq!(key_pad.len(), batch * n_key, "key padding mask length");
    let mut data = vec![0.0; batch * n_query * n_key];
    for b in 0..batch {
        for i in 0..n_query {
            let row = &mut data[(b * n_query + i) * n_key..(b * n_query + i + 1) * n_key];
            for (j, slot) in row.iter_mut().enumerate() {
                if key_pad[b * n_key + j] || (causal && j > i) {
                    *slot = f64::NEG_INFINITY;
                }
            }
            if row.iter().all(|v| *v == f64::NEG_INFINITY) {
                return Err(AttentionError::AllKeysMasked { sequence: b, query: i });
            }
        }
    }
    Ok(Tensor::from_parts(vec![batch, n_query, n_key], data))
}

/// Graph nodes produced by one multi-head attention evaluation.
#[derive(Clone, Debug)]
pub struct MhaOutput {
    /// `Σ_h ξ_h Att_h`, shape `[batch, n_query, d]`.
    pub output: Var,
    /// Ungated `Att_h`, one per head, each `[batch, n_query, d]`.
    pub heads: Vec<Var>,
    /// Attention weights α per head, each `[batch, n_query, n_key]`.
    pub weights: Vec<Var>,
}

/// Batched multi-head attention on a graph.
///
/// `query` is `[batch, n_query, d]`, `memory` is `[batch, n_key, d]`, `bias` is
/// the additive mask from [`attention_bias`] (bound as a constant) and `gates`
/// holds one `[batch]` (or `[1]`) gate node per head.
pub fn mha_forward(
    g: &mut Graph,
    layer: &MhaLayer<Var>,
    query: Var,
    memory: Var,
    bias: Var,
    gates: &[Var],
    divisor: f64,
) -> Result<MhaOutput> {
    assert_eq!(gates.len(), layer.n_heads(), "one gate per head");
    let mut heads = Vec::with_capacity(layer.n_heads());
    let mut weights = Vec::with_capacity(layer.n_heads());
    let mut output: Option<Var> = None;
    for (params, &gate) in layer.heads.iter().zip(gates) {
        let q = g.linear(query, params.w_q, None)?;
        let k = g.linear(memory, params.w_k, None)?;
        let v = g.linear(memory, params.w_v, None)?;
        let scores = g.matmul_nt(q, k)?;
        let scores = g.scale(scores, 1.0 / divisor)?;
        let scores = g.add(scores, bias)?;
        let alpha = g.softmax(scores, 2)?;
        let ctx = g.matmul(alpha, v)?;
        let head_out = g.linear(ctx, params.w_o, None)?;
        let gated = g.gate(head_out, gate)?;
        output = Some(match output {
            None => gated,
            Some(acc) => g.add(acc, gated)?,
        });
        heads.push(head_out);
        weights.push(alpha);
    }
    let output = match output {
        Some(o) => o,
        None => {
            // A layer whose heads were all sliced away is the zero function.
            let shape = g.shape(query).to_vec();
            g.constant(Tensor::zeros(&shape))
        }
    };
    Ok(MhaOutput { output, heads, weights })
}

/// Result of sequence-level multi-head attention.
#[derive(Clone, Debug)]
pub struct MhaResult {
    /// `Σ_h ξ_h Att_h(x, q)`, a `d`-vector.
    pub output: Tensor,
    /// `Att_h(x, q)` per head, ungated.
    pub heads: Vec<Tensor>,
    /// α per head over the key positions.
    pub weights: Vec<Tensor>,
}

fn sequence_inputs(g: &mut Graph, x: &Tensor, q: &Tensor, key_mask: &[bool]) -> Result<(Var, Var, Var)> {
    let [n, d] = *x.shape() else {
        return Err(TensorError::Invalid {
            op: "attention",
            msg: format!("x must be [n, d], got {:?}", x.shape()),
        }
        .into());
    };
    if q.shape() != [d] {
        return Err(TensorError::ShapeMismatch {
            op: "attention",
            lhs: x.shape().to_vec(),
            rhs: q.shape().to_vec(),
        }
        .into());
    }
    let memory = g.constant(x.reshape(&[1, n, d])?);
    let query = g.constant(q.reshape(&[1, 1, d])?);
    let bias = g.constant(attention_bias(1, 1, n, key_mask, false)?);
    Ok((query, memory, bias))
}

/// `Σ_h ξ_h Att_h(x, q)` for one query over one sequence `x` (`[n, d]`).
///
/// `key_mask[i]` is true when position `i` must not be attended.
pub fn multi_head_attention(
    layer: &MhaLayer<Tensor>,
    x: &Tensor,
    q: &Tensor,
    key_mask: &[bool],
    mask: &HeadMask,
    scale: AttentionScale,
) -> Result<MhaResult> {
    let mut g = Graph::inference();
    let (query, memory, bias) = sequence_inputs(&mut g, x, q, key_mask)?;
    let bound = layer.bind(&mut g);
    let gates: Vec<Var> = (0..layer.n_heads())
        .map(|h| g.constant(Tensor::scalar(mask.gate(layer.head_id(h)))))
        .collect();
    let d = x.shape()[1];
    let d_head = layer.heads.first().map_or(d, HeadParams::d_head);
    let out = mha_forward(&mut g, &bound, query, memory, bias, &gates, scale.divisor(d, d_head))?;
    let flat = |v: Var, len: usize| g.value(v).reshape(&[len]).expect("single query");
    let n = x.shape()[0];
    Ok(MhaResult {
        output: flat(out.output, d),
        heads: out.heads.iter().map(|&h| flat(h, d)).collect(),
        weights: out.weights.iter().map(|&w| flat(w, n)).collect(),
    })
}

/// `Att_h(x, q)` for one head, exactly as it enters the layer sum.
pub fn head_output(
    layer: &MhaLayer<Tensor>,
    head: usize,
    x: &Tensor,
    q: &Tensor,
    key_mask: &[bool],
    scale: AttentionScale,
) -> Result<Tensor> {
    if head >= layer.n_heads() {
        return Err(AttentionError::HeadOutOfRange {
            head,
            n_heads: layer.n_heads(),
        });
    }
    let params = &layer.heads[head];
    single_head_attention_scaled(params, x, q, key_mask, scale.divisor(params.d_model(), params.d_head()))
}

/// Single-head scaled bilinear attention `W_o Σ_i α_i W_v x_i`.
pub fn single_head_attention(
    params: &HeadParams<Tensor>,
    x: &Tensor,
    q: &Tensor,
    key_mask: &[bool],
    scale: AttentionScale,
) -> Result<Tensor> {
    single_head_attention_scaled(params, x, q, key_mask, scale.divisor(params.d_model(), params.d_head()))
}

fn single_head_attention_scaled(
    params: &HeadParams<Tensor>,
    x: &Tensor,
    q: &Tensor,
    key_mask: &[bool],
    divisor: f64,
) -> Result<Tensor> {
    let mut g = Graph::inference();
    let (query, memory, bias) = sequence_inputs(&mut g, x, q, key_mask)?;
    let layer = MhaLayer {
        kind: AttentionKind::SelfOnly,
        layer: 0,
        heads: vec![params.bind(&mut g)],
    };
    let gate = g.constant(Tensor::scalar(1.0));
    let out = mha_forward(&mut g, &layer, query, memory, bias, &[gate], divisor)?;
    Ok(g.value(out.heads[0]).reshape(&[params.d_model()])?)
}
