//! Pre-LN transformer: encoder–decoder translator and encoder-only classifier.
//!
//! Parameters live in a [`Weights`] tree that is generic over storage, so the
//! same structure holds owned tensors, graph variables after binding, and
//! gradients or optimizer state. Every leaf has a stable dotted name (e.g.
//! `decoder.1.cross_attn.head3.w_o`) used by checkpoints.

use std::collections::{BTreeMap, BTreeSet};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::{ModelConfig, Task};
use super::corpus::Example;
use super::{ModelError, Result, BOS, EOS, PAD};
use crate::attention::{attention_bias, mha_forward, AttentionKind, HeadId, HeadMask, HeadParams, MhaLayer};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct LayerNormParams<T> {
    pub gain: T,
    pub bias: T,
}

impl<T> LayerNormParams<T> {
    fn map<U>(&self, prefix: &str, f: &mut impl FnMut(&str, &T) -> U) -> LayerNormParams<U> {
        LayerNormParams {
            gain: f(&format!("{prefix}.gain"), &self.gain),
            bias: f(&format!("{prefix}.bias"), &self.bias),
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut impl FnMut(&str, &mut T)) {
        f(&format!("{prefix}.gain"), &mut self.gain);
        f(&format!("{prefix}.bias"), &mut self.bias);
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeedForward<T> {
    pub w_in: T,
    pub b_in: T,
    pub w_out: T,
    pub b_out: T,
}

impl<T> FeedForward<T> {
    fn map<U>(&self, prefix: &str, f: &mut impl FnMut(&str, &T) -> U) -> FeedForward<U> {
        FeedForward {
            w_in: f(&format!("{prefix}.w_in"), &self.w_in),
            b_in: f(&format!("{prefix}.b_in"), &self.b_in),
            w_out: f(&format!("{prefix}.w_out"), &self.w_out),
            b_out: f(&format!("{prefix}.b_out"), &self.b_out),
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut impl FnMut(&str, &mut T)) {
        f(&format!("{prefix}.w_in"), &mut self.w_in);
        f(&format!("{prefix}.b_in"), &mut self.b_in);
        f(&format!("{prefix}.w_out"), &mut self.w_out);
        f(&format!("{prefix}.b_out"), &mut self.b_out);
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderLayer<T> {
    pub attn_norm: LayerNormParams<T>,
    pub attn: MhaLayer<T>,
    pub ff_norm: LayerNormParams<T>,
    pub ff: FeedForward<T>,
}

impl<T> EncoderLayer<T> {
    fn map<U>(&self, prefix: &str, f: &mut impl FnMut(&str, &T) -> U) -> EncoderLayer<U> {
        EncoderLayer {
            attn_norm: self.attn_norm.map(&format!("{prefix}.attn_norm"), f),
            attn: self.attn.map(&format!("{prefix}.attn"), f),
            ff_norm: self.ff_norm.map(&format!("{prefix}.ff_norm"), f),
            ff: self.ff.map(&format!("{prefix}.ff"), f),
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut impl FnMut(&str, &mut T)) {
        self.attn_norm.visit_mut(&format!("{prefix}.attn_norm"), f);
        self.attn.visit_mut(&format!("{prefix}.attn"), f);
        self.ff_norm.visit_mut(&format!("{prefix}.ff_norm"), f);
        self.ff.visit_mut(&format!("{prefix}.ff"), f);
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderLayer<T> {
    pub self_norm: LayerNormParams<T>,
    pub self_attn: MhaLayer<T>,
    pub cross_norm: LayerNormParams<T>,
    pub cross_attn: MhaLayer<T>,
    pub ff_norm: LayerNormParams<T>,
    pub ff: FeedForward<T>,
}

impl<T> DecoderLayer<T> {
    fn map<U>(&self, prefix: &str, f: &mut impl FnMut(&str, &T) -> U) -> DecoderLayer<U> {
        DecoderLayer {
            self_norm: self.self_norm.map(&format!("{prefix}.self_norm"), f),
            self_attn: self.self_attn.map(&format!("{prefix}.self_attn"), f),
            cross_norm: self.cross_norm.map(&format!("{prefix}.cross_norm"), f),
            cross_attn: self.cross_attn.map(&format!("{prefix}.cross_attn"), f),
            ff_norm: self.ff_norm.map(&format!("{prefix}.ff_norm"), f),
            ff: self.ff.map(&format!("{prefix}.ff"), f),
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut impl FnMut(&str, &mut T)) {
        self.self_norm.visit_mut(&format!("{prefix}.self_norm"), f);
        self.self_attn.visit_mut(&format!("{prefix}.self_attn"), f);
        self.cross_norm.visit_mut(&format!("{prefix}.cross_norm"), f);
        self.cross_attn.visit_mut(&format!("{prefix}.cross_attn"), f);
        self.ff_norm.visit_mut(&format!("{prefix}.ff_norm"), f);
        self.ff.visit_mut(&format!("{prefix}.ff"), f);
    }
}

/// The full parameter tree. Classifiers have no target embedding, decoder or
/// decoder norm; their output projection maps the CLS state to class logits.
#[derive(Clone, Debug, PartialEq)]
pub struct Weights<T> {
    pub src_embed: T,
    pub tgt_embed: Option<T>,
    pub encoder: Vec<EncoderLayer<T>>,
    pub encoder_norm: LayerNormParams<T>,
    pub decoder: Vec<DecoderLayer<T>>,
    pub decoder_norm: Option<LayerNormParams<T>>,
    pub out_proj: T,
    pub out_bias: T,
}

impl<T> Weights<T> {
    /// Structure-preserving map over every leaf, in a fixed order.
    pub fn map<U>(&self, f: &mut impl FnMut(&str, &T) -> U) -> Weights<U> {
        Weights {
            src_embed: f("src_embed", &self.src_embed),
            tgt_embed: self.tgt_embed.as_ref().map(|t| f("tgt_embed", t)),
            encoder: self
                .encoder
                .iter()
                .enumerate()
                .map(|(l, layer)| layer.map(&format!("encoder.{l}"), f))
                .collect(),
            encoder_norm: self.encoder_norm.map("encoder_norm", f),
            decoder: self
                .decoder
                .iter()
                .enumerate()
                .map(|(l, layer)| layer.map(&format!("decoder.{l}"), f))
                .collect(),
            decoder_norm: self.decoder_norm.as_ref().map(|n| n.map("decoder_norm", f)),
            out_proj: f("out_proj", &self.out_proj),
            out_bias: f("out_bias", &self.out_bias),
        }
    }

    /// Mutable visit of every leaf, in the same order as [`Weights::map`].
    pub fn visit_mut(&mut self, f: &mut impl FnMut(&str, &mut T)) {
        f("src_embed", &mut self.src_embed);
        if let Some(t) = self.tgt_embed.as_mut() {
            f("tgt_embed", t);
        }
        for (l, layer) in self.encoder.iter_mut().enumerate() {
            layer.visit_mut(&format!("encoder.{l}"), f);
        }
        self.encoder_norm.visit_mut("encoder_norm", f);
        for (l, layer) in self.decoder.iter_mut().enumerate() {
            layer.visit_mut(&format!("decoder.{l}"), f);
        }
        if let Some(n) = self.decoder_norm.as_mut() {
            n.visit_mut("decoder_norm", f);
        }
        f("out_proj", &mut self.out_proj);
        f("out_bias", &mut self.out_bias);
    }

    /// All attention layers, ordered by [`HeadId`] (kind, then layer).
    pub fn mha_layers(&self) -> Vec<&MhaLayer<T>> {
        let mut layers: Vec<&MhaLayer<T>> = self.encoder.iter().map(|l| &l.attn).collect();
        layers.extend(self.decoder.iter().map(|l| &l.cross_attn));
        layers.extend(self.decoder.iter().map(|l| &l.self_attn));
        layers.sort_by_key(|l| (l.kind, l.layer));
        layers
    }

    pub fn mha_layers_mut(&mut self) -> Vec<&mut MhaLayer<T>> {
        let mut layers: Vec<&mut MhaLayer<T>> = self.encoder.iter_mut().map(|l| &mut l.attn).collect();
        for dec in self.decoder.iter_mut() {
            layers.push(&mut dec.cross_attn);
            layers.push(&mut dec.self_attn);
        }
        layers.sort_by_key(|l| (l.kind, l.layer));
        layers
    }
}

impl Weights<Tensor> {
    pub fn named(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        self.map(&mut |name, t| out.push((name.to_string(), t.clone())));
        out
    }

    pub fn param_count(&self) -> usize {
        let mut n = 0;
        self.map(&mut |_, t| n += t.len());
        n
    }

    /// Binds every parameter as a gradient-tracked graph input.
    pub fn bind(&self, g: &mut Graph) -> Weights<Var> {
        self.map(&mut |_, t| g.input(t.clone()))
    }

    /// Binds every parameter as a constant (no gradients needed).
    pub fn bind_constant(&self, g: &mut Graph) -> Weights<Var> {
        self.map(&mut |_, t| g.constant(t.clone()))
    }
}

/// Sinusoidal positional encodings, `[max_len, d]`.
pub fn sinusoidal_positions(max_len: usize, d: usize) -> Tensor {
    let mut data = vec![0.0; max_len * d];
    for pos in 0..max_len {
        for i in 0..d {
            let freq = 1.0 / 10000f64.powf((2 * (i / 2)) as f64 / d as f64);
            let angle = pos as f64 * freq;
            data[pos * d + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    Tensor::from_parts(vec![max_len, d], data)
}

fn init_weights(config: &ModelConfig, rng: &mut ChaCha8Rng) -> Weights<Tensor> {
    let d = config.d_model;
    let dh = config.d_head();
    let f = config.d_ff;
    let in_std = 1.0 / (d as f64).sqrt();
    let norm = || LayerNormParams {
        gain: Tensor::ones(&[d]),
        bias: Tensor::zeros(&[d]),
    };
    let mha = |kind: AttentionKind, layer: usize, rng: &mut ChaCha8Rng| MhaLayer {
        kind,
        layer,
        heads: (0..config.n_heads)
            .map(|_| HeadParams {
                w_q: Tensor::randn(&[dh, d], in_std, rng),
                w_k: Tensor::randn(&[dh, d], in_std, rng),
                w_v: Tensor::randn(&[dh, d], in_std, rng),
                // the d_h × N_h = d inputs of the summed output projections
                w_o: Tensor::randn(&[d, dh], in_std, rng),
            })
            .collect(),
    };
    let ff = |rng: &mut ChaCha8Rng| FeedForward {
        w_in: Tensor::randn(&[f, d], in_std, rng),
        b_in: Tensor::zeros(&[f]),
        w_out: Tensor::randn(&[d, f], 1.0 / (f as f64).sqrt(), rng),
        b_out: Tensor::zeros(&[d]),
    };
    let translator = config.task == Task::Translation;
    let enc_kind = if translator {
        AttentionKind::EncEnc
    } else {
        AttentionKind::SelfOnly
    };
    let src_embed = Tensor::randn(&[config.src_vocab, d], 1.0, rng);
    let tgt_embed = translator.then(|| Tensor::randn(&[config.tgt_vocab, d], 1.0, rng));
    let encoder = (0..config.n_layers)
        .map(|l| EncoderLayer {
            attn_norm: norm(),
            attn: mha(enc_kind, l, rng),
            ff_norm: norm(),
            ff: ff(rng),
        })
        .collect();
    let decoder = if translator {
        (0..config.n_layers)
            .map(|l| DecoderLayer {
                self_norm: norm(),
                self_attn: mha(AttentionKind::DecDec, l, rng),
                cross_norm: norm(),
                cross_attn: mha(AttentionKind::EncDec, l, rng),
                ff_norm: norm(),
                ff: ff(rng),
            })
            .collect()
    } else {
        Vec::new()
    };
    Weights {
        src_embed,
        tgt_embed,
        encoder,
        encoder_norm: norm(),
        decoder,
        decoder_norm: translator.then(norm),
        out_proj: Tensor::randn(&[config.tgt_vocab, d], in_std, rng),
        out_bias: Tensor::zeros(&[config.tgt_vocab]),
    }
}

/// A padded batch of examples in model layout.
///
/// Translation: encoder input `source EOS`, decoder input `BOS target`,
/// decoder output `target EOS`. Classification: encoder input as stored
/// (`BOS A SEP B`), label per example. Pad flags are true on padding.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub task: Task,
    pub size: usize,
    pub src_len: usize,
    pub src_ids: Vec<usize>,
    pub src_pad: Vec<bool>,
    pub tgt_len: usize,
    pub tgt_in: Vec<usize>,
    pub tgt_out: Vec<usize>,
    pub tgt_pad: Vec<bool>,
    pub labels: Vec<usize>,
}

/// How per-position losses are combined into the scalar that is differentiated.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossReduction {
    /// Mean over every unpadded position in the batch (training objective).
    BatchMean,
    /// Sum over examples of each example's own mean loss, so per-example gates
    /// receive exactly the gradient of that example's sentence-mean loss.
    ExampleSum,
}

fn pad_rows(rows: &[Vec<usize>]) -> (usize, Vec<usize>, Vec<bool>) {
    let len = rows.iter().map(Vec::len).max().unwrap_or(0);
    let mut ids = Vec::with_capacity(rows.len() * len);
    let mut pad = Vec::with_capacity(rows.len() * len);
    for row in rows {
        ids.extend(row);
        pad.extend(std::iter::repeat_n(false, row.len()));
        ids.extend(std::iter::repeat_n(PAD, len - row.len()));
        pad.extend(std::iter::repeat_n(true, len - row.len()));
    }
    (len, ids, pad)
}

impl Batch {
    pub fn new(examples: &[Example]) -> Result<Self> {
        let first = examples.first().ok_or(ModelError::EmptyData)?;
        let task = first.task();
        let mut src_rows = Vec::with_capacity(examples.len());
        let mut tgt_in_rows = Vec::new();
        let mut tgt_out_rows = Vec::new();
        let mut labels = Vec::new();
        for ex in examples {
            match (task, ex) {
                (Task::Translation, Example::Translation { source, target }) => {
                    if source.is_empty() {
                        return Err(ModelError::InvalidData("empty source sequence".into()));
                    }
                    let mut src = source.clone();
                    src.push(EOS);
                    src_rows.push(src);
                    let mut tin = Vec::with_capacity(target.len() + 1);
                    tin.push(BOS);
                    tin.extend(target);
                    tgt_in_rows.push(tin);
                    let mut tout = target.clone();
                    tout.push(EOS);
                    tgt_out_rows.push(tout);
                }
                (Task::Classification, Example::Classification { tokens, label }) => {
                    if tokens.is_empty() {
                        return Err(ModelError::InvalidData("empty token sequence".into()));
                    }
                    src_rows.push(tokens.clone());
                    labels.push(*label);
                }
                _ => {
                    return Err(ModelError::InvalidData(
                        "batch mixes translation and classification".into(),
                    ))
                }
            }
        }
        let (src_len, src_ids, src_pad) = pad_rows(&src_rows);
        let (tgt_len, tgt_in, tgt_pad) = pad_rows(&tgt_in_rows);
        let (_, tgt_out, _) = pad_rows(&tgt_out_rows);
        Ok(Batch {
            task,
            size: examples.len(),
            src_len,
            src_ids,
            src_pad,
            tgt_len,
            tgt_in,
            tgt_out,
            tgt_pad,
            labels,
        })
    }

    /// Flattened targets aligned with the flattened logits rows.
    pub fn targets(&self) -> &[usize] {
        match self.task {
            Task::Translation => &self.tgt_out,
            Task::Classification => &self.labels,
        }
    }

    pub fn loss_weights(&self, reduction: LossReduction) -> Vec<f64> {
        match self.task {
            Task::Classification => {
                let w = match reduction {
                    LossReduction::BatchMean => 1.0 / self.size as f64,
                    LossReduction::ExampleSum => 1.0,
                };
                vec![w; self.size]
            }
            Task::Translation => {
                let total = self.tgt_pad.iter().filter(|p| !**p).count() as f64;
                let mut w = vec![0.0; self.tgt_pad.len()];
                for (b, row) in self.tgt_pad.chunks(self.tgt_len).enumerate() {
                    let len = row.iter().filter(|p| !**p).count() as f64;
                    for (t, &pad) in row.iter().enumerate() {
                        if !pad {
                            w[b * self.tgt_len + t] = match reduction {
                                LossReduction::BatchMean => 1.0 / total,
                                LossReduction::ExampleSum => 1.0 / len,
                            };
                        }
                    }
                }
                w
            }
        }
    }
}

/// Gate variables for every head of a model, keyed by [`HeadId`].
#[derive(Clone, Debug)]
pub struct Gates {
    vars: BTreeMap<HeadId, Var>,
}

impl Gates {
    /// Constant `[1]` gates carrying the model's current mask.
    pub fn from_mask(g: &mut Graph, model: &TransformerModel) -> Self {
        let open = g.constant(Tensor::ones(&[1]));
        let closed = g.constant(Tensor::zeros(&[1]));
        let vars = model
            .head_ids()
            .into_iter()
            .map(|id| (id, if model.mask.is_closed(id) { closed } else { open }))
            .collect();
        Gates { vars }
    }

    /// Differentiable gates of shape `[batch]`, one value per example, so the
    /// backward pass yields per-example `∂L_b/∂ξ_h`. `value` may return any
    /// real number; this is how finite-difference oracles perturb ξ.
    pub fn inputs(g: &mut Graph, model: &TransformerModel, batch: usize, value: impl Fn(HeadId) -> f64) -> Self {
        let vars = model
            .head_ids()
            .into_iter()
            .map(|id| (id, g.input(Tensor::full(&[batch], value(id)))))
            .collect();
        Gates { vars }
    }

    pub fn get(&self, id: HeadId) -> Option<Var> {
        self.vars.get(&id).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (HeadId, Var)> + '_ {
        self.vars.iter().map(|(k, v)| (*k, *v))
    }

    fn for_layer(&self, layer: &MhaLayer<Var>) -> Result<Vec<Var>> {
        (0..layer.n_heads())
            .map(|h| {
                let id = layer.head_id(h);
                self.get(id)
                    .ok_or_else(|| ModelError::InvalidData(format!("no gate for head {id}")))
            })
            .collect()
    }
}

/// Graph nodes from one forward pass.
#[derive(Clone, Debug)]
pub struct Forward {
    /// `[rows, vocab]`: one row per decoder position (translation) or per example (classification).
    pub logits: Var,
    /// Ungated per-head outputs `Att_h`, tapped for importance estimation.
    pub heads: BTreeMap<HeadId, Var>,
}

pub(crate) struct Dropout<'a> {
    pub rate: f64,
    pub rng: Option<&'a mut ChaCha8Rng>,
}

impl Dropout<'_> {
    pub fn none() -> Self {
        Dropout { rate: 0.0, rng: None }
    }

    fn apply(&mut self, g: &mut Graph, x: Var) -> Result<Var> {
        match self.rng.as_deref_mut() {
            Some(rng) if self.rate > 0.0 => Ok(g.dropout(x, self.rate, rng)?),
            _ => Ok(x),
        }
    }
}

/// Transformer with its current head mask.
#[derive(Clone, Debug, PartialEq)]
pub struct TransformerModel {
    config: ModelConfig,
    weights: Weights<Tensor>,
    mask: HeadMask,
    positions: Tensor,
}

/// Deterministically initializes a model; all head gates start at 1.
pub fn build_model(config: &ModelConfig, seed: u64) -> Result<TransformerModel> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let weights = init_weights(config, &mut rng);
    Ok(TransformerModel::from_parts(config.clone(), weights, HeadMask::new()))
}

impl TransformerModel {
    pub(crate) fn from_parts(config: ModelConfig, weights: Weights<Tensor>, mask: HeadMask) -> Self {
        let positions = sinusoidal_positions(config.max_len, config.d_model);
        TransformerModel {
            config,
            weights,
            mask,
            positions,
        }
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn task(&self) -> Task {
        self.config.task
    }

    pub fn weights(&self) -> &Weights<Tensor> {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut Weights<Tensor> {
        &mut self.weights
    }

    pub fn mask(&self) -> &HeadMask {
        &self.mask
    }

    pub fn set_mask(&mut self, mask: HeadMask) {
        self.mask = mask;
    }

    pub fn with_mask(&self, mask: HeadMask) -> Self {
        let mut m = self.clone();
        m.mask = mask;
        m
    }

    pub fn param_count(&self) -> usize {
        self.weights.param_count()
    }

    pub fn attention_param_count(&self) -> usize {
        self.weights.mha_layers().iter().map(|l| l.param_count()).sum()
    }

    /// Fraction of parameters in multi-head attention (§4.3: about one third).
    pub fn attention_share(&self) -> f64 {
        self.attention_param_count() as f64 / self.param_count() as f64
    }

    pub fn kinds(&self) -> &'static [AttentionKind] {
        self.config.task.kinds()
    }

    pub fn mha_layer(&self, kind: AttentionKind, layer: usize) -> Option<&MhaLayer<Tensor>> {
        self.weights
            .mha_layers()
            .into_iter()
            .find(|l| l.kind == kind && l.layer == layer)
    }

    /// Every head currently present in the model, in [`HeadId`] order.
    pub fn head_ids(&self) -> Vec<HeadId> {
        self.weights
            .mha_layers()
            .iter()
            .flat_map(|l| (0..l.n_heads()).map(|h| l.head_id(h)))
            .collect()
    }

    pub fn n_heads_total(&self) -> usize {
        self.weights.mha_layers().iter().map(|l| l.n_heads()).sum()
    }

    /// Current head count of every attention layer.
    pub fn head_counts(&self) -> BTreeMap<(AttentionKind, usize), usize> {
        self.weights
            .mha_layers()
            .iter()
            .map(|l| ((l.kind, l.layer), l.n_heads()))
            .collect()
    }

    /// Physically removes heads. Surviving heads are renumbered densely within
    /// their layer (order preserved) and mask entries follow them; entries for
    /// removed heads are dropped.
    pub fn remove_heads(&self, removed: &BTreeSet<HeadId>) -> Result<Self> {
        let present: BTreeSet<HeadId> = self.head_ids().into_iter().collect();
        if let Some(id) = removed.iter().find(|id| !present.contains(id)) {
            return Err(ModelError::InvalidData(format!("head {id} is not in the model")));
        }
        let mut weights = self.weights.clone();
        let mut mask = HeadMask::new();
        for layer in weights.mha_layers_mut() {
            let mut kept = Vec::with_capacity(layer.heads.len());
            for (h, params) in std::mem::take(&mut layer.heads).into_iter().enumerate() {
                let old = HeadId::new(layer.kind, layer.layer, h);
                if removed.contains(&old) {
                    continue;
                }
                if self.mask.is_closed(old) {
                    mask.close(HeadId::new(layer.kind, layer.layer, kept.len()));
                }
                kept.push(params);
            }
            layer.heads = kept;
        }
        Ok(TransformerModel::from_parts(self.config.clone(), weights, mask))
    }

    fn position_block(&self, g: &mut Graph, batch: usize, len: usize) -> Result<Var> {
        if len > self.config.max_len {
            return Err(ModelError::SequenceTooLong {
                len,
                max: self.config.max_len,
            });
        }
        let d = self.config.d_model;
        let rows = &self.positions.data()[..len * d];
        let mut data = Vec::with_capacity(batch * len * d);
        for _ in 0..batch {
            data.extend_from_slice(rows);
        }
        Ok(g.constant(Tensor::from_parts(vec![batch, len, d], data)))
    }

    fn check_tokens(ids: &[usize], vocab: usize) -> Result<()> {
        match ids.iter().find(|&&t| t >= vocab) {
            Some(&token) => Err(ModelError::TokenOutOfRange { token, vocab }),
            None => Ok(()),
        }
    }

    fn feed_forward(g: &mut Graph, ff: &FeedForward<Var>, x: Var) -> Result<Var> {
        let h = g.linear(x, ff.w_in, Some(ff.b_in))?;
        let h = g.relu(h)?;
        Ok(g.linear(h, ff.w_out, Some(ff.b_out))?)
    }

    #[allow(clippy::too_many_arguments)]
    fn attend(
        &self,
        g: &mut Graph,
        layer: &MhaLayer<Var>,
        query: Var,
        memory: Var,
        bias: Var,
        gates: &Gates,
        heads: &mut BTreeMap<HeadId, Var>,
    ) -> Result<Var> {
        let layer_gates = gates.for_layer(layer)?;
        let divisor = self
            .config
            .attention_scale
            .divisor(self.config.d_model, self.config.d_head());
        let out = mha_forward(g, layer, query, memory, bias, &layer_gates, divisor)?;
        for (h, v) in out.heads.iter().enumerate() {
            heads.insert(layer.head_id(h), *v);
        }
        Ok(out.output)
    }

    /// Encoder stack; returns the final-normed states `[batch, len, d]`.
    #[allow(clippy::too_many_arguments)]
    pub(crate) fn encode(
        &self,
        g: &mut Graph,
        w: &Weights<Var>,
        gates: &Gates,
        ids: &[usize],
        pad: &[bool],
        batch: usize,
        len: usize,
        drop: &mut Dropout<'_>,
        heads: &mut BTreeMap<HeadId, Var>,
    ) -> Result<Var> {
        Self::check_tokens(ids, self.config.src_vocab)?;
        let emb = g.embedding(w.src_embed, ids, &[batch, len])?;
        let pos = self.position_block(g, batch, len)?;
        let x = g.add(emb, pos)?;
        let mut x = drop.apply(g, x)?;
        let bias = attention_bias(batch, len, len, pad, false)?;
        let bias = g.constant(bias);
        for layer in &w.encoder {
            let h = g.layer_norm(x, layer.attn_norm.gain, layer.attn_norm.bias)?;
            let a = self.attend(g, &layer.attn, h, h, bias, gates, heads)?;
            let a = drop.apply(g, a)?;
            x = g.add(x, a)?;
            let h = g.layer_norm(x, layer.ff_norm.gain, layer.ff_norm.bias)?;
            let f = Self::feed_forward(g, &layer.ff, h)?;
            let f = drop.apply(g, f)?;
            x = g.add(x, f)?;
        }
        Ok(g.layer_norm(x, w.encoder_norm.gain, w.encoder_norm.bias)?)
    }

    /// Decoder stack over encoder states; returns logits `[batch·len, vocab]`.
    #[allow(clippy::too_many_arguments)]
    pub(crate) fn decode(
        &self,
        g: &mut Graph,
        w: &Weights<Var>,
        gates: &Gates,
        memory: Var,
        src_pad: &[bool],
        tgt_ids: &[usize],
        tgt_pad: &[bool],
        batch: usize,
        len: usize,
        drop: &mut Dropout<'_>,
        heads: &mut BTreeMap<HeadId, Var>,
    ) -> Result<Var> {
        let (Some(tgt_embed), Some(dec_norm)) = (w.tgt_embed, w.decoder_norm.as_ref()) else {
            return Err(ModelError::WrongTask {
                op: "decode",
                task: self.config.task,
            });
        };
        Self::check_tokens(tgt_ids, self.config.tgt_vocab)?;
        let src_len = g.shape(memory)[1];
        let emb = g.embedding(tgt_embed, tgt_ids, &[batch, len])?;
        let pos = self.position_block(g, batch, len)?;
        let x = g.add(emb, pos)?;
        let mut x = drop.apply(g, x)?;
        let self_bias = attention_bias(batch, len, len, tgt_pad, true)?;
        let self_bias = g.constant(self_bias);
        let cross_bias = attention_bias(batch, len, src_len, src_pad, false)?;
        let cross_bias = g.constant(cross_bias);
        for layer in &w.decoder {
            let h = g.layer_norm(x, layer.self_norm.gain, layer.self_norm.bias)?;
            let a = self.attend(g, &layer.self_attn, h, h, self_bias, gates, heads)?;
            let a = drop.apply(g, a)?;
            x = g.add(x, a)?;
            let h = g.layer_norm(x, layer.cross_norm.gain, layer.cross_norm.bias)?;
            let c = self.attend(g, &layer.cross_attn, h, memory, cross_bias, gates, heads)?;
            let c = drop.apply(g, c)?;
            x = g.add(x, c)?;
            let h = g.layer_norm(x, layer.ff_norm.gain, layer.ff_norm.bias)?;
            let f = Self::feed_forward(g, &layer.ff, h)?;
            let f = drop.apply(g, f)?;
            x = g.add(x, f)?;
        }
        let x = g.layer_norm(x, dec_norm.gain, dec_norm.bias)?;
        let d = self.config.d_model;
        let x = g.reshape(x, &[batch * len, d])?;
        Ok(g.linear(x, w.out_proj, Some(w.out_bias))?)
    }

    pub(crate) fn forward_with(
        &self,
        g: &mut Graph,
        w: &Weights<Var>,
        batch: &Batch,
        gates: &Gates,
        drop: &mut Dropout<'_>,
    ) -> Result<Forward> {
        if batch.task != self.config.task {
            return Err(ModelError::WrongTask {
                op: "forward",
                task: self.config.task,
            });
        }
        let mut heads = BTreeMap::new();
        let (b, ns) = (batch.size, batch.src_len);
        let memory = self.encode(g, w, gates, &batch.src_ids, &batch.src_pad, b, ns, drop, &mut heads)?;
        let logits = match self.config.task {
            Task::Translation => self.decode(
                g,
                w,
                gates,
                memory,
                &batch.src_pad,
                &batch.tgt_in,
                &batch.tgt_pad,
                b,
                batch.tgt_len,
                drop,
                &mut heads,
            )?,
            Task::Classification => {
                let d = self.config.d_model;
                let flat = g.reshape(memory, &[b * ns, d])?;
                let cls_rows: Vec<usize> = (0..b).map(|i| i * ns).collect();
                let cls = g.gather_rows(flat, &cls_rows)?;
                g.linear(cls, w.out_proj, Some(w.out_bias))?
            }
        };
        Ok(Forward { logits, heads })
    }

    /// Forward pass without dropout.
    pub fn forward(&self, g: &mut Graph, w: &Weights<Var>, batch: &Batch, gates: &Gates) -> Result<Forward> {
        self.forward_with(g, w, batch, gates, &mut Dropout::none())
    }

    /// Scalar loss node for a forward pass.
    pub fn loss(&self, g: &mut Graph, fwd: &Forward, batch: &Batch, reduction: LossReduction) -> Result<Var> {
        let weights = batch.loss_weights(reduction);
        Ok(g.weighted_cross_entropy(fwd.logits, batch.targets(), &weights)?)
    }

    /// Teacher-forced logits under the current mask, without recording.
    pub fn logits(&self, batch: &Batch) -> Result<Tensor> {
        let mut g = Graph::inference();
        let w = self.weights.bind_constant(&mut g);
        let gates = Gates::from_mask(&mut g, self);
        let fwd = self.forward(&mut g, &w, batch, &gates)?;
        Ok(g.value(fwd.logits).clone())
    }

    /// Mean loss (batch-mean reduction) under the current mask.
    pub fn batch_loss(&self, batch: &Batch) -> Result<f64> {
        let logits = self.logits(batch)?;
        let weights = batch.loss_weights(LossReduction::BatchMean);
        Ok(crate::ops::weighted_cross_entropy(&logits, batch.targets(), &weights)?)
    }
}
