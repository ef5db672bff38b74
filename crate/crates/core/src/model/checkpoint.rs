//! Versioned binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic    8 bytes   "PRUNELAB"
//! version  u32       FORMAT_VERSION
//! hlen     u64       length of the JSON header
//! header   hlen bytes: {config, epoch, log, head_counts, closed_heads, n_tensors}
//! n_tensors × { name_len u32, name utf-8, ndim u32, dims u64×ndim, data f64×prod(dims) }
//! ```
//!
//! Tensors are stored in the model's canonical parameter order; loading
//! matches them by name and checks shapes.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use super::train::EpochLog;
use super::transformer::TransformerModel;
use super::{ModelError, Result};
use crate::attention::{AttentionKind, HeadId, HeadMask};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"PRUNELAB";
pub const FORMAT_VERSION: u32 = 1;

/// A model snapshot with its training log up to `epoch`.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub epoch: usize,
    pub model: TransformerModel,
    pub log: Vec<EpochLog>,
}

#[derive(Serialize, Deserialize)]
struct LayerHeads {
    kind: AttentionKind,
    layer: usize,
    n_heads: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    epoch: usize,
    log: Vec<EpochLog>,
    head_counts: Vec<LayerHeads>,
    closed_heads: Vec<HeadId>,
    n_tensors: usize,
}

fn format_err(msg: impl Into<String>) -> ModelError {
    ModelError::Checkpoint(msg.into())
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

/// Guards allocations driven by untrusted length fields.
const MAX_FIELD: u64 = 1 << 32;

impl Checkpoint {
    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        let named = self.model.weights().named();
        let header = Header {
            config: self.model.config().clone(),
            epoch: self.epoch,
            log: self.log.clone(),
            head_counts: self
                .model
                .head_counts()
                .into_iter()
                .map(|((kind, layer), n_heads)| LayerHeads { kind, layer, n_heads })
                .collect(),
            closed_heads: self.model.mask().closed().collect(),
            n_tensors: named.len(),
        };
        let json = serde_json::to_vec(&header).map_err(|e| format_err(e.to_string()))?;
        w.write_all(MAGIC)?;
        w.write_all(&FORMAT_VERSION.to_le_bytes())?;
        w.write_all(&(json.len() as u64).to_le_bytes())?;
        w.write_all(&json)?;
        for (name, t) in &named {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&(t.ndim() as u32).to_le_bytes())?;
            for &d in t.shape() {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            for v in t.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)
            .map_err(|_| format_err("truncated magic header"))?;
        if &magic != MAGIC {
            return Err(format_err("not a prunelab checkpoint (bad magic)"));
        }
        let version = read_u32(r)?;
        if version != FORMAT_VERSION {
            return Err(format_err(format!(
                "unsupported checkpoint version {version} (expected {FORMAT_VERSION})"
            )));
        }
        let hlen = read_u64(r)?;
        if hlen > MAX_FIELD {
            return Err(format_err("header length out of range"));
        }
        let mut json = vec![0u8; hlen as usize];
        r.read_exact(&mut json)?;
        let header: Header = serde_json::from_slice(&json).map_err(|e| format_err(format!("bad header: {e}")))?;

        let mut tensors = BTreeMap::new();
        for _ in 0..header.n_tensors {
            let name_len = read_u32(r)? as usize;
            let mut name = vec![0u8; name_len];
            r.read_exact(&mut name)?;
            let name = String::from_utf8(name).map_err(|_| format_err("tensor name is not utf-8"))?;
            let ndim = read_u32(r)? as usize;
            if ndim > 8 {
                return Err(format_err(format!("tensor {name} has {ndim} dimensions")));
            }
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                let d = read_u64(r)?;
                if d == 0 || d > MAX_FIELD {
                    return Err(format_err(format!("tensor {name} has dimension {d}")));
                }
                shape.push(d as usize);
            }
            let n: usize = shape.iter().product();
            let mut bytes = vec![0u8; n * 8];
            r.read_exact(&mut bytes)?;
            let data = bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            tensors.insert(name, Tensor::new(shape, data)?);
        }
        let mut trailing = [0u8; 1];
        if r.read(&mut trailing)? != 0 {
            return Err(format_err("trailing bytes after last tensor"));
        }

        // Rebuild the parameter tree, honouring per-layer head counts of sliced models.
        let mut model = super::build_model(&header.config, 0)?;
        let counts: BTreeMap<(AttentionKind, usize), usize> = header
            .head_counts
            .iter()
            .map(|l| ((l.kind, l.layer), l.n_heads))
            .collect();
        for layer in model.weights_mut().mha_layers_mut() {
            let n = *counts
                .get(&(layer.kind, layer.layer))
                .ok_or_else(|| format_err(format!("no head count for {} layer {}", layer.kind, layer.layer)))?;
            if n > layer.heads.len() {
                return Err(format_err(format!(
                    "{} layer {} claims {n} heads",
                    layer.kind, layer.layer
                )));
            }
            layer.heads.truncate(n);
        }
        let mut missing = Vec::new();
        model
            .weights_mut()
            .visit_mut(&mut |name, slot| match tensors.remove(name) {
                Some(t) if t.shape() == slot.shape() => *slot = t,
                Some(t) => missing.push(format!("{name}: shape {:?}, expected {:?}", t.shape(), slot.shape())),
                None => missing.push(format!("{name}: missing")),
            });
        if !missing.is_empty() {
            return Err(format_err(format!("parameter mismatch: {}", missing.join("; "))));
        }
        if let Some(extra) = tensors.keys().next() {
            return Err(format_err(format!("unexpected tensor {extra}")));
        }
        model.set_mask(HeadMask::closing(header.closed_heads));
        Ok(Checkpoint {
            epoch: header.epoch,
            model,
            log: header.log,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => ModelError::MissingCheckpoint(path.display().to_string()),
            _ => e.into(),
        })?;
        Self::read_from(&mut BufReader::new(file))
    }

    /// Score recorded for this checkpoint's own epoch.
    pub fn recorded_score(&self) -> Option<f64> {
        self.log.iter().find(|l| l.epoch == self.epoch).map(|l| l.eval_score)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::corpus::{synth_corpus, CorpusSpec, TaskSpec};
    use crate::model::{build_model, evaluate, Task};
    use crate::stats::Metric;
    use std::collections::BTreeSet;

    fn sample() -> (Checkpoint, crate::model::Corpus) {
        let spec = CorpusSpec {
            train_size: 20,
            eval_size: 10,
            max_len: 4,
            ..CorpusSpec::new(TaskSpec::Reversal)
        };
        let corpus = synth_corpus(&spec, 0).unwrap();
        let model = build_model(&spec.model_config(2, 4, 8, 16), 9).unwrap();
        let log = vec![EpochLog {
            epoch: 0,
            train_loss: None,
            metric: Metric::SequenceAccuracy,
            eval_score: 0.0,
            eval_examples: 10,
        }];
        (Checkpoint { epoch: 0, model, log }, corpus)
    }

    #[test]
    fn round_trip_preserves_everything() {
        let (ckpt, corpus) = sample();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.ckpt");
        ckpt.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back, ckpt);
        let a = evaluate(&ckpt.model, &corpus.eval_in_domain, Metric::Bleu).unwrap();
        let b = evaluate(&back.model, &corpus.eval_in_domain, Metric::Bleu).unwrap();
        assert_eq!(a.score.to_bits(), b.score.to_bits());
    }

    #[test]
    fn round_trip_of_sliced_and_masked_model() {
        let (mut ckpt, _) = sample();
        let removed: BTreeSet<HeadId> = [HeadId::new(AttentionKind::EncDec, 1, 0)].into();
        let closed = HeadId::new(AttentionKind::DecDec, 0, 3);
        ckpt.model = ckpt
            .model
            .with_mask(HeadMask::closing(removed.iter().copied()))
            .remove_heads(&removed)
            .unwrap();
        ckpt.model.set_mask(HeadMask::closing([closed]));
        let mut buf = Vec::new();
        ckpt.write_to(&mut buf).unwrap();
        let back = Checkpoint::read_from(&mut buf.as_slice()).unwrap();
        assert_eq!(back, ckpt);
        assert_eq!(back.model.task(), Task::Translation);
    }

    #[test]
    fn corrupt_inputs_are_rejected() {
        let (ckpt, _) = sample();
        let mut buf = Vec::new();
        ckpt.write_to(&mut buf).unwrap();
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(
            Checkpoint::read_from(&mut bad.as_slice()),
            Err(ModelError::Checkpoint(_))
        ));
        let mut bad = buf.clone();
        bad[8] = 99;
        assert!(matches!(
            Checkpoint::read_from(&mut bad.as_slice()),
            Err(ModelError::Checkpoint(_))
        ));
        let truncated = &buf[..buf.len() - 3];
        assert!(Checkpoint::read_from(&mut &truncated[..]).is_err());
        let mut extra = buf.clone();
        extra.push(0);
        assert!(Checkpoint::read_from(&mut extra.as_slice()).is_err());
        assert!(matches!(
            Checkpoint::load(Path::new("/nonexistent/x.ckpt")),
            Err(ModelError::MissingCheckpoint(_))
        ));
    }
}
