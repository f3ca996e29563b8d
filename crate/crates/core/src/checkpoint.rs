//! Versioned checkpoint container: a text header (version, digest of the
//! JSON section), a JSON section (configs, vocabulary, label map, training
//! metadata, tensor manifest), then raw little-endian f64 tensor data.
//! Round-trips are bit-exact.

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::ner::NerParams;
use crate::nli::NliParams;
use crate::tensor::Tensor;
use crate::text::Vocabulary;
use crate::train::TrainConfig;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::Path;

const MAGIC: &[u8; 8] = b"LXGDCKPT";
const VERSION: &str = "v1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Ner,
    Nli,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub seed: u64,
    pub best_metric: f64,
    pub best_step: u64,
    /// Sequence-representation convention used by the pair model.
    pub pooling: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    kind: TaskKind,
    model: ModelConfig,
    train: TrainConfig,
    vocab: Vocabulary,
    labels: Vec<String>,
    meta: CheckpointMeta,
    tensors: Vec<(String, Vec<usize>)>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub kind: TaskKind,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub vocab: Vocabulary,
    pub labels: Vec<String>,
    pub meta: CheckpointMeta,
    pub tensors: Vec<(String, Tensor<f64>)>,
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let header = Header {
            kind: self.kind,
            model: self.model.clone(),
            train: self.train.clone(),
            vocab: self.vocab.clone(),
            labels: self.labels.clone(),
            meta: self.meta.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|(n, t)| (n.clone(), t.shape().to_vec()))
                .collect(),
        };
        let json = serde_json::to_vec(&header)
            .map_err(|e| Error::Checkpoint(format!("serializing header: {e}")))?;
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(format!("{VERSION}\n").as_bytes());
        buf.extend_from_slice(format!("digest={:016x}\n", fnv1a(&json)).as_bytes());
        buf.extend_from_slice(format!("json={}\n\n", json.len()).as_bytes());
        buf.extend_from_slice(&json);
        for (_, t) in &self.tensors {
            for &v in t.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        let tmp = path.with_extension("ckpt.tmp");
        let mut f = std::fs::File::create(&tmp)
            .map_err(|e| Error::io(format!("creating {}", tmp.display()), e))?;
        f.write_all(&buf)
            .map_err(|e| Error::io(format!("writing {}", tmp.display()), e))?;
        f.sync_all()
            .map_err(|e| Error::io(format!("flushing {}", tmp.display()), e))?;
        drop(f);
        std::fs::rename(&tmp, path)
            .map_err(|e| Error::io(format!("renaming to {}", path.display()), e))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)
            .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        let mut pos = 0usize;

        let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
            if *pos + n > bytes.len() {
                return Err(Error::Checkpoint("truncated file".into()));
            }
            let s = &bytes[*pos..*pos + n];
            *pos += n;
            Ok(s)
        };
        let take_line = |pos: &mut usize| -> Result<String> {
            let rest = &bytes[*pos..];
            let nl = rest
                .iter()
                .position(|&b| b == b'\n')
                .ok_or_else(|| Error::Checkpoint("truncated header".into()))?;
            let line = String::from_utf8(rest[..nl].to_vec())
                .map_err(|_| Error::Checkpoint("non-utf8 header".into()))?;
            *pos += nl + 1;
            Ok(line)
        };

        let magic = take(&mut pos, MAGIC.len())?;
        if magic != MAGIC {
            return Err(Error::Checkpoint("bad magic bytes".into()));
        }
        let version = take_line(&mut pos)?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported version {version:?} (reader supports {VERSION})"
            )));
        }
        let digest_line = take_line(&mut pos)?;
        let digest = digest_line
            .strip_prefix("digest=")
            .and_then(|d| u64::from_str_radix(d, 16).ok())
            .ok_or_else(|| Error::Checkpoint("malformed digest line".into()))?;
        let json_line = take_line(&mut pos)?;
        let json_len: usize = json_line
            .strip_prefix("json=")
            .and_then(|d| d.parse().ok())
            .ok_or_else(|| Error::Checkpoint("malformed json length line".into()))?;
        let blank = take_line(&mut pos)?;
        if !blank.is_empty() {
            return Err(Error::Checkpoint("malformed header terminator".into()));
        }

        let json = take(&mut pos, json_len)?;
        if fnv1a(json) != digest {
            return Err(Error::Checkpoint("header digest mismatch".into()));
        }
        let header: Header = serde_json::from_slice(json)
            .map_err(|e| Error::Checkpoint(format!("parsing header: {e}")))?;

        let mut tensors = Vec::with_capacity(header.tensors.len());
        for (name, shape) in &header.tensors {
            let numel: usize = shape.iter().product();
            let raw = take(&mut pos, numel * 8)?;
            let data: Vec<f64> = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            tensors.push((name.clone(), Tensor::from_vec(shape.clone(), data)?));
        }
        if pos != bytes.len() {
            return Err(Error::Checkpoint("trailing bytes after tensor data".into()));
        }
        Ok(Checkpoint {
            kind: header.kind,
            model: header.model,
            train: header.train,
            vocab: header.vocab,
            labels: header.labels,
            meta: header.meta,
            tensors,
        })
    }

    /// Rebuild tagging-model parameters from stored tensors.
    pub fn to_ner_params(&self) -> Result<NerParams<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut params = NerParams::new(self.model.encoder.clone(), &mut rng)?;
        restore(&mut params.named_tensors_mut(), &self.tensors)?;
        Ok(params)
    }

    /// Rebuild pair-model parameters from stored tensors.
    pub fn to_nli_params(&self) -> Result<NliParams<f64>> {
        let cnn = self
            .model
            .cnn
            .clone()
            .ok_or_else(|| Error::Checkpoint("pair checkpoint lacks cnn config".into()))?;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut params = NliParams::new(self.model.encoder.clone(), cnn, &mut rng)?;
        restore(&mut params.named_tensors_mut(), &self.tensors)?;
        Ok(params)
    }
}

fn restore(
    targets: &mut [(String, &mut Tensor<f64>)],
    stored: &[(String, Tensor<f64>)],
) -> Result<()> {
    if targets.len() != stored.len() {
        return Err(Error::Checkpoint(format!(
            "tensor count mismatch: model has {}, checkpoint has {}",
            targets.len(),
            stored.len()
        )));
    }
    for ((tname, t), (sname, s)) in targets.iter_mut().zip(stored) {
        if tname != sname {
            return Err(Error::Checkpoint(format!(
                "tensor order mismatch: expected {tname}, found {sname}"
            )));
        }
        if t.shape() != s.shape() {
            return Err(Error::Checkpoint(format!(
                "tensor {tname} shape mismatch: {:?} vs {:?}",
                t.shape(),
                s.shape()
            )));
        }
        t.data_mut().copy_from_slice(s.data());
    }
    Ok(())
}

/// Collect a model's named tensors into checkpoint form.
pub fn snapshot_tensors(named: &[(String, &Tensor<f64>)]) -> Vec<(String, Tensor<f64>)> {
    named
        .iter()
        .map(|(n, t)| (n.clone(), (*t).clone()))
        .collect()
}
