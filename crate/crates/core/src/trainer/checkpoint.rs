//! Binary checkpoint format.
//!
//! ```text
//! b"RMAE" | version: u32 LE | meta_len: u64 LE | meta (UTF-8 JSON) | f64 LE arrays
//! ```
//!
//! The metadata carries the model config, vocabulary, run state and an array
//! manifest (name, shape, byte offset into the array section). Arrays are
//! model parameters in manifest order followed, when present, by the Adam
//! first and second moments. Everything is written in a fixed order, so
//! save → load → save reproduces the same bytes.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::TrainConfig;
use crate::corpus::Vocab;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelParams};
use crate::optim::AdamState;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"RMAE";
pub const VERSION: u32 = 1;
const HEADER_LEN: usize = 16;

/// Where the run's random streams stand: the next step to draw for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    pub step: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams,
    pub vocab: Vocab,
    pub optimizer: Option<AdamState>,
    /// Optimizer steps taken since initialisation, across stages.
    pub step: u64,
    pub rng: RngState,
    pub train_config: Option<TrainConfig>,
    /// Ids of the checkpoints this one was trained from, oldest first.
    pub lineage: Vec<String>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ArrayEntry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct OptimizerMeta {
    step_count: u64,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Meta {
    model_config: ModelConfig,
    vocab: Vec<String>,
    step: u64,
    rng: RngState,
    train_config: Option<TrainConfig>,
    lineage: Vec<String>,
    optimizer: Option<OptimizerMeta>,
    arrays: Vec<ArrayEntry>,
}

impl Checkpoint {
    /// The id of the most recent ancestor, if any.
    pub fn base_id(&self) -> Option<&str> {
        self.lineage.last().map(String::as_str)
    }

    /// Content hash (hex SHA-256 of the serialized bytes).
    pub fn id(&self) -> Result<String> {
        let digest = Sha256::digest(self.to_bytes()?);
        Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
    }

    /// Checks that this checkpoint's model shape matches `expected`, naming
    /// the first differing field.
    pub fn ensure_config(&self, expected: &ModelConfig) -> Result<()> {
        let found = self.params.config();
        let fields: [(&str, String, String); 7] = [
            ("vocab_size", found.vocab_size.to_string(), expected.vocab_size.to_string()),
            ("d_model", found.d_model.to_string(), expected.d_model.to_string()),
            ("n_heads", found.n_heads.to_string(), expected.n_heads.to_string()),
            (
                "n_encoder_layers",
                found.n_encoder_layers.to_string(),
                expected.n_encoder_layers.to_string(),
            ),
            ("d_ff", found.d_ff.to_string(), expected.d_ff.to_string()),
            ("max_len", found.max_len.to_string(), expected.max_len.to_string()),
            (
                "dec_variant",
                format!("{:?}", found.dec_variant),
                format!("{:?}", expected.dec_variant),
            ),
        ];
        for (field, f, e) in fields {
            if f != e {
                return Err(Error::Compatibility {
                    field: field.into(),
                    found: f,
                    expected: e,
                });
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut arrays: Vec<(String, &Tensor)> = Vec::new();
        let mut entries = Vec::new();
        let mut offset = 0u64;
        let mut push_entry = |name: String, shape: Vec<usize>, len: usize| {
            entries.push(ArrayEntry { name, shape, offset });
            offset += 8 * len as u64;
        };
        for (name, t) in self.params.names().iter().zip(self.params.tensors()) {
            push_entry(name.clone(), t.shape().to_vec(), t.len());
            arrays.push((name.clone(), t));
        }
        let mut moments: Vec<&[f64]> = Vec::new();
        if let Some(adam) = &self.optimizer {
            if adam.first_moment.len() != self.params.tensors().len() {
                return Err(Error::Shape(format!(
                    "optimizer tracks {} arrays, model has {}",
                    adam.first_moment.len(),
                    self.params.tensors().len()
                )));
            }
            for (tag, set) in [("adam.m", &adam.first_moment), ("adam.v", &adam.second_moment)] {
                for (name, m) in self.params.names().iter().zip(set) {
                    push_entry(format!("{tag}.{name}"), vec![m.len()], m.len());
                    moments.push(m);
                }
            }
        }
        let meta = Meta {
            model_config: self.params.config().clone(),
            vocab: self.vocab.tokens().to_vec(),
            step: self.step,
            rng: self.rng,
            train_config: self.train_config.clone(),
            lineage: self.lineage.clone(),
            optimizer: self.optimizer.as_ref().map(|a| OptimizerMeta {
                step_count: a.step_count,
                lr: a.lr,
                beta1: a.beta1,
                beta2: a.beta2,
                eps: a.eps,
            }),
            arrays: entries,
        };
        let meta = serde_json::to_vec(&meta).map_err(|e| Error::Format(e.to_string()))?;
        let mut out = Vec::with_capacity(HEADER_LEN + meta.len() + offset as usize);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
        out.extend_from_slice(&meta);
        for data in arrays.iter().map(|(_, t)| t.data()).chain(moments) {
            for v in data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 {
            return Err(Error::Corrupt {
                offset: bytes.len() as u64,
                reason: "file ends inside the magic bytes".into(),
            });
        }
        if &bytes[..4] != MAGIC {
            return Err(Error::Format(format!(
                "bad magic {:?}, expected {:?}",
                &bytes[..4],
                MAGIC
            )));
        }
        if bytes.len() < HEADER_LEN {
            return Err(Error::Corrupt {
                offset: bytes.len() as u64,
                reason: "file ends inside the header".into(),
            });
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(Error::Format(format!(
                "unsupported version {version}, this build reads {VERSION}"
            )));
        }
        let meta_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
        let data_start = (HEADER_LEN as u64).checked_add(meta_len).filter(|&e| e <= bytes.len() as u64);
        let Some(data_start) = data_start else {
            return Err(Error::Corrupt {
                offset: bytes.len() as u64,
                reason: format!("metadata of {meta_len} bytes runs past end of file"),
            });
        };
        let data_start = data_start as usize;
        let meta: Meta = serde_json::from_slice(&bytes[HEADER_LEN..data_start]).map_err(|e| {
            Error::Corrupt {
                offset: HEADER_LEN as u64 + e.column() as u64,
                reason: format!("unreadable metadata: {e}"),
            }
        })?;

        let data = &bytes[data_start..];
        let mut expected_offset = 0u64;
        let mut read = |entry: &ArrayEntry| -> Result<Vec<f64>> {
            if entry.offset != expected_offset {
                return Err(Error::Corrupt {
                    offset: data_start as u64 + entry.offset,
                    reason: format!(
                        "array `{}` at offset {}, expected {expected_offset}",
                        entry.name, entry.offset
                    ),
                });
            }
            let len: usize = entry.shape.iter().product();
            let end = entry.offset + 8 * len as u64;
            if end > data.len() as u64 {
                return Err(Error::Corrupt {
                    offset: bytes.len() as u64,
                    reason: format!(
                        "array `{}` needs bytes up to {} but the file ends",
                        entry.name,
                        data_start as u64 + end
                    ),
                });
            }
            expected_offset = end;
            Ok(data[entry.offset as usize..end as usize]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect())
        };

        let n_params = crate::model::param_manifest(&meta.model_config).len();
        let n_arrays = if meta.optimizer.is_some() { 3 * n_params } else { n_params };
        if meta.arrays.len() != n_arrays {
            return Err(Error::Format(format!(
                "manifest lists {} arrays, expected {n_arrays}",
                meta.arrays.len()
            )));
        }
        let mut named = Vec::with_capacity(n_params);
        for entry in &meta.arrays[..n_params] {
            let values = read(entry)?;
            named.push((entry.name.clone(), Tensor::new(entry.shape.clone(), values)?));
        }
        let params = ModelParams::from_tensors(&meta.model_config, named)?;
        let optimizer = match &meta.optimizer {
            None => None,
            Some(o) => {
                let mut first = Vec::with_capacity(n_params);
                let mut second = Vec::with_capacity(n_params);
                for (k, entry) in meta.arrays[n_params..].iter().enumerate() {
                    let values = read(entry)?;
                    let expected = params.tensors()[k % n_params].len();
                    if values.len() != expected {
                        return Err(Error::Format(format!(
                            "moment `{}` has {} values, parameter has {expected}",
                            entry.name,
                            values.len()
                        )));
                    }
                    if k < n_params {
                        first.push(values);
                    } else {
                        second.push(values);
                    }
                }
                let state = AdamState {
                    first_moment: first,
                    second_moment: second,
                    step_count: o.step_count,
                    lr: o.lr,
                    beta1: o.beta1,
                    beta2: o.beta2,
                    eps: o.eps,
                };
                state.validate()?;
                Some(state)
            }
        };
        if expected_offset != data.len() as u64 {
            return Err(Error::Corrupt {
                offset: data_start as u64 + expected_offset,
                reason: format!("{} trailing bytes", data.len() as u64 - expected_offset),
            });
        }
        let vocab = Vocab::from_id_order(meta.vocab)?;
        if vocab.len() != params.config().vocab_size {
            return Err(Error::Compatibility {
                field: "vocab_size".into(),
                found: vocab.len().to_string(),
                expected: params.config().vocab_size.to_string(),
            });
        }
        Ok(Self {
            params,
            vocab,
            optimizer,
            step: meta.step,
            rng: meta.rng,
            train_config: meta.train_config,
            lineage: meta.lineage,
        })
    }
}

/// Writes `ckpt` to `path` atomically (temporary sibling, then rename).
pub fn save_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = ckpt.to_bytes()?;
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::Config(format!("{} is not a file path", path.display())))?;
    let tmp = path.with_file_name(format!(".{}.tmp", file_name.to_string_lossy()));
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    drop(f);
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes)
}

/// Loads a checkpoint and checks it against the model shape the caller
/// intends to use.
pub fn load_checkpoint_for(path: impl AsRef<Path>, expected: &ModelConfig) -> Result<Checkpoint> {
    let ckpt = load_checkpoint(path)?;
    ckpt.ensure_config(expected)?;
    Ok(ckpt)
}
