//! Versioned checkpoint files.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic      8 bytes  "CLKSEGCK"
//! version    u32
//! header_len u64
//! header     header_len bytes of JSON (model config, dtype, training
//!            snapshot, tensor table of name / shape / element offset)
//! payload    raw scalars of the header's dtype, tensors back to back
//! ```
//!
//! Optimizer moments are stored as tensors named `adam.m/<param>` and
//! `adam.v/<param>` so a resumed run continues bit-exactly.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::numeric::{Adam, AdamConfig, AdamState, Tensor};
use crate::scalar::{DType, Scalar};
use crate::trainer::TrainConfig;

pub const MAGIC: &[u8; 8] = b"CLKSEGCK";
pub const FORMAT_VERSION: u32 = 1;

/// Exact position of a ChaCha stream.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    /// Decimal `u128`.
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos.parse().unwrap_or(0));
        rng
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSnapshot {
    pub config: TrainConfig,
    /// Completed epochs.
    pub epoch: usize,
    pub step: u64,
    pub rng: RngState,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Header {
    model: ModelConfig,
    dtype: DType,
    train: Option<TrainSnapshot>,
    adam: Option<AdamHeader>,
    tensors: Vec<TensorEntry>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct AdamHeader {
    config: AdamConfig,
    /// Step count per parameter name.
    steps: BTreeMap<String, u64>,
}

/// Decoded checkpoint contents.
#[derive(Clone, Debug)]
pub struct Checkpoint<T> {
    pub model_config: ModelConfig,
    pub stored_dtype: DType,
    pub train: Option<TrainSnapshot>,
    pub tensors: Vec<(String, Tensor<T>)>,
    adam: Option<AdamHeader>,
}

const ADAM_M: &str = "adam.m/";
const ADAM_V: &str = "adam.v/";

/// Writes `model` (and optionally the optimizer and run state) to `path`.
/// The file is written next to its destination and renamed into place, so a
/// failed write never leaves a partial checkpoint behind.
pub fn save_checkpoint<T: Scalar>(
    path: &Path,
    model: &Model<T>,
    train: Option<(&Adam<T>, &TrainSnapshot)>,
) -> Result<()> {
    let mut tensors: Vec<(String, &Tensor<T>)> = model
        .store
        .iter()
        .map(|(_, p)| (p.name.clone(), p.value()))
        .collect();
    let mut adam_header = None;
    if let Some((adam, _)) = train {
        let mut steps = BTreeMap::new();
        for (id, state) in adam.states() {
            let name = &model.store.get(*id).name;
            steps.insert(name.clone(), state.step_count);
            tensors.push((format!("{ADAM_M}{name}"), &state.first_moment));
            tensors.push((format!("{ADAM_V}{name}"), &state.second_moment));
        }
        adam_header = Some(AdamHeader {
            config: adam.config,
            steps,
        });
    }
    let mut offset = 0;
    let entries = tensors
        .iter()
        .map(|(name, t)| {
            let e = TensorEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                offset,
            };
            offset += t.len();
            e
        })
        .collect();
    let header = Header {
        model: model.config.clone(),
        dtype: T::DTYPE,
        train: train.map(|(_, s)| s.clone()),
        adam: adam_header,
        tensors: entries,
    };
    let header_json = serde_json::to_vec(&header).expect("header serialises");
    let mut bytes = Vec::with_capacity(20 + header_json.len() + offset * T::DTYPE.size_of());
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    bytes.extend_from_slice(&(header_json.len() as u64).to_le_bytes());
    bytes.extend_from_slice(&header_json);
    for (_, t) in &tensors {
        for &v in t.data() {
            v.write_le(&mut bytes);
        }
    }
    let tmp = path.with_extension("ckpt.partial");
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let result = fs::write(&tmp, &bytes)
        .map_err(|e| Error::io(&tmp, e))
        .and_then(|_| fs::rename(&tmp, path).map_err(|e| Error::io(path, e)));
    if result.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    result
}

fn decode_values<T: Scalar>(payload: &[u8], dtype: DType, offset: usize, len: usize) -> Vec<T> {
    let size = dtype.size_of();
    let bytes = &payload[offset * size..(offset + len) * size];
    match dtype {
        DType::F32 => bytes
            .chunks_exact(4)
            .map(|c| T::from_f64_lossy(f32::read_le(c) as f64))
            .collect(),
        DType::F64 => bytes
            .chunks_exact(8)
            .map(|c| T::from_f64_lossy(f64::read_le(c)))
            .collect(),
    }
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<Checkpoint<T>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}

pub fn decode_checkpoint<T: Scalar>(bytes: &[u8]) -> Result<Checkpoint<T>> {
    let bad = |m: &str| Error::Checkpoint(m.to_string());
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(bad("not a checkpoint file (bad magic or truncated header)"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported format version {version} (this build reads {FORMAT_VERSION})"
        )));
    }
    let header_len = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    let header_end = 20usize
        .checked_add(header_len)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| bad("truncated header"))?;
    let header: Header = serde_json::from_slice(&bytes[20..header_end])
        .map_err(|e| Error::Checkpoint(format!("malformed header: {e}")))?;
    let payload = &bytes[header_end..];
    let total: usize = header.tensors.iter().map(|t| t.shape.iter().product::<usize>()).sum();
    if payload.len() != total * header.dtype.size_of() {
        return Err(Error::Checkpoint(format!(
            "payload is {} bytes, header describes {}",
            payload.len(),
            total * header.dtype.size_of()
        )));
    }
    let mut tensors = Vec::with_capacity(header.tensors.len());
    for e in &header.tensors {
        let len: usize = e.shape.iter().product();
        if e.offset + len > total {
            return Err(Error::Checkpoint(format!("tensor `{}` overruns the payload", e.name)));
        }
        let data = decode_values(payload, header.dtype, e.offset, len);
        let t = Tensor::new(e.shape.clone(), data)
            .map_err(|err| Error::Checkpoint(format!("tensor `{}`: {err}", e.name)))?;
        tensors.push((e.name.clone(), t));
    }
    Ok(Checkpoint {
        model_config: header.model,
        stored_dtype: header.dtype,
        train: header.train,
        tensors,
        adam: header.adam,
    })
}

impl<T: Scalar> Checkpoint<T> {
    fn tensor(&self, name: &str) -> Option<&Tensor<T>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Copies the stored weights into `model`, failing on the first tensor
    /// that is missing or has a different shape.
    pub fn load_weights_into(&self, model: &mut Model<T>) -> Result<()> {
        let ids: Vec<_> = model.store.iter().map(|(id, _)| id).collect();
        for &id in &ids {
            let p = model.store.get(id);
            let stored = self
                .tensor(&p.name)
                .ok_or_else(|| Error::Checkpoint(format!("tensor `{}` missing from checkpoint", p.name)))?;
            if stored.shape() != p.value().shape() {
                return Err(Error::Checkpoint(format!(
                    "shape mismatch for tensor `{}`: checkpoint {:?} vs model {:?}",
                    p.name,
                    stored.shape(),
                    p.value().shape()
                )));
            }
        }
        for id in ids {
            let name = model.store.get(id).name.clone();
            let stored = self.tensor(&name).expect("checked above").clone();
            model.store.get_mut(id).set_value(stored)?;
        }
        Ok(())
    }

    pub fn into_model(self) -> Result<Model<T>> {
        Ok(self.into_model_and_optimizer()?.0)
    }

    /// The stored model, plus the optimizer state when present.
    pub fn into_model_and_optimizer(self) -> Result<(Model<T>, Option<Adam<T>>)> {
        let mut model = Model::new(self.model_config.clone())?;
        self.load_weights_into(&mut model)?;
        let adam = match &self.adam {
            None => None,
            Some(h) => {
                let mut adam = Adam::new(h.config);
                for (name, &steps) in &h.steps {
                    let id = model.store.find(name).ok_or_else(|| {
                        Error::Checkpoint(format!("optimizer state for unknown tensor `{name}`"))
                    })?;
                    let moment = |prefix: &str| {
                        self.tensor(&format!("{prefix}{name}"))
                            .cloned()
                            .ok_or_else(|| Error::Checkpoint(format!("missing {prefix}{name}")))
                    };
                    adam.insert_state(
                        id,
                        AdamState {
                            first_moment: moment(ADAM_M)?,
                            second_moment: moment(ADAM_V)?,
                            step_count: steps,
                            config: h.config,
                        },
                    );
                }
                Some(adam)
            }
        };
        if let Some(train) = &self.train {
            model.set_frozen(train.config.freeze_backbone);
        }
        Ok((model, adam))
    }
}

/// Weights-only convenience wrapper.
pub fn load_model<T: Scalar>(path: &Path) -> Result<Model<T>> {
    load_checkpoint(path)?.into_model()
}
