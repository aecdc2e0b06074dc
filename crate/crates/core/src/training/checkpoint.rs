//! Binary checkpoint layout, all integers little-endian:
//!
//! ```text
//! magic "DFCKPT\0\0" | u32 version | u64 manifest length | manifest JSON
//! | f32 parameter payload (manifest order)
//! | u64 state header length (0 = no training state) | state header JSON
//! | f64 moment payload
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{OptimState, Trainer};
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::numerics::{sha256_hex, Tensor};

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"DFCKPT\0\0";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
    /// Byte offset into the parameter payload.
    offset: u64,
    trainable: bool,
    sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Manifest {
    version: u32,
    model: ModelConfig,
    backbone_sha256: String,
    payload_bytes: u64,
    params: Vec<ParamEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct MomentEntry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct StateHeader {
    step: usize,
    /// Data-order seed; with `step` it fixes every future batch.
    seed: u64,
    payload_bytes: u64,
    sha256: String,
    moments: Vec<MomentEntry>,
}

/// A decoded checkpoint.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub backbone_sha256: String,
    /// `(name, values, trainable)` in registration order.
    pub params: Vec<(String, Tensor, bool)>,
    pub training: Option<TrainingState>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainingState {
    pub step: usize,
    pub seed: u64,
    /// `(name, first moment, second moment)`.
    pub moments: Vec<(String, Tensor, Tensor)>,
}

impl Checkpoint {
    pub fn capture(model: &Model, trainer: Option<&Trainer>) -> Self {
        let params = model
            .store
            .iter()
            .map(|(_, p)| (p.name.clone(), p.tensor.clone(), p.trainable))
            .collect();
        let training = trainer.map(|t| TrainingState {
            step: t.optim.step,
            seed: t.config.seed,
            moments: t
                .optim
                .moments
                .iter()
                .map(|(id, m, v)| (model.store.get(*id).name.clone(), m.clone(), v.clone()))
                .collect(),
        });
        Self {
            model: model.config.clone(),
            backbone_sha256: model.backbone_checksum(),
            params,
            training,
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut payload = Vec::new();
        let mut entries = Vec::with_capacity(self.params.len());
        for (name, t, trainable) in &self.params {
            let bytes = t.to_f32_le_bytes();
            entries.push(ParamEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                offset: payload.len() as u64,
                trainable: *trainable,
                sha256: sha256_hex(&bytes),
            });
            payload.extend_from_slice(&bytes);
        }
        let manifest = Manifest {
            version: CHECKPOINT_VERSION,
            model: self.model.clone(),
            backbone_sha256: self.backbone_sha256.clone(),
            payload_bytes: payload.len() as u64,
            params: entries,
        };
        let manifest = serde_json::to_vec(&manifest)?;
        let mut out = Vec::with_capacity(32 + manifest.len() + payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
        out.extend_from_slice(&manifest);
        out.extend_from_slice(&payload);
        match &self.training {
            None => out.extend_from_slice(&0u64.to_le_bytes()),
            Some(state) => {
                let mut moments = Vec::new();
                let mut entries = Vec::new();
                for (name, m, v) in &state.moments {
                    entries.push(MomentEntry {
                        name: name.clone(),
                        shape: m.shape().to_vec(),
                        offset: moments.len() as u64,
                    });
                    for x in m.data().iter().chain(v.data()) {
                        moments.extend_from_slice(&x.to_le_bytes());
                    }
                }
                let header = serde_json::to_vec(&StateHeader {
                    step: state.step,
                    seed: state.seed,
                    payload_bytes: moments.len() as u64,
                    sha256: sha256_hex(&moments),
                    moments: entries,
                })?;
                out.extend_from_slice(&(header.len() as u64).to_le_bytes());
                out.extend_from_slice(&header);
                out.extend_from_slice(&moments);
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8, "magic")? != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
        }
        let version = u32::from_le_bytes(r.take(4, "version")?.try_into().expect("4 bytes"));
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint version {version}; this build reads version {CHECKPOINT_VERSION}"
            )));
        }
        let len = r.u64("manifest length")?;
        let manifest: Manifest = serde_json::from_slice(r.take(len, "manifest")?)?;
        if manifest.version != version {
            return Err(Error::Checkpoint("manifest version disagrees with the file header".into()));
        }
        let base = r.pos;
        let payload = r.take(manifest.payload_bytes, "parameter payload")?;
        let mut params = Vec::with_capacity(manifest.params.len());
        for e in &manifest.params {
            let n: usize = e.shape.iter().product();
            let (start, end) = (e.offset as usize, e.offset as usize + 4 * n);
            let slice = payload.get(start..end).ok_or_else(|| {
                Error::Checkpoint(format!(
                    "parameter {} spans payload bytes {start}..{end} but the payload holds {}",
                    e.name,
                    payload.len()
                ))
            })?;
            if sha256_hex(slice) != e.sha256 {
                return Err(Error::Checkpoint(format!(
                    "checksum mismatch for {} at file offset {}",
                    e.name,
                    base + start
                )));
            }
            params.push((e.name.clone(), Tensor::from_f32_le_bytes(&e.shape, slice)?, e.trainable));
        }
        let header_len = r.u64("training-state length")?;
        let training = if header_len == 0 {
            None
        } else {
            let header: StateHeader = serde_json::from_slice(r.take(header_len, "training-state header")?)?;
            let payload = r.take(header.payload_bytes, "optimizer moments")?;
            if sha256_hex(payload) != header.sha256 {
                return Err(Error::Checkpoint("checksum mismatch in optimizer moments".into()));
            }
            let mut moments = Vec::with_capacity(header.moments.len());
            for e in &header.moments {
                let n: usize = e.shape.iter().product();
                let start = e.offset as usize;
                let values: Vec<f64> = payload
                    .get(start..start + 16 * n)
                    .ok_or_else(|| Error::Checkpoint(format!("moments of {} run past the payload", e.name)))?
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                    .collect();
                let (m, v) = values.split_at(n);
                moments.push((e.name.clone(), Tensor::new(&e.shape, m.to_vec())?, Tensor::new(&e.shape, v.to_vec())?));
            }
            Some(TrainingState {
                step: header.step,
                seed: header.seed,
                moments,
            })
        };
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!(
                "{} trailing bytes after offset {}",
                bytes.len() - r.pos,
                r.pos
            )));
        }
        Ok(Self {
            model: manifest.model,
            backbone_sha256: manifest.backbone_sha256,
            params,
            training,
        })
    }

    /// Rebuilds the model and overwrites every parameter with the stored one.
    pub fn to_model(&self) -> Result<Model> {
        let mut model = Model::new(&self.model)?;
        if model.store.len() != self.params.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint holds {} parameters, the configured model has {}",
                self.params.len(),
                model.store.len()
            )));
        }
        for (name, tensor, trainable) in &self.params {
            let id = model
                .store
                .id(name)
                .ok_or_else(|| Error::Checkpoint(format!("unknown parameter {name}")))?;
            let p = model.store.get(id);
            if p.tensor.shape() != tensor.shape() || p.trainable != *trainable {
                return Err(Error::Checkpoint(format!("parameter {name} does not match the configured model")));
            }
            *model.store.tensor_mut(id) = tensor.clone();
        }
        if model.backbone_checksum() != self.backbone_sha256 {
            return Err(Error::Checkpoint("backbone checksum mismatch".into()));
        }
        Ok(model)
    }

    /// Optimizer state mapped onto `model`'s parameter ids.
    pub fn optim_state(&self, model: &Model) -> Result<Option<OptimState>> {
        let Some(state) = &self.training else {
            return Ok(None);
        };
        let moments = state
            .moments
            .iter()
            .map(|(name, m, v)| {
                let id = model
                    .store
                    .id(name)
                    .ok_or_else(|| Error::Checkpoint(format!("moments for unknown parameter {name}")))?;
                Ok((id, m.clone(), v.clone()))
            })
            .collect::<Result<_>>()?;
        Ok(Some(OptimState {
            step: state.step,
            moments,
        }))
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, len: u64, what: &str) -> Result<&'a [u8]> {
        let len = usize::try_from(len).map_err(|_| Error::Checkpoint(format!("{what} length overflows")))?;
        let end = self.pos.checked_add(len).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::Checkpoint(format!(
                "truncated {what}: needs {len} bytes at offset {}, file ends at {}",
                self.pos,
                self.bytes.len()
            ))
        })?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
}

pub fn save_checkpoint(path: &Path, model: &Model, trainer: Option<&Trainer>) -> Result<()> {
    let bytes = Checkpoint::capture(model, trainer).to_bytes()?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes)
}
