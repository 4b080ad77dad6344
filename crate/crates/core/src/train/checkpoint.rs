//! Checkpoint files.
//!
//! Layout (little-endian): the 8 magic bytes `SPMIM001`, a `u64` metadata
//! length, the UTF-8 JSON metadata (model snapshot, training counters and the
//! tensor directory with a CRC-32 per tensor), then every tensor as raw `f32`
//! values in directory order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::model::{ClassifierSpec, ModelSpec};
use crate::params::{ParamKind, ParamStore};
use crate::tensor::Tensor;
use crate::train::adamp::{AdamP, AdamPConfig};

pub const MAGIC: &[u8; 8] = b"SPMIM001";
const MAGIC_FAMILY: &[u8; 5] = b"SPMIM";

/// Which network the stored tensors belong to.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelSnapshot {
    Pretrain(ModelSpec),
    Classifier(ClassifierSpec),
}

impl ModelSnapshot {
    pub fn encoder(&self) -> &EncoderConfig {
        match self {
            ModelSnapshot::Pretrain(m) => &m.encoder,
            ModelSnapshot::Classifier(c) => &c.encoder,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TensorRole {
    Weight,
    Buffer,
    AdamM,
    AdamV,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StoredTensor {
    pub name: String,
    pub role: TensorRole,
    pub tensor: Tensor,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerSnapshot {
    pub config: AdamPConfig,
    pub step: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: ModelSnapshot,
    pub epoch: usize,
    pub rng_seed: u64,
    pub optimizer: Option<OptimizerSnapshot>,
    pub tensors: Vec<StoredTensor>,
}

#[derive(Serialize, Deserialize)]
struct DirEntry {
    name: String,
    shape: Vec<usize>,
    role: TensorRole,
    crc32: u32,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Metadata {
    model: ModelSnapshot,
    epoch: usize,
    rng_seed: u64,
    optimizer: Option<OptimizerSnapshot>,
    tensors: Vec<DirEntry>,
}

fn to_f32(t: &Tensor) -> Tensor {
    t.map(|v| v as f32 as f64)
}

impl Checkpoint {
    /// Snapshot of `store` (and optionally the optimizer moments), rounded to
    /// the 32-bit storage precision.
    pub fn capture(
        model: ModelSnapshot,
        store: &ParamStore,
        optimizer: Option<&AdamP>,
        epoch: usize,
        rng_seed: u64,
    ) -> Self {
        let mut tensors = Vec::new();
        for id in store.ids() {
            let role = match store.kind(id) {
                ParamKind::Weight => TensorRole::Weight,
                ParamKind::Buffer => TensorRole::Buffer,
            };
            tensors.push(StoredTensor {
                name: store.name(id).to_string(),
                role,
                tensor: to_f32(store.get(id)),
            });
        }
        if let Some(opt) = optimizer {
            for id in store.ids() {
                if let Some((m, v)) = opt.moments(id.index()) {
                    for (role, t) in [(TensorRole::AdamM, m), (TensorRole::AdamV, v)] {
                        tensors.push(StoredTensor {
                            name: store.name(id).to_string(),
                            role,
                            tensor: to_f32(t),
                        });
                    }
                }
            }
        }
        Self {
            model,
            epoch,
            rng_seed,
            optimizer: optimizer.map(|o| OptimizerSnapshot {
                config: o.config().clone(),
                step: o.steps(),
            }),
            tensors,
        }
    }

    fn find(&self, name: &str, role: TensorRole) -> Option<&Tensor> {
        self.tensors
            .iter()
            .find(|t| t.role == role && t.name == name)
            .map(|t| &t.tensor)
    }

    /// Copies stored weights and buffers whose name starts with `prefix` into
    /// `store`. Every matching store entry must be present with its shape.
    pub fn restore_into(&self, store: &mut ParamStore, prefix: &str) -> Result<usize> {
        let mut n = 0;
        for id in store.ids().collect::<Vec<_>>() {
            let name = store.name(id).to_string();
            if !name.starts_with(prefix) {
                continue;
            }
            let role = match store.kind(id) {
                ParamKind::Weight => TensorRole::Weight,
                ParamKind::Buffer => TensorRole::Buffer,
            };
            let t = self
                .find(&name, role)
                .ok_or_else(|| Error::ConfigMismatch(format!("checkpoint has no tensor {name}")))?;
            if t.shape() != store.get(id).shape() {
                return Err(Error::ConfigMismatch(format!(
                    "{name}: checkpoint shape {:?}, model shape {:?}",
                    t.shape(),
                    store.get(id).shape()
                )));
            }
            store.set(id, t.clone())?;
            n += 1;
        }
        Ok(n)
    }

    /// Rebuilds the optimizer state saved with this checkpoint, if any.
    pub fn restore_optimizer(&self, store: &ParamStore) -> Result<Option<AdamP>> {
        let Some(snap) = &self.optimizer else {
            return Ok(None);
        };
        let mut opt = AdamP::new(snap.config.clone())?;
        let moments = store
            .ids()
            .map(|id| {
                let name = store.name(id);
                match (self.find(name, TensorRole::AdamM), self.find(name, TensorRole::AdamV)) {
                    (Some(m), Some(v)) => Some((m.clone(), v.clone())),
                    _ => None,
                }
            })
            .collect();
        opt.restore(snap.step, moments);
        Ok(Some(opt))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut payload = Vec::new();
        let mut dir = Vec::with_capacity(self.tensors.len());
        for t in &self.tensors {
            let start = payload.len();
            for &v in t.tensor.data() {
                payload.extend_from_slice(&(v as f32).to_le_bytes());
            }
            dir.push(DirEntry {
                name: t.name.clone(),
                shape: t.tensor.shape().to_vec(),
                role: t.role,
                crc32: crc32fast::hash(&payload[start..]),
            });
        }
        let meta = Metadata {
            model: self.model.clone(),
            epoch: self.epoch,
            rng_seed: self.rng_seed,
            optimizer: self.optimizer.clone(),
            tensors: dir,
        };
        let json = serde_json::to_vec(&meta).map_err(|e| Error::Format(e.to_string()))?;
        let mut out = Vec::with_capacity(16 + json.len() + payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&payload);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
            if bytes.len() >= MAGIC.len() && &bytes[..MAGIC_FAMILY.len()] == MAGIC_FAMILY {
                return Err(Error::Version(
                    String::from_utf8_lossy(&bytes[MAGIC_FAMILY.len()..MAGIC.len()]).into_owned(),
                ));
            }
            return Err(Error::Format("not a checkpoint file (bad magic)".into()));
        }
        let rest = &bytes[MAGIC.len()..];
        if rest.len() < 8 {
            return Err(Error::Corruption("truncated metadata length".into()));
        }
        let meta_len = u64::from_le_bytes(rest[..8].try_into().unwrap());
        let rest = &rest[8..];
        let meta_len = usize::try_from(meta_len)
            .ok()
            .filter(|&n| n <= rest.len())
            .ok_or_else(|| Error::Corruption("truncated metadata".into()))?;
        let meta: Metadata = serde_json::from_slice(&rest[..meta_len])
            .map_err(|e| Error::Corruption(format!("metadata: {e}")))?;
        let mut payload = &rest[meta_len..];
        let mut tensors = Vec::with_capacity(meta.tensors.len());
        for entry in meta.tensors {
            let count = entry.shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
            let nbytes = count
                .and_then(|c| c.checked_mul(4))
                .ok_or_else(|| Error::Corruption(format!("{}: bad shape", entry.name)))?;
            if payload.len() < nbytes {
                return Err(Error::Corruption(format!("{}: truncated payload", entry.name)));
            }
            let (chunk, tail) = payload.split_at(nbytes);
            payload = tail;
            if crc32fast::hash(chunk) != entry.crc32 {
                return Err(Error::Corruption(format!("{}: checksum mismatch", entry.name)));
            }
            let data = chunk
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
                .collect();
            let tensor = Tensor::new(entry.shape, data)
                .map_err(|e| Error::Corruption(format!("{}: {e}", entry.name)))?;
            tensors.push(StoredTensor {
                name: entry.name,
                role: entry.role,
                tensor,
            });
        }
        if !payload.is_empty() {
            return Err(Error::Corruption(format!("{} trailing bytes", payload.len())));
        }
        Ok(Self {
            model: meta.model,
            epoch: meta.epoch,
            rng_seed: meta.rng_seed,
            optimizer: meta.optimizer,
            tensors,
        })
    }
}

/// Writes via a temporary file and rename so a crash never leaves a partial
/// checkpoint at `path`.
pub fn save_checkpoint(path: impl AsRef<Path>, ckpt: &Checkpoint) -> Result<()> {
    let path = path.as_ref();
    let bytes = ckpt.to_bytes()?;
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    Checkpoint::from_bytes(&fs::read(path)?)
}
