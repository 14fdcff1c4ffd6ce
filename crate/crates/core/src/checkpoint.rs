//! Binary checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "DCN1" | u32 format version | u64 manifest length | manifest (JSON text) | tensor payloads
//! ```
//!
//! Payloads are raw element bytes in the order the manifest lists the tensors:
//! parameters, buffers, Adam first moments, Adam second moments.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autograd::ParamStore;
use crate::error::{DcnError, Result};
use crate::model::{Dcn, ModelConfig};
use crate::optim::{Adam, AdamConfig};
use crate::tensor::{Scalar, Tensor};

pub const MAGIC: &[u8; 4] = b"DCN1";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TensorGroup {
    Param,
    Buffer,
    AdamFirst,
    AdamSecond,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub group: TensorGroup,
    pub shape: Vec<usize>,
    pub dtype: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub dtype: String,
    pub config_fingerprint: String,
    pub model: ModelConfig,
    pub optimizer: AdamConfig,
    pub optimizer_step: u64,
    /// Completed training steps.
    pub step: u64,
    /// Training seed; with `step` it determines every later batch.
    pub seed: u64,
    pub tensors: Vec<TensorEntry>,
}

/// Everything needed to continue training bit-identically.
#[derive(Debug, Clone)]
pub struct Checkpoint<T: Scalar> {
    pub model: Dcn<T>,
    pub optimizer: Adam<T>,
    pub step: u64,
    pub seed: u64,
}

/// A tensor group, the store naming its tensors, and the moments replacing them.
type Group<'a, T> = (TensorGroup, &'a ParamStore<T>, Option<&'a [Tensor<T>]>);

impl<T: Scalar> Checkpoint<T> {
    fn entries(&self) -> Vec<(TensorEntry, &Tensor<T>)> {
        let dtype = T::DTYPE.name();
        let params = &self.model.params;
        let groups: [Group<T>; 4] = [
            (TensorGroup::Param, params, None),
            (TensorGroup::Buffer, &self.model.buffers, None),
            (TensorGroup::AdamFirst, params, Some(&self.optimizer.first_moment)),
            (
                TensorGroup::AdamSecond,
                params,
                Some(&self.optimizer.second_moment),
            ),
        ];
        let mut out = Vec::new();
        for (group, store, moments) in groups {
            for (id, name, t) in store.iter() {
                let t = moments.map_or(t, |m| &m[id.0]);
                let entry = TensorEntry {
                    name: name.to_string(),
                    group,
                    shape: t.shape().to_vec(),
                    dtype: dtype.to_string(),
                };
                out.push((entry, t));
            }
        }
        out
    }

    pub fn manifest(&self) -> CheckpointManifest {
        CheckpointManifest {
            dtype: T::DTYPE.name().to_string(),
            config_fingerprint: self.model.config.fingerprint(),
            model: self.model.config.clone(),
            optimizer: self.optimizer.config,
            optimizer_step: self.optimizer.step,
            step: self.step,
            seed: self.seed,
            tensors: self.entries().into_iter().map(|(e, _)| e).collect(),
        }
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let manifest = serde_json::to_vec(&self.manifest())?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
        out.extend_from_slice(&manifest);
        for (_, t) in self.entries() {
            for &v in t.data() {
                v.write_le(&mut out);
            }
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let manifest = read_manifest(bytes)?;
        if manifest.dtype != T::DTYPE.name() {
            return Err(DcnError::Format(format!(
                "checkpoint holds {} tensors, loader expects {}",
                manifest.dtype,
                T::DTYPE.name()
            )));
        }
        if manifest.config_fingerprint != manifest.model.fingerprint() {
            return Err(DcnError::Format(
                "config fingerprint does not match stored model config".into(),
            ));
        }
        let mut model = Dcn::<T>::new(manifest.model.clone(), 0)?;
        let mut optimizer = Adam::new(manifest.optimizer, &model.params);
        optimizer.step = manifest.optimizer_step;

        let width = T::DTYPE.size();
        let mut cursor = header_len(bytes)?;
        let expected = Checkpoint {
            model: model.clone(),
            optimizer: optimizer.clone(),
            step: 0,
            seed: 0,
        }
        .entries()
        .into_iter()
        .map(|(e, _)| e)
        .collect::<Vec<_>>();
        if expected.len() != manifest.tensors.len() {
            return Err(DcnError::Format(format!(
                "manifest lists {} tensors, model needs {}",
                manifest.tensors.len(),
                expected.len()
            )));
        }
        for (i, (entry, want)) in manifest.tensors.iter().zip(&expected).enumerate() {
            if entry != want {
                return Err(DcnError::Format(format!(
                    "tensor {i}: stored {} {:?} {:?}, model expects {} {:?} {:?}",
                    entry.name, entry.group, entry.shape, want.name, want.group, want.shape
                )));
            }
            let n: usize = entry.shape.iter().product();
            let end = cursor + n * width;
            let raw = bytes
                .get(cursor..end)
                .ok_or_else(|| DcnError::Format(format!("payload truncated in tensor {}", entry.name)))?;
            let data: Vec<T> = raw.chunks_exact(width).map(T::read_le).collect();
            let t = Tensor::new(&entry.shape, data)?;
            t.ensure_finite(&format!("checkpoint tensor {}", entry.name))?;
            let slot = match entry.group {
                TensorGroup::Param => {
                    let id = model.params.id_of(&entry.name).expect("name checked above");
                    model.params.get_mut(id)
                }
                TensorGroup::Buffer => {
                    let id = model.buffers.id_of(&entry.name).expect("name checked above");
                    model.buffers.get_mut(id)
                }
                TensorGroup::AdamFirst => {
                    let id = model.params.id_of(&entry.name).expect("name checked above");
                    &mut optimizer.first_moment[id.0]
                }
                TensorGroup::AdamSecond => {
                    let id = model.params.id_of(&entry.name).expect("name checked above");
                    &mut optimizer.second_moment[id.0]
                }
            };
            *slot = t;
            cursor = end;
        }
        if cursor != bytes.len() {
            return Err(DcnError::Format(format!(
                "{} trailing bytes after the last tensor",
                bytes.len() - cursor
            )));
        }
        Ok(Checkpoint {
            model,
            optimizer,
            step: manifest.step,
            seed: manifest.seed,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.encode()?;
        std::fs::write(path, bytes).map_err(|e| DcnError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| DcnError::io(path, e))?;
        Self::decode(&bytes)
    }
}

fn header_len(bytes: &[u8]) -> Result<usize> {
    if bytes.len() < 16 || &bytes[..4] != MAGIC {
        return Err(DcnError::Format("missing DCN1 magic".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(DcnError::Format(format!(
            "unsupported format version {version} (expected {FORMAT_VERSION})"
        )));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    if bytes.len() < 16 + len {
        return Err(DcnError::Format("manifest truncated".into()));
    }
    Ok(16 + len)
}

/// Parses only the header and manifest, e.g. to find the stored dtype.
pub fn read_manifest(bytes: &[u8]) -> Result<CheckpointManifest> {
    let end = header_len(bytes)?;
    let text = std::str::from_utf8(&bytes[16..end])
        .map_err(|e| DcnError::Format(format!("manifest is not UTF-8: {e}")))?;
    serde_json::from_str(text).map_err(|e| DcnError::Format(format!("manifest: {e}")))
}

pub fn read_manifest_file(path: &Path) -> Result<CheckpointManifest> {
    let bytes = std::fs::read(path).map_err(|e| DcnError::io(path, e))?;
    read_manifest(&bytes)
}
