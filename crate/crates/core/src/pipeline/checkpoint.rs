//! Binary checkpoints.
//!
//! Layout: the 8-byte magic `MOERPLC1`, the manifest length as a
//! little-endian `u64`, the UTF-8 JSON manifest, then the concatenated
//! little-endian tensor payload. The manifest names every tensor with its
//! dtype, shape and byte range, and records the slot structure needed to
//! rebuild a compressed model.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::construction::{LowRankAdapter, SharedBase};
use crate::error::{Error, Result};
use crate::model::{
    ExpertAdapter, ExpertParams, ExpertSlot, ModelHyper, MoeLayer, MoeModel, ParamKey, RouterParams, WeightKind,
};
use crate::numerics::{DType, Matrix, Scalar};

pub const MAGIC: &[u8; 8] = b"MOERPLC1";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint of a supported format version (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint format version {0}")]
    UnsupportedVersion(u32),
    #[error("checkpoint truncated: need {need} bytes, have {have}")]
    Truncated { need: u64, have: u64 },
    #[error("tensor {0} lies outside the payload or overlaps another tensor")]
    OutOfBounds(String),
    #[error("bad manifest: {0}")]
    Manifest(String),
    #[error("checkpoint holds {found:?} tensors, expected {expected:?}")]
    DtypeMismatch { expected: DType, found: DType },
    #[error("missing tensor {0}")]
    MissingTensor(String),
    #[error("tensor {name} has shape {found:?}, expected {expected:?}")]
    ShapeMismatch {
        name: String,
        expected: [usize; 2],
        found: [usize; 2],
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub dtype: DType,
    pub shape: [usize; 2],
    pub offset: u64,
    pub length: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SlotLayout {
    Dense { adapter: bool },
    Replaced { group: Option<usize>, original: bool },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerLayout {
    pub experts: Vec<SlotLayout>,
    /// Member expert ids of each shared base.
    pub bases: Vec<Vec<usize>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format_version: u32,
    pub hyper: ModelHyper,
    pub beta: f64,
    pub layers: Vec<LayerLayout>,
    pub tensors: BTreeMap<String, TensorEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub manifest: Manifest,
    pub payload: Vec<u8>,
}

impl Checkpoint {
    pub fn from_model<T: Scalar>(model: &MoeModel<T>) -> Self {
        let layers = model
            .layers
            .iter()
            .map(|layer| LayerLayout {
                experts: layer
                    .experts
                    .iter()
                    .map(|slot| match slot {
                        ExpertSlot::Dense { adapter, .. } => SlotLayout::Dense {
                            adapter: adapter.is_some(),
                        },
                        ExpertSlot::Replaced { group, original, .. } => SlotLayout::Replaced {
                            group: *group,
                            original: original.is_some(),
                        },
                    })
                    .collect(),
                bases: layer.bases.iter().map(|b| b.members.clone()).collect(),
            })
            .collect();
        let mut payload = Vec::new();
        let mut tensors = BTreeMap::new();
        for (key, m) in model.params() {
            let offset = payload.len() as u64;
            for &v in m.data() {
                v.write_le(&mut payload);
            }
            tensors.insert(
                key.to_string(),
                TensorEntry {
                    dtype: T::DTYPE,
                    shape: [m.rows(), m.cols()],
                    offset,
                    length: payload.len() as u64 - offset,
                },
            );
        }
        Self {
            manifest: Manifest {
                format_version: FORMAT_VERSION,
                hyper: model.hyper,
                beta: model.beta,
                layers,
                tensors,
            },
            payload,
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let manifest = serde_json::to_vec(&self.manifest)?;
        let mut out = Vec::with_capacity(16 + manifest.len() + self.payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
        out.extend_from_slice(&manifest);
        out.extend_from_slice(&self.payload);
        Ok(out)
    }

    /// Parses and validates the header, manifest and tensor directory.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let head = bytes.len().min(MAGIC.len());
        if bytes[..head] != MAGIC[..head] {
            return Err(CheckpointError::BadMagic);
        }
        if bytes.len() < 16 {
            return Err(CheckpointError::Truncated {
                need: 16,
                have: bytes.len() as u64,
            });
        }
        let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
        let end = 16u64.saturating_add(len);
        if (bytes.len() as u64) < end {
            return Err(CheckpointError::Truncated {
                need: end,
                have: bytes.len() as u64,
            });
        }
        let manifest: Manifest = serde_json::from_slice(&bytes[16..end as usize])
            .map_err(|e| CheckpointError::Manifest(e.to_string()))?;
        if manifest.format_version != FORMAT_VERSION {
            return Err(CheckpointError::UnsupportedVersion(manifest.format_version));
        }
        let payload = bytes[end as usize..].to_vec();
        let mut needed = 0u64;
        for (name, t) in &manifest.tensors {
            let end = t
                .offset
                .checked_add(t.length)
                .ok_or_else(|| CheckpointError::OutOfBounds(name.clone()))?;
            needed = needed.max(end);
        }
        if (payload.len() as u64) < needed {
            return Err(CheckpointError::Truncated {
                need: end + needed,
                have: bytes.len() as u64,
            });
        }
        let mut ranges: Vec<(u64, u64, &String)> = Vec::new();
        for (name, t) in &manifest.tensors {
            let want = t.shape[0].checked_mul(t.shape[1]).and_then(|n| n.checked_mul(t.dtype.size())).map(|n| n as u64);
            if want != Some(t.length) {
                return Err(CheckpointError::Manifest(format!("tensor {name} length disagrees with its shape")));
            }
            ranges.push((t.offset, t.offset + t.length, name));
        }
        ranges.sort();
        for pair in ranges.windows(2) {
            if pair[1].0 < pair[0].1 {
                return Err(CheckpointError::OutOfBounds(pair[1].2.clone()));
            }
        }
        Ok(Self { manifest, payload })
    }

    /// Element count per tensor name.
    pub fn element_counts(&self) -> BTreeMap<&str, u64> {
        self.manifest
            .tensors
            .iter()
            .map(|(k, t)| (k.as_str(), (t.shape[0] * t.shape[1]) as u64))
            .collect()
    }

    fn tensor<T: Scalar>(&self, key: ParamKey, rows: usize, cols: usize) -> Result<Matrix<T>, CheckpointError> {
        let name = key.to_string();
        let t = self
            .manifest
            .tensors
            .get(&name)
            .ok_or_else(|| CheckpointError::MissingTensor(name.clone()))?;
        if t.dtype != T::DTYPE {
            return Err(CheckpointError::DtypeMismatch {
                expected: T::DTYPE,
                found: t.dtype,
            });
        }
        if t.shape != [rows, cols] {
            return Err(CheckpointError::ShapeMismatch {
                name,
                expected: [rows, cols],
                found: t.shape,
            });
        }
        let bytes = &self.payload[t.offset as usize..(t.offset + t.length) as usize];
        let data = bytes.chunks_exact(T::DTYPE.size()).map(T::read_le).collect();
        Ok(Matrix::new(rows, cols, data).expect("length checked against shape"))
    }

    pub fn to_model<T: Scalar>(&self) -> Result<MoeModel<T>, CheckpointError> {
        let h = self.manifest.hyper;
        h.validate().map_err(|e| CheckpointError::Manifest(e.to_string()))?;
        if self.manifest.layers.len() != h.num_layers {
            return Err(CheckpointError::Manifest("layer count disagrees with hyperparameters".into()));
        }
        let known: usize = self.manifest.tensors.len();
        let shape = |kind: WeightKind| match kind {
            WeightKind::In => (h.d_model, h.d_hidden),
            WeightKind::Out => (h.d_hidden, h.d_model),
        };
        let rank_of = |layer: usize, expert: usize| -> Result<usize, CheckpointError> {
            let name = ParamKey::AdapterA {
                layer,
                expert,
                kind: WeightKind::In,
            }
            .to_string();
            self.manifest
                .tensors
                .get(&name)
                .map(|t| t.shape[0])
                .ok_or(CheckpointError::MissingTensor(name))
        };
        let mut used = 2;
        let mut layers = Vec::with_capacity(h.num_layers);
        for (l, layout) in self.manifest.layers.iter().enumerate() {
            if layout.experts.len() != h.num_experts {
                return Err(CheckpointError::Manifest(format!("layer {l} has the wrong expert count")));
            }
            let router = RouterParams {
                w_router: self.tensor(ParamKey::Router { layer: l }, h.d_model, h.num_experts)?,
            };
            used += 1;
            let adapter = |e: usize, used: &mut usize| -> Result<ExpertAdapter<T>, CheckpointError> {
                let r = rank_of(l, e)?;
                let one = |kind: WeightKind| -> Result<LowRankAdapter<T>, CheckpointError> {
                    let (n, m) = shape(kind);
                    Ok(LowRankAdapter {
                        a: self.tensor(ParamKey::AdapterA { layer: l, expert: e, kind }, r, m)?,
                        b: self.tensor(ParamKey::AdapterB { layer: l, expert: e, kind }, n, r)?,
                    })
                };
                *used += 4;
                Ok(ExpertAdapter {
                    w_in: one(WeightKind::In)?,
                    w_out: one(WeightKind::Out)?,
                })
            };
            let params = |key: &dyn Fn(WeightKind) -> ParamKey, used: &mut usize| -> Result<ExpertParams<T>, CheckpointError> {
                *used += 2;
                let (ni, mi) = shape(WeightKind::In);
                let (no, mo) = shape(WeightKind::Out);
                Ok(ExpertParams {
                    w_in: self.tensor(key(WeightKind::In), ni, mi)?,
                    w_out: self.tensor(key(WeightKind::Out), no, mo)?,
                })
            };
            let mut experts = Vec::with_capacity(h.num_experts);
            for (e, slot) in layout.experts.iter().enumerate() {
                experts.push(match slot {
                    SlotLayout::Dense { adapter: has_adapter } => {
                        ExpertSlot::Dense {
                            params: params(&|kind| ParamKey::Expert { layer: l, expert: e, kind }, &mut used)?,
                            adapter: if *has_adapter { Some(adapter(e, &mut used)?) } else { None },
                        }
                    }
                    SlotLayout::Replaced { group, original } => {
                        if group.is_some_and(|g| g >= layout.bases.len()) {
                            return Err(CheckpointError::Manifest(format!("layer {l} expert {e} names a missing group")));
                        }
                        ExpertSlot::Replaced {
                            group: *group,
                            original: if *original {
                                Some(params(&|kind| ParamKey::Original { layer: l, expert: e, kind }, &mut used)?)
                            } else {
                                None
                            },
                            adapter: adapter(e, &mut used)?,
                        }
                    }
                });
            }
            let mut bases = Vec::with_capacity(layout.bases.len());
            for (g, members) in layout.bases.iter().enumerate() {
                let (ni, mi) = shape(WeightKind::In);
                let (no, mo) = shape(WeightKind::Out);
                bases.push(SharedBase {
                    w_in: self.tensor(ParamKey::Base { layer: l, group: g, kind: WeightKind::In }, ni, mi)?,
                    w_out: self.tensor(ParamKey::Base { layer: l, group: g, kind: WeightKind::Out }, no, mo)?,
                    members: members.clone(),
                    group: g,
                });
                used += 2;
            }
            layers.push(MoeLayer { router, experts, bases });
        }
        if used != known {
            return Err(CheckpointError::Manifest(format!(
                "manifest lists {known} tensors but the structure uses {used}"
            )));
        }
        Ok(MoeModel {
            hyper: h,
            input_proj: self.tensor(ParamKey::InputProj, h.input_dim, h.d_model)?,
            layers,
            output_head: self.tensor(ParamKey::OutputHead, h.d_model, h.output_dim)?,
            beta: self.manifest.beta,
        })
    }
}

pub fn encode<T: Scalar>(model: &MoeModel<T>) -> Result<Vec<u8>> {
    Checkpoint::from_model(model).to_bytes()
}

pub fn decode<T: Scalar>(bytes: &[u8]) -> Result<MoeModel<T>> {
    Ok(Checkpoint::from_bytes(bytes)?.to_model()?)
}

pub fn save_checkpoint<T: Scalar>(path: &Path, model: &MoeModel<T>) -> Result<()> {
    let bytes = encode(model)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<MoeModel<T>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}
