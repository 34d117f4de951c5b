//! Binary checkpoint container.
//!
//! Layout: `b"LRFC"`, `u32` LE version, `u64` LE metadata length, UTF-8 JSON
//! metadata, then the payload. For each layer in metadata order the payload
//! holds its weight (dense, or `u_k` followed by `w_k`) and then its bias, all
//! as little-endian `f32` in row-major order.

use std::fs;
use std::path::Path;

use lrf_core::compression::{LayerParam, LayerSpec, RankChoice};
use lrf_core::linalg::Matrix;
use lrf_core::model::{factorized_param, Activation, CompressibleModel, Layer};
use ndarray::Array1;
use serde::{Deserialize, Serialize};

use crate::CliError;

pub const MAGIC: &[u8; 4] = b"LRFC";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Storage {
    Full,
    Factorized,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerMeta {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub searchable: bool,
    pub storage: Storage,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rank: Option<usize>,
}

impl LayerMeta {
    /// `f32` values this layer occupies in the payload, bias included.
    pub fn payload_len(&self) -> usize {
        let weight = match (self.storage, self.rank) {
            (Storage::Factorized, Some(k)) => k * (self.rows + self.cols),
            _ => self.rows * self.cols,
        };
        weight + self.cols
    }
}

/// Settings the stored model was produced with.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hyperparameters {
    pub activation: Activation,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metadata {
    pub layers: Vec<LayerMeta>,
    pub hyperparameters: Hyperparameters,
    pub dataset_seed: u64,
}

impl Metadata {
    pub fn payload_bytes(&self) -> usize {
        self.layers.iter().map(LayerMeta::payload_len).sum::<usize>() * 4
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: CompressibleModel,
    pub hyperparameters: Hyperparameters,
    pub dataset_seed: u64,
}

fn push_f32s(out: &mut Vec<u8>, values: impl IntoIterator<Item = f64>) {
    for v in values {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
}

impl Checkpoint {
    pub fn metadata(&self) -> Metadata {
        let layers = self
            .model
            .layers()
            .iter()
            .map(|l| {
                let rank = match l.weight.rank_choice() {
                    RankChoice::Rank(k) => Some(k),
                    RankChoice::Full => None,
                };
                LayerMeta {
                    name: l.spec.name.clone(),
                    rows: l.spec.rows,
                    cols: l.spec.cols,
                    searchable: l.spec.searchable,
                    storage: if rank.is_some() {
                        Storage::Factorized
                    } else {
                        Storage::Full
                    },
                    rank,
                }
            })
            .collect();
        Metadata {
            layers,
            hyperparameters: self.hyperparameters.clone(),
            dataset_seed: self.dataset_seed,
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>, CliError> {
        let meta = serde_json::to_vec(&self.metadata())?;
        let mut out = Vec::with_capacity(16 + meta.len() + self.metadata().payload_bytes());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
        out.extend_from_slice(&meta);
        for l in self.model.layers() {
            match &l.weight {
                LayerParam::Dense(m) => push_f32s(&mut out, m.to_row_major()),
                LayerParam::Factorized(t) => {
                    push_f32s(&mut out, t.u_k.to_row_major());
                    push_f32s(&mut out, t.w_k.to_row_major());
                }
            }
            push_f32s(&mut out, l.bias.iter().copied());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CliError> {
        let bad = |msg: String| CliError::Checkpoint(msg);
        if bytes.len() < 16 || &bytes[..4] != MAGIC {
            return Err(bad("missing LRFC header".into()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(bad(format!("unsupported version {version}")));
        }
        let meta_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let meta_end = 16usize
            .checked_add(meta_len)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| bad("metadata length exceeds file size".into()))?;
        let meta: Metadata = serde_json::from_slice(&bytes[16..meta_end])?;
        let payload = &bytes[meta_end..];
        if payload.len() != meta.payload_bytes() {
            return Err(bad(format!(
                "payload holds {} bytes but metadata implies {}",
                payload.len(),
                meta.payload_bytes()
            )));
        }

        let mut values = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64);
        let mut take = |n: usize| -> Vec<f64> { values.by_ref().take(n).collect() };
        let matrix = |r: usize, c: usize, data: Vec<f64>| {
            Matrix::new(r, c, data).map_err(|e| CliError::Checkpoint(e.to_string()))
        };
        let mut layers = Vec::with_capacity(meta.layers.len());
        for lm in &meta.layers {
            let weight = match (lm.storage, lm.rank) {
                (Storage::Full, None) => LayerParam::Dense(matrix(lm.rows, lm.cols, take(lm.rows * lm.cols))?),
                (Storage::Factorized, Some(k)) if k > 0 => {
                    let u = matrix(lm.rows, k, take(lm.rows * k))?;
                    let w = matrix(k, lm.cols, take(k * lm.cols))?;
                    factorized_param(u, w).map_err(|e| bad(e.to_string()))?
                }
                _ => {
                    return Err(bad(format!(
                        "layer {}: storage and rank disagree",
                        lm.name
                    )))
                }
            };
            layers.push(Layer {
                spec: LayerSpec::new(lm.name.clone(), lm.rows, lm.cols, lm.searchable),
                weight,
                bias: Array1::from(take(lm.cols)),
            });
        }
        let model = CompressibleModel::from_layers(layers, meta.hyperparameters.activation)
            .map_err(|e| bad(e.to_string()))?;
        Ok(Checkpoint {
            model,
            hyperparameters: meta.hyperparameters,
            dataset_seed: meta.dataset_seed,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), CliError> {
        fs::write(path, self.to_bytes()?).map_err(|e| CliError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let bytes = fs::read(path).map_err(|e| CliError::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
