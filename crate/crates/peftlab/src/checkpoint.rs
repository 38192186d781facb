//! Flat named-parameter checkpoint files.
//!
//! Layout: an 8-byte little-endian header length, a JSON header listing
//! dtype, seed, and `(name, shape, trainable, decay_target)` per parameter,
//! then the raw little-endian values in header order. Models and adapter
//! sets share the format.

use std::fmt;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::model::FrozenModel;
use crate::peft::AdapterSet;
use crate::tensor::{Parameter, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    fn width(&self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    #[serde(default)]
    pub trainable: bool,
    #[serde(default)]
    pub decay_target: f64,
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct CheckpointHeader {
    pub dtype: Dtype,
    pub seed: u64,
    pub params: Vec<ParamEntry>,
}

#[derive(Debug)]
pub enum CheckpointError {
    Io(std::io::Error),
    Format(String),
}

impl fmt::Display for CheckpointError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CheckpointError::Io(e) => write!(f, "checkpoint io error: {e}"),
            CheckpointError::Format(msg) => write!(f, "checkpoint format error: {msg}"),
        }
    }
}

impl std::error::Error for CheckpointError {}

impl From<std::io::Error> for CheckpointError {
    fn from(e: std::io::Error) -> Self {
        CheckpointError::Io(e)
    }
}

pub fn save_params(
    path: &Path,
    params: &[&Parameter],
    seed: u64,
    dtype: Dtype,
) -> Result<(), CheckpointError> {
    let header = CheckpointHeader {
        dtype,
        seed,
        params: params
            .iter()
            .map(|p| ParamEntry {
                name: p.name.clone(),
                shape: p.tensor.shape().to_vec(),
                trainable: p.trainable,
                decay_target: p.decay_target,
            })
            .collect(),
    };
    let header_bytes = serde_json::to_vec(&header)
        .map_err(|e| CheckpointError::Format(format!("header encode: {e}")))?;
    let mut file = fs::File::create(path)?;
    file.write_all(&(header_bytes.len() as u64).to_le_bytes())?;
    file.write_all(&header_bytes)?;
    for p in params {
        match dtype {
            Dtype::F64 => {
                for &v in p.tensor.data() {
                    file.write_all(&v.to_le_bytes())?;
                }
            }
            Dtype::F32 => {
                for &v in p.tensor.data() {
                    file.write_all(&(v as f32).to_le_bytes())?;
                }
            }
        }
    }
    Ok(())
}

pub fn load_params(path: &Path) -> Result<(CheckpointHeader, Vec<Parameter>), CheckpointError> {
    let mut file = fs::File::open(path)?;
    let mut len_bytes = [0u8; 8];
    file.read_exact(&mut len_bytes)?;
    let header_len = u64::from_le_bytes(len_bytes) as usize;
    let mut header_bytes = vec![0u8; header_len];
    file.read_exact(&mut header_bytes)?;
    let header: CheckpointHeader = serde_json::from_slice(&header_bytes)
        .map_err(|e| CheckpointError::Format(format!("header decode: {e}")))?;

    let mut rest = Vec::new();
    file.read_to_end(&mut rest)?;
    let total: usize = header.params.iter().map(|p| p.shape.iter().product::<usize>()).sum();
    let expected = total * header.dtype.width();
    if rest.len() != expected {
        return Err(CheckpointError::Format(format!(
            "payload is {} bytes, header implies {expected}",
            rest.len()
        )));
    }

    let mut params = Vec::with_capacity(header.params.len());
    let mut offset = 0;
    for entry in &header.params {
        let n: usize = entry.shape.iter().product();
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            let v = match header.dtype {
                Dtype::F64 => {
                    let mut b = [0u8; 8];
                    b.copy_from_slice(&rest[offset..offset + 8]);
                    offset += 8;
                    f64::from_le_bytes(b)
                }
                Dtype::F32 => {
                    let mut b = [0u8; 4];
                    b.copy_from_slice(&rest[offset..offset + 4]);
                    offset += 4;
                    f32::from_le_bytes(b) as f64
                }
            };
            data.push(v);
        }
        let tensor = Tensor::new(entry.shape.clone(), data)
            .map_err(|e| CheckpointError::Format(e.to_string()))?;
        params.push(Parameter {
            name: entry.name.clone(),
            tensor,
            trainable: entry.trainable,
            decay_target: entry.decay_target,
        });
    }
    Ok((header, params))
}

pub fn save_model(model: &FrozenModel, path: &Path, dtype: Dtype) -> Result<(), CheckpointError> {
    let refs: Vec<&Parameter> = model.params().iter().collect();
    save_params(path, &refs, model.spec().seed, dtype)
}

/// Restore weights into an already-built model. Name and shape of every
/// entry must match the model's registry.
pub fn load_model_weights(model: &mut FrozenModel, path: &Path) -> Result<(), CheckpointError> {
    let (_, params) = load_params(path)?;
    for loaded in params {
        let Some(target) = model.param_mut(&loaded.name) else {
            return Err(CheckpointError::Format(format!(
                "checkpoint parameter '{}' not present in model",
                loaded.name
            )));
        };
        if target.tensor.shape() != loaded.tensor.shape() {
            return Err(CheckpointError::Format(format!(
                "shape mismatch for '{}': model {:?}, file {:?}",
                loaded.name,
                target.tensor.shape(),
                loaded.tensor.shape()
            )));
        }
        target.tensor = loaded.tensor;
    }
    Ok(())
}

pub fn save_adapters(
    set: &AdapterSet,
    path: &Path,
    seed: u64,
    dtype: Dtype,
) -> Result<(), CheckpointError> {
    save_params(path, &set.params(), seed, dtype)
}

/// Restore adapter parameters by name into a structurally identical set.
pub fn load_adapters_into(set: &mut AdapterSet, path: &Path) -> Result<(), CheckpointError> {
    let (_, params) = load_params(path)?;
    for loaded in params {
        let Some(target) = set.param_mut(&loaded.name) else {
            return Err(CheckpointError::Format(format!(
                "checkpoint parameter '{}' not present in adapter set",
                loaded.name
            )));
        };
        if target.tensor.shape() != loaded.tensor.shape() {
            return Err(CheckpointError::Format(format!(
                "shape mismatch for '{}'",
                loaded.name
            )));
        }
        target.tensor = loaded.tensor;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{FrozenModel, ModelKind, ModelSpec};

    fn spec() -> ModelSpec {
        ModelSpec {
            kind: ModelKind::Mlp,
            depth: 2,
            d_in: 3,
            d_model: 5,
            d_ff: 0,
            n_heads: 0,
            vocab_size: 0,
            max_seq: 0,
            n_classes: 2,
            seed: 21,
        }
    }

    #[test]
    fn f64_round_trip_is_exact() {
        let dir = std::env::temp_dir().join(format!("peftlab-ckpt-{}", std::process::id()));
        fs::create_dir_all(&dir).unwrap();
        let path = dir.join("model.ckpt");

        let model = FrozenModel::build(&spec()).unwrap();
        save_model(&model, &path, Dtype::F64).unwrap();

        let mut other = FrozenModel::build(&ModelSpec { seed: 999, ..spec() }).unwrap();
        load_model_weights(&mut other, &path).unwrap();
        for (a, b) in model.params().iter().zip(other.params()) {
            assert_eq!(a.tensor.data(), b.tensor.data(), "{}", a.name);
        }
        fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn f32_round_trip_rounds_through_f32() {
        let dir = std::env::temp_dir().join(format!("peftlab-ckpt32-{}", std::process::id()));
        fs::create_dir_all(&dir).unwrap();
        let path = dir.join("model.ckpt");

        let model = FrozenModel::build(&spec()).unwrap();
        save_model(&model, &path, Dtype::F32).unwrap();
        let (header, params) = load_params(&path).unwrap();
        assert_eq!(header.dtype, Dtype::F32);
        for (orig, loaded) in model.params().iter().zip(&params) {
            for (&o, &l) in orig.tensor.data().iter().zip(loaded.tensor.data()) {
                assert_eq!(l, o as f32 as f64);
            }
        }
        fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let dir = std::env::temp_dir().join(format!("peftlab-ckpt-bad-{}", std::process::id()));
        fs::create_dir_all(&dir).unwrap();
        let path = dir.join("model.ckpt");

        let model = FrozenModel::build(&spec()).unwrap();
        save_model(&model, &path, Dtype::F64).unwrap();
        let mut narrow = FrozenModel::build(&ModelSpec { d_model: 4, ..spec() }).unwrap();
        assert!(load_model_weights(&mut narrow, &path).is_err());
        fs::remove_dir_all(&dir).ok();
    }
}
