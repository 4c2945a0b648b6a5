//! Checkpoints: a JSON manifest plus one little-endian `f64` file per tensor.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{HeadKind, ModelConfig, ModelState};
use crate::error::{Error, Result};
use crate::numeric::Tensor;
use crate::rng::seeded;

pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub file: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format: u32,
    /// Training method the parameters were produced by.
    pub mode: String,
    pub seed: u64,
    pub input_dim: usize,
    pub class_counts: Vec<usize>,
    pub head_kind: HeadKind,
    pub model: ModelConfig,
    pub tensors: Vec<TensorEntry>,
    /// Non-model tensors stored alongside, e.g. learnable loss weights.
    #[serde(default)]
    pub extras: Vec<TensorEntry>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: ModelState,
    pub extras: Vec<(String, Tensor)>,
    pub mode: String,
    pub seed: u64,
}

pub fn write_raw(path: &Path, t: &Tensor) -> Result<()> {
    let mut bytes = Vec::with_capacity(t.numel() * 8);
    for v in t.data() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_raw(path: &Path, shape: &[usize]) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let n: usize = shape.iter().product();
    if bytes.len() != n * 8 {
        return Err(Error::Schema(format!(
            "{}: expected {} bytes for shape {shape:?}, found {}",
            path.display(),
            n * 8,
            bytes.len()
        )));
    }
    let data = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect();
    Tensor::new(shape.to_vec(), data)
}

fn entry(dir: &Path, prefix: &str, name: &str, t: &Tensor) -> Result<TensorEntry> {
    let file = format!("{prefix}{name}.f64");
    write_raw(&dir.join(&file), t)?;
    Ok(TensorEntry {
        name: name.to_string(),
        shape: t.shape().to_vec(),
        file,
    })
}

pub fn save(
    dir: &Path,
    model: &ModelState,
    extras: &[(String, Tensor)],
    mode: &str,
    seed: u64,
) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let tensors = model
        .named_params()
        .into_iter()
        .map(|(n, t)| entry(dir, "", &n, t))
        .collect::<Result<Vec<_>>>()?;
    let extras = extras
        .iter()
        .map(|(n, t)| entry(dir, "extra.", n, t))
        .collect::<Result<Vec<_>>>()?;
    let manifest = CheckpointManifest {
        format: 1,
        mode: mode.to_string(),
        seed,
        input_dim: model.encoder.input_dim(),
        class_counts: model.class_counts.clone(),
        head_kind: model.head_kind(),
        model: model.config.clone(),
        tensors,
        extras,
    };
    let path = dir.join(MANIFEST);
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::json(&path, e))?;
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

pub fn load(dir: &Path) -> Result<Checkpoint> {
    let path: PathBuf = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let m: CheckpointManifest = serde_json::from_str(&text).map_err(|e| Error::json(&path, e))?;
    let mut model = ModelState::new(
        m.input_dim,
        &m.class_counts,
        &m.model,
        m.head_kind,
        &mut seeded(0),
    )?;
    let names: Vec<String> = model.named_params().into_iter().map(|(n, _)| n).collect();
    if names.len() != m.tensors.len() {
        return Err(Error::Schema(format!(
            "checkpoint lists {} tensors, model has {}",
            m.tensors.len(),
            names.len()
        )));
    }
    for ((slot, name), e) in model.params_mut().into_iter().zip(&names).zip(&m.tensors) {
        if *name != e.name || slot.shape() != e.shape.as_slice() {
            return Err(Error::Schema(format!(
                "checkpoint tensor {} {:?} does not match model tensor {name} {:?}",
                e.name,
                e.shape,
                slot.shape()
            )));
        }
        *slot = read_raw(&dir.join(&e.file), &e.shape)?;
    }
    let extras = m
        .extras
        .iter()
        .map(|e| Ok((e.name.clone(), read_raw(&dir.join(&e.file), &e.shape)?)))
        .collect::<Result<Vec<_>>>()?;
    Ok(Checkpoint {
        model,
        extras,
        mode: m.mode,
        seed: m.seed,
    })
}
