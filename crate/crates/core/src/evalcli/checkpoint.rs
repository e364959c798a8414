//! JSON checkpoints with base64 little-endian `f64` blobs.
//!
//! Every tensor is stored under a stable name with its shape spelled out, so
//! a checkpoint can be inspected by eye and still reloads bit-exactly.

use std::path::Path;

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Architecture, MlpModel};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorBlob {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointFile {
    version: u32,
    architecture: Architecture,
    tensors: Vec<TensorBlob>,
    seed: u64,
    config: serde_json::Value,
}

/// A loaded checkpoint.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: MlpModel,
    pub seed: u64,
    pub config: serde_json::Value,
}

fn encode(values: &[f64]) -> String {
    let bytes: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
    STANDARD.encode(bytes)
}

fn decode(blob: &TensorBlob) -> Result<Vec<f64>> {
    let bytes = STANDARD
        .decode(&blob.data)
        .map_err(|e| Error::CorruptCheckpoint(format!("tensor `{}`: {e}", blob.name)))?;
    if bytes.len() % 8 != 0 {
        return Err(Error::CorruptCheckpoint(format!(
            "tensor `{}` has {} bytes, not a whole number of f64s",
            blob.name,
            bytes.len()
        )));
    }
    let values: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect();
    let expected: usize = blob.shape.iter().product();
    if values.len() != expected {
        return Err(Error::CorruptCheckpoint(format!(
            "tensor `{}` holds {} values but its shape {:?} needs {expected}",
            blob.name,
            values.len(),
            blob.shape
        )));
    }
    Ok(values)
}

/// Named tensors of `model` in a fixed order.
fn tensors(model: &MlpModel) -> Vec<(String, Vec<usize>, Vec<f64>)> {
    let mut out = Vec::new();
    for (i, l) in model.layers().iter().enumerate() {
        let p = format!("layers.{i}");
        out.push((
            format!("{p}.weight"),
            vec![l.weight.rows(), l.weight.cols()],
            l.weight.as_slice().to_vec(),
        ));
        out.push((format!("{p}.bias"), vec![l.bias.len()], l.bias.clone()));
        if let Some(bn) = &l.bn {
            let w = bn.width();
            out.push((format!("{p}.bn.gamma"), vec![w], bn.gamma.clone()));
            out.push((format!("{p}.bn.beta"), vec![w], bn.beta.clone()));
            out.push((format!("{p}.bn.running_mean"), vec![w], bn.running_mean.clone()));
            out.push((format!("{p}.bn.running_var"), vec![w], bn.running_var.clone()));
            out.push((format!("{p}.bn.hyper"), vec![2], vec![bn.momentum, bn.epsilon]));
        }
    }
    out
}

pub fn checkpoint_to_json(model: &MlpModel, seed: u64, config: &serde_json::Value) -> Result<String> {
    let file = CheckpointFile {
        version: CHECKPOINT_VERSION,
        architecture: model.architecture(),
        tensors: tensors(model)
            .into_iter()
            .map(|(name, shape, values)| TensorBlob {
                name,
                shape,
                data: encode(&values),
            })
            .collect(),
        seed,
        config: config.clone(),
    };
    serde_json::to_string_pretty(&file).map_err(|e| Error::CorruptCheckpoint(e.to_string()))
}

pub fn checkpoint_from_json(text: &str) -> Result<Checkpoint> {
    // Read the version first so a future format is reported as such rather
    // than as a parse failure.
    let raw: serde_json::Value =
        serde_json::from_str(text).map_err(|e| Error::CorruptCheckpoint(e.to_string()))?;
    match raw.get("version").and_then(serde_json::Value::as_u64) {
        Some(v) if v == u64::from(CHECKPOINT_VERSION) => {}
        Some(v) => return Err(Error::UnknownVersion(v.try_into().unwrap_or(u32::MAX))),
        None => return Err(Error::CorruptCheckpoint("missing `version`".into())),
    }
    let file: CheckpointFile =
        serde_json::from_value(raw).map_err(|e| Error::CorruptCheckpoint(e.to_string()))?;

    // Build a skeleton of the right shape, then overwrite every tensor.
    let mut model = MlpModel::init(&file.architecture, &mut ChaCha8Rng::seed_from_u64(0))?;
    let expected = tensors(&model);
    if expected.len() != file.tensors.len() {
        return Err(Error::shape("checkpoint tensors", expected.len(), file.tensors.len()));
    }
    let mut decoded = Vec::with_capacity(expected.len());
    for ((name, shape, _), blob) in expected.iter().zip(&file.tensors) {
        if *name != blob.name {
            return Err(Error::CorruptCheckpoint(format!(
                "expected tensor `{name}`, found `{}`",
                blob.name
            )));
        }
        if *shape != blob.shape {
            return Err(Error::Shape {
                op: "checkpoint tensor",
                expected: format!("{name} {shape:?}"),
                got: format!("{:?}", blob.shape),
            });
        }
        decoded.push(decode(blob)?);
    }

    let mut it = decoded.into_iter();
    let mut next = || it.next().expect("counted above");
    for layer in model.layers_mut() {
        layer.weight.as_mut_slice().copy_from_slice(&next());
        layer.bias = next();
        if let Some(bn) = &mut layer.bn {
            bn.gamma = next();
            bn.beta = next();
            bn.running_mean = next();
            bn.running_var = next();
            let hyper = next();
            bn.momentum = hyper[0];
            bn.epsilon = hyper[1];
        }
    }
    // Revalidate (positive running variances and so on).
    let model = MlpModel::new(model.layers().to_vec(), model.feature_tap())?;
    Ok(Checkpoint {
        model,
        seed: file.seed,
        config: file.config,
    })
}

pub fn checkpoint_save(
    path: &Path,
    model: &MlpModel,
    seed: u64,
    config: &serde_json::Value,
) -> Result<()> {
    let text = checkpoint_to_json(model, seed, config)?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn checkpoint_load(path: &Path) -> Result<Checkpoint> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    checkpoint_from_json(&text)
}
