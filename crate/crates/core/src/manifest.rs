//! Model serialization: a JSON manifest plus raw weight blobs.
//!
//! A model on disk is a directory containing `manifest.json` and one
//! headerless binary file per parameter tensor. Blobs store row-major
//! little-endian `f32` values; the manifest records each blob's relative
//! path, shape and byte length so loads can be validated strictly.
//! Round-tripping a model through save/load preserves every parameter
//! bit-for-bit.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{LayerSpec, Model};
use crate::tensor::Tensor;

/// Reference to a raw `f32` blob on disk, relative to the manifest.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlobRef {
    pub file: String,
    pub shape: Vec<usize>,
    pub byte_len: u64,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
enum LayerEntry {
    Dense {
        input: usize,
        output: usize,
        weight: BlobRef,
        bias: BlobRef,
    },
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: [usize; 2],
        stride: usize,
        padding: usize,
        weight: BlobRef,
        bias: BlobRef,
    },
    BatchNorm {
        channels: usize,
        epsilon: f32,
        gamma: BlobRef,
        beta: BlobRef,
        running_mean: BlobRef,
        running_var: BlobRef,
    },
    Relu,
    Softmax,
    Flatten,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestFile {
    input_shape: Vec<usize>,
    class_labels: Vec<String>,
    layers: Vec<LayerEntry>,
}

/// Reads a little-endian `f32` blob and validates shape and byte length
/// against both the reference and the file's actual size.
pub(crate) fn read_blob(dir: &Path, blob: &BlobRef) -> Result<Tensor> {
    let path = dir.join(&blob.file);
    let expect_len = 4u64 * blob.shape.iter().product::<usize>() as u64;
    if blob.byte_len != expect_len {
        return Err(Error::format(
            &path,
            format!(
                "declared byte_len {} does not match shape {:?} ({} bytes)",
                blob.byte_len, blob.shape, expect_len
            ),
        ));
    }
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    if bytes.len() as u64 != expect_len {
        return Err(Error::format(
            &path,
            format!("file is {} bytes, expected {}", bytes.len(), expect_len),
        ));
    }
    let data: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
        return Err(Error::format(&path, format!("element {pos} is not finite")));
    }
    Tensor::new(blob.shape.clone(), data)
}

/// Writes a tensor as a little-endian `f32` blob and returns its reference.
pub(crate) fn write_blob(dir: &Path, file: &str, tensor: &Tensor) -> Result<BlobRef> {
    let path = dir.join(file);
    let mut bytes = Vec::with_capacity(tensor.len() * 4);
    for v in tensor.data() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(&path, &bytes).map_err(|e| Error::io(&path, e))?;
    Ok(BlobRef {
        file: file.to_string(),
        shape: tensor.shape().to_vec(),
        byte_len: bytes.len() as u64,
    })
}

pub(crate) fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Json { path: path.into(), source: e })
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)
        .map_err(|e| Error::Json { path: path.into(), source: e })?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

/// Loads a model from its manifest path and validates it.
pub fn load_model(manifest_path: &Path) -> Result<Model> {
    let manifest: ManifestFile = read_json(manifest_path)?;
    let dir = manifest_path.parent().unwrap_or_else(|| Path::new("."));
    let mut layers = Vec::with_capacity(manifest.layers.len());
    for entry in &manifest.layers {
        layers.push(match entry {
            LayerEntry::Dense { input, output, weight, bias } => LayerSpec::Dense {
                input: *input,
                output: *output,
                weight: read_blob(dir, weight)?,
                bias: read_blob(dir, bias)?,
            },
            LayerEntry::Conv2d {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
                weight,
                bias,
            } => LayerSpec::Conv2d {
                in_channels: *in_channels,
                out_channels: *out_channels,
                kernel: (kernel[0], kernel[1]),
                stride: *stride,
                padding: *padding,
                weight: read_blob(dir, weight)?,
                bias: read_blob(dir, bias)?,
            },
            LayerEntry::BatchNorm { channels, epsilon, gamma, beta, running_mean, running_var } => {
                LayerSpec::BatchNorm {
                    channels: *channels,
                    epsilon: *epsilon,
                    gamma: read_blob(dir, gamma)?,
                    beta: read_blob(dir, beta)?,
                    running_mean: read_blob(dir, running_mean)?,
                    running_var: read_blob(dir, running_var)?,
                }
            }
            LayerEntry::Relu => LayerSpec::Relu,
            LayerEntry::Softmax => LayerSpec::Softmax,
            LayerEntry::Flatten => LayerSpec::Flatten,
        });
    }
    Model::new(manifest.input_shape, layers, manifest.class_labels)
}

/// Saves a model into `dir` (created if missing) as `manifest.json` plus
/// one blob per parameter tensor. Returns the manifest path.
pub fn save_model(model: &Model, dir: &Path) -> Result<PathBuf> {
    model.validate()?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut entries = Vec::with_capacity(model.layers.len());
    for (i, layer) in model.layers.iter().enumerate() {
        let blob = |name: &str, t: &Tensor| write_blob(dir, &format!("layer{i}_{name}.bin"), t);
        entries.push(match layer {
            LayerSpec::Dense { input, output, weight, bias } => LayerEntry::Dense {
                input: *input,
                output: *output,
                weight: blob("weight", weight)?,
                bias: blob("bias", bias)?,
            },
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
                weight,
                bias,
            } => LayerEntry::Conv2d {
                in_channels: *in_channels,
                out_channels: *out_channels,
                kernel: [kernel.0, kernel.1],
                stride: *stride,
                padding: *padding,
                weight: blob("weight", weight)?,
                bias: blob("bias", bias)?,
            },
            LayerSpec::BatchNorm { channels, epsilon, gamma, beta, running_mean, running_var } => {
                LayerEntry::BatchNorm {
                    channels: *channels,
                    epsilon: *epsilon,
                    gamma: blob("gamma", gamma)?,
                    beta: blob("beta", beta)?,
                    running_mean: blob("running_mean", running_mean)?,
                    running_var: blob("running_var", running_var)?,
                }
            }
            LayerSpec::Relu => LayerEntry::Relu,
            LayerSpec::Softmax => LayerEntry::Softmax,
            LayerSpec::Flatten => LayerEntry::Flatten,
        });
    }
    let manifest = ManifestFile {
        input_shape: model.input_shape.clone(),
        class_labels: model.class_labels.clone(),
        layers: entries,
    };
    let manifest_path = dir.join("manifest.json");
    write_json(&manifest_path, &manifest)?;
    Ok(manifest_path)
}
