//! Datasets: synthetic blob images, IDX files and stratified splits.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A labeled classification dataset. All inputs share one shape and every
/// label is `< class_count`.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    pub inputs: Vec<Tensor>,
    pub labels: Vec<usize>,
    pub class_count: usize,
}

impl LabeledDataset {
    pub fn new(inputs: Vec<Tensor>, labels: Vec<usize>, class_count: usize) -> Result<Self> {
        if inputs.len() != labels.len() {
            return Err(Error::InvalidArgument(format!(
                "{} inputs but {} labels",
                inputs.len(),
                labels.len()
            )));
        }
        if class_count == 0 {
            return Err(Error::InvalidArgument("class_count must be positive".into()));
        }
        if let Some(first) = inputs.first() {
            let shape = first.shape().to_vec();
            if let Some(bad) = inputs.iter().position(|t| t.shape() != shape) {
                return Err(Error::Shape(format!(
                    "input {bad} has shape {:?}, expected {shape:?}",
                    inputs[bad].shape()
                )));
            }
        }
        if let Some(bad) = labels.iter().position(|l| *l >= class_count) {
            return Err(Error::InvalidArgument(format!(
                "label {} at index {bad} exceeds class count {class_count}",
                labels[bad]
            )));
        }
        Ok(LabeledDataset { inputs, labels, class_count })
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    /// Shape shared by all inputs; `None` for an empty dataset.
    pub fn input_shape(&self) -> Option<&[usize]> {
        self.inputs.first().map(|t| t.shape())
    }

    /// New dataset containing the given indices, in the given order.
    pub fn subset(&self, indices: &[usize]) -> Result<LabeledDataset> {
        let mut inputs = Vec::with_capacity(indices.len());
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            let input = self.inputs.get(i).ok_or_else(|| {
                Error::InvalidArgument(format!("index {i} out of range for {} samples", self.len()))
            })?;
            inputs.push(input.clone());
            labels.push(self.labels[i]);
        }
        LabeledDataset::new(inputs, labels, self.class_count)
    }
}

/// Noise-free class template for the synthetic blob dataset: a raised
/// Gaussian bump whose center is class-specific (evenly spaced on a circle
/// around the image center). Values lie strictly inside `[0, 1]`, so adding
/// zero noise reproduces the template exactly.
pub fn class_template(class: usize, classes: usize, shape: &[usize]) -> Result<Tensor> {
    let (channels, h, w) = match shape {
        [h, w] => (1usize, *h, *w),
        [c, h, w] => (*c, *h, *w),
        _ => {
            return Err(Error::Shape(format!(
                "blob shape must be [h, w] or [c, h, w], got {shape:?}"
            )))
        }
    };
    if class >= classes || classes == 0 || h < 2 || w < 2 {
        return Err(Error::InvalidArgument(format!(
            "invalid blob template request: class {class} of {classes}, {h}x{w}"
        )));
    }
    let theta = 2.0 * std::f64::consts::PI * class as f64 / classes as f64;
    let cy = h as f64 * (0.5 + 0.3 * theta.sin());
    let cx = w as f64 * (0.5 + 0.3 * theta.cos());
    let sigma = h.min(w) as f64 / 4.0;
    let mut data = Vec::with_capacity(channels * h * w);
    for c in 0..channels {
        // Later channels carry a dimmer copy so multi-channel inputs are not
        // degenerate duplicates.
        let gain = 1.0 - 0.3 * c as f64 / channels.max(2) as f64;
        for y in 0..h {
            for x in 0..w {
                let d2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
                let v = 0.1 + 0.8 * gain * (-d2 / (2.0 * sigma * sigma)).exp();
                data.push(v as f32);
            }
        }
    }
    Tensor::new(shape.to_vec(), data)
}

/// Generates a deterministic synthetic blob dataset: `per_class` samples per
/// class, each the class template plus iid Gaussian pixel noise of standard
/// deviation `spread`, clipped to `[0, 1]`. Samples are ordered class-major.
pub fn gen_blobs(
    classes: usize,
    shape: &[usize],
    per_class: usize,
    spread: f64,
    seed: u64,
) -> Result<LabeledDataset> {
    if classes == 0 || per_class == 0 {
        return Err(Error::InvalidArgument(
            "gen_blobs needs at least one class and one sample per class".into(),
        ));
    }
    if !spread.is_finite() || spread < 0.0 {
        return Err(Error::InvalidArgument(format!("spread {spread} must be finite and >= 0")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut inputs = Vec::with_capacity(classes * per_class);
    let mut labels = Vec::with_capacity(classes * per_class);
    for class in 0..classes {
        let template = class_template(class, classes, shape)?;
        for _ in 0..per_class {
            let data: Vec<f32> = template
                .data()
                .iter()
                .map(|&v| {
                    let noise: f64 = rng.sample(StandardNormal);
                    (v as f64 + spread * noise).clamp(0.0, 1.0) as f32
                })
                .collect();
            inputs.push(Tensor::new(shape.to_vec(), data)?);
            labels.push(class);
        }
    }
    LabeledDataset::new(inputs, labels, classes)
}

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

fn read_be_u32(bytes: &[u8], offset: usize, path: &Path) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::format(path, format!("truncated header at byte {offset}")))
}

/// Loads an IDX image/label file pair (the MNIST container format:
/// big-endian `u32` magic + dimensions, then raw `u8` payload). Pixels are
/// scaled to `[0, 1]`; each image becomes a `[rows, cols]` tensor.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<LabeledDataset> {
    let img_bytes = fs::read(images_path).map_err(|e| Error::io(images_path, e))?;
    let magic = read_be_u32(&img_bytes, 0, images_path)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::format(
            images_path,
            format!("bad image magic {magic:#010x}, expected {IDX_IMAGES_MAGIC:#010x}"),
        ));
    }
    let count = read_be_u32(&img_bytes, 4, images_path)? as usize;
    let rows = read_be_u32(&img_bytes, 8, images_path)? as usize;
    let cols = read_be_u32(&img_bytes, 12, images_path)? as usize;
    let payload = &img_bytes[16..];
    let expect = count
        .checked_mul(rows)
        .and_then(|v| v.checked_mul(cols))
        .ok_or_else(|| Error::format(images_path, "image dimensions overflow".to_string()))?;
    if payload.len() != expect {
        return Err(Error::format(
            images_path,
            format!("payload is {} bytes, expected {expect}", payload.len()),
        ));
    }
    if rows == 0 || cols == 0 {
        return Err(Error::format(images_path, "zero image dimensions".to_string()));
    }

    let lbl_bytes = fs::read(labels_path).map_err(|e| Error::io(labels_path, e))?;
    let magic = read_be_u32(&lbl_bytes, 0, labels_path)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::format(
            labels_path,
            format!("bad label magic {magic:#010x}, expected {IDX_LABELS_MAGIC:#010x}"),
        ));
    }
    let lbl_count = read_be_u32(&lbl_bytes, 4, labels_path)? as usize;
    let lbl_payload = &lbl_bytes[8..];
    if lbl_payload.len() != lbl_count {
        return Err(Error::format(
            labels_path,
            format!("payload is {} bytes, expected {lbl_count}", lbl_payload.len()),
        ));
    }
    if lbl_count != count {
        return Err(Error::format(
            labels_path,
            format!("{lbl_count} labels for {count} images"),
        ));
    }

    let mut inputs = Vec::with_capacity(count);
    for i in 0..count {
        let slice = &payload[i * rows * cols..(i + 1) * rows * cols];
        let data: Vec<f32> = slice.iter().map(|&b| b as f32 / 255.0).collect();
        inputs.push(Tensor::new(vec![rows, cols], data)?);
    }
    let labels: Vec<usize> = lbl_payload.iter().map(|&b| b as usize).collect();
    let class_count = labels.iter().copied().max().unwrap_or(0) + 1;
    LabeledDataset::new(inputs, labels, class_count)
}

/// Writes `[rows, cols]`-shaped `u8` images and labels as an IDX pair.
/// Mainly used to exercise [`load_idx`] round-trips in tests and tooling.
pub fn save_idx(
    images_path: &Path,
    labels_path: &Path,
    rows: usize,
    cols: usize,
    images: &[Vec<u8>],
    labels: &[u8],
) -> Result<()> {
    if images.len() != labels.len() {
        return Err(Error::InvalidArgument(format!(
            "{} images but {} labels",
            images.len(),
            labels.len()
        )));
    }
    let mut img_bytes = Vec::with_capacity(16 + images.len() * rows * cols);
    img_bytes.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
    img_bytes.extend_from_slice(&(images.len() as u32).to_be_bytes());
    img_bytes.extend_from_slice(&(rows as u32).to_be_bytes());
    img_bytes.extend_from_slice(&(cols as u32).to_be_bytes());
    for (i, img) in images.iter().enumerate() {
        if img.len() != rows * cols {
            return Err(Error::InvalidArgument(format!(
                "image {i} has {} pixels, expected {}",
                img.len(),
                rows * cols
            )));
        }
        img_bytes.extend_from_slice(img);
    }
    fs::write(images_path, img_bytes).map_err(|e| Error::io(images_path, e))?;

    let mut lbl_bytes = Vec::with_capacity(8 + labels.len());
    lbl_bytes.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    lbl_bytes.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    lbl_bytes.extend_from_slice(labels);
    fs::write(labels_path, lbl_bytes).map_err(|e| Error::io(labels_path, e))
}

/// Deterministic stratified split into `(train, test)`.
///
/// Per class, indices are shuffled with a seeded rng and `round(n *
/// fraction)` go to train; whenever a class has at least two samples both
/// halves receive at least one. A class with a single sample goes to train.
/// Output order is ascending by original index on both sides.
pub fn split(
    data: &LabeledDataset,
    fraction: f64,
    seed: u64,
) -> Result<(LabeledDataset, LabeledDataset)> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(Error::InvalidArgument(format!(
            "split fraction {fraction} must be in [0, 1]"
        )));
    }
    if data.is_empty() {
        return Err(Error::InvalidArgument("cannot split an empty dataset".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut train_idx = Vec::new();
    let mut test_idx = Vec::new();
    for class in 0..data.class_count {
        let mut members: Vec<usize> = (0..data.len()).filter(|&i| data.labels[i] == class).collect();
        if members.is_empty() {
            continue;
        }
        members.shuffle(&mut rng);
        let n = members.len();
        let take = if n == 1 {
            1
        } else {
            ((n as f64 * fraction).round() as usize).clamp(1, n - 1)
        };
        train_idx.extend_from_slice(&members[..take]);
        test_idx.extend_from_slice(&members[take..]);
    }
    train_idx.sort_unstable();
    test_idx.sort_unstable();
    Ok((data.subset(&train_idx)?, data.subset(&test_idx)?))
}
