//! Learned low-dimensional input manifolds.
//!
//! Fuzzing mutates points in a latent space and decodes them back to model
//! inputs, so candidates stay close to the data distribution instead of
//! wandering into pixel noise. Two manifold families are supported:
//!
//! * **PCA** — one affine subspace per class: the class mean plus the top
//!   eigenvectors of the class covariance. Encode/decode are exact linear
//!   maps. Eigendecomposition is a hand-rolled cyclic Jacobi in `f64` (the
//!   matrices are tiny and determinism matters more than speed); when a
//!   class has fewer samples than input dimensions the spectrum is taken
//!   from the Gram matrix instead of the full covariance.
//! * **Decoder net** — a shared decoder network with one bank of batch-norm
//!   parameters per class (class-conditional normalization), plus an
//!   optional encoder. Without an encoder, encoding is a deterministic
//!   latent search: best of a fixed number of prior samples refined by
//!   coordinate-wise golden-section descent on reconstruction error.
//!
//! Decoded tensors are clipped into the manifold's valid range; the raw
//! pre-clip tensor is retained because fault reports want to show what the
//! decoder actually produced.

use std::path::{Path, PathBuf};

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::forward::forward;
use crate::manifest::{load_model, read_json, save_model, write_blob, write_json, BlobRef};
use crate::model::{LayerSpec, Model};
use crate::tensor::Tensor;

// ---------------------------------------------------------------------------
// Symmetric eigendecomposition (cyclic Jacobi)
// ---------------------------------------------------------------------------

/// Eigendecomposition of a symmetric matrix (row-major, `n x n`).
///
/// Returns `(eigenvalues, eigenvectors)` with eigenvalues in descending
/// order and eigenvector `i` stored as row `i` of the second vector
/// (length `n * n`). Eigenvectors are orthonormal and sign-normalized so
/// that the first entry with magnitude above `1e-12` is positive. The
/// routine is deterministic: identical input bits give identical output.
pub fn sym_eigen(matrix: &[f64], n: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    if matrix.len() != n * n {
        return Err(Error::Shape(format!(
            "matrix has {} elements, expected {}",
            matrix.len(),
            n * n
        )));
    }
    if n == 0 {
        return Err(Error::InvalidArgument("empty matrix".into()));
    }
    for i in 0..n {
        for j in 0..i {
            let (a, b) = (matrix[i * n + j], matrix[j * n + i]);
            if !a.is_finite() || (a - b).abs() > 1e-9 * (1.0 + a.abs().max(b.abs())) {
                return Err(Error::InvalidArgument(format!(
                    "matrix is not symmetric at ({i}, {j}): {a} vs {b}"
                )));
            }
        }
    }

    let mut a = matrix.to_vec();
    // v starts as the identity and accumulates the rotations; column i of v
    // converges to eigenvector i.
    let mut v = vec![0.0; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }

    let fro: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let tol = (1e-14 * fro).max(f64::MIN_POSITIVE);
    let max_sweeps = 100;
    for _sweep in 0..max_sweeps {
        let mut off = 0.0;
        for p in 0..n {
            for q in (p + 1)..n {
                off += a[p * n + q] * a[p * n + q];
            }
        }
        if off.sqrt() <= tol {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a[p * n + q];
                if apq.abs() <= tol / (n * n) as f64 {
                    continue;
                }
                let app = a[p * n + p];
                let aqq = a[q * n + q];
                let theta = 0.5 * (2.0 * apq).atan2(app - aqq);
                let (s, c) = theta.sin_cos();
                // A <- J^T A J with the Givens rotation J in plane (p, q).
                for k in 0..n {
                    let akp = a[k * n + p];
                    let akq = a[k * n + q];
                    a[k * n + p] = c * akp + s * akq;
                    a[k * n + q] = -s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[p * n + k];
                    let aqk = a[q * n + k];
                    a[p * n + k] = c * apk + s * aqk;
                    a[q * n + k] = -s * apk + c * aqk;
                }
                for k in 0..n {
                    let vkp = v[k * n + p];
                    let vkq = v[k * n + q];
                    v[k * n + p] = c * vkp + s * vkq;
                    v[k * n + q] = -s * vkp + c * vkq;
                }
            }
        }
    }

    // Sort eigenpairs by descending eigenvalue (stable: ties keep their
    // original plane order, so the result is deterministic).
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[j * n + j].total_cmp(&a[i * n + i]));
    let mut values = Vec::with_capacity(n);
    let mut vectors = vec![0.0; n * n];
    for (row, &src) in order.iter().enumerate() {
        values.push(a[src * n + src]);
        for k in 0..n {
            vectors[row * n + k] = v[k * n + src];
        }
        sign_normalize(&mut vectors[row * n..(row + 1) * n]);
    }
    Ok((values, vectors))
}

/// Flips a vector in place so its first entry with `|x| > 1e-12` is positive.
pub fn sign_normalize(v: &mut [f64]) {
    if let Some(&lead) = v.iter().find(|x| x.abs() > 1e-12) {
        if lead < 0.0 {
            for x in v.iter_mut() {
                *x = -*x;
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Manifold model
// ---------------------------------------------------------------------------

/// A point in manifold latent space, tagged with the class whose manifold
/// chart it lives on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentPoint {
    pub coords: Vec<f64>,
    pub class_label: usize,
}

/// Result of decoding a latent point.
#[derive(Debug, Clone, PartialEq)]
pub struct Decoded {
    /// Decoder output clipped into the valid range — what the target model
    /// actually consumes.
    pub clipped: Tensor,
    /// Unclipped decoder output, kept for fault reports.
    pub raw: Tensor,
}

/// Per-class PCA chart: mean plus orthonormal principal directions.
#[derive(Debug, Clone, PartialEq)]
pub struct PcaClassBank {
    pub label: usize,
    /// Length `D` (flattened input dimension).
    pub mean: Vec<f64>,
    /// Row-major `latent_dim x D`; rows are orthonormal, ordered by
    /// descending explained variance.
    pub components: Vec<f64>,
}

/// One batch-norm parameter override inside a decoder network.
#[derive(Debug, Clone, PartialEq)]
pub struct BnOverride {
    /// Index of the batch-norm layer in the decoder's layer list.
    pub layer: usize,
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Tensor,
    pub running_var: Tensor,
}

/// Class-conditional batch-norm parameters for a decoder network.
#[derive(Debug, Clone, PartialEq)]
pub struct BnBank {
    pub label: usize,
    pub overrides: Vec<BnOverride>,
}

/// Budget of the encoder-free latent search.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SearchBudget {
    /// Prior samples scored before descent.
    pub samples: usize,
    /// Full passes of coordinate-wise golden-section descent.
    pub rounds: usize,
    /// Half-width of the search bracket around the current coordinate.
    pub bracket: f64,
    /// Golden-section iterations per coordinate.
    pub iters: usize,
}

impl Default for SearchBudget {
    fn default() -> Self {
        SearchBudget { samples: 256, rounds: 100, bracket: 2.0, iters: 24 }
    }
}

#[derive(Debug, Clone, PartialEq)]
enum ManifoldKind {
    Pca {
        banks: Vec<PcaClassBank>,
    },
    DecoderNet {
        decoder: Model,
        banks: Vec<BnBank>,
        /// Decoder with the bank substituted, one per bank (same order).
        materialized: Vec<Model>,
        encoder: Option<Model>,
        search: SearchBudget,
    },
}

/// A learned input manifold with one chart per class.
#[derive(Debug, Clone, PartialEq)]
pub struct ManifoldModel {
    latent_dim: usize,
    data_shape: Vec<usize>,
    valid_range: (f32, f32),
    kind: ManifoldKind,
}

fn validate_common(latent_dim: usize, data_shape: &[usize], valid_range: (f32, f32)) -> Result<usize> {
    if latent_dim == 0 {
        return Err(Error::InvalidArgument("latent_dim must be positive".into()));
    }
    let d: usize = data_shape.iter().product();
    if data_shape.is_empty() || d == 0 {
        return Err(Error::Shape(format!("invalid data shape {data_shape:?}")));
    }
    let (lo, hi) = valid_range;
    if !lo.is_finite() || !hi.is_finite() || lo >= hi {
        return Err(Error::InvalidArgument(format!(
            "valid range [{lo}, {hi}] must be finite with lo < hi"
        )));
    }
    Ok(d)
}

impl ManifoldModel {
    /// Builds a PCA manifold from explicit class banks.
    pub fn from_pca_banks(
        latent_dim: usize,
        data_shape: Vec<usize>,
        valid_range: (f32, f32),
        mut banks: Vec<PcaClassBank>,
    ) -> Result<Self> {
        let d = validate_common(latent_dim, &data_shape, valid_range)?;
        if banks.is_empty() {
            return Err(Error::InvalidArgument("manifold needs at least one class".into()));
        }
        banks.sort_by_key(|b| b.label);
        for w in banks.windows(2) {
            if w[0].label == w[1].label {
                return Err(Error::InvalidArgument(format!(
                    "duplicate class label {}",
                    w[0].label
                )));
            }
        }
        for bank in &banks {
            if bank.mean.len() != d || bank.components.len() != latent_dim * d {
                return Err(Error::Shape(format!(
                    "class {}: mean {} / components {} do not match latent_dim {latent_dim}, data dim {d}",
                    bank.label,
                    bank.mean.len(),
                    bank.components.len()
                )));
            }
            if bank.mean.iter().any(|v| !v.is_finite())
                || bank.components.iter().any(|v| !v.is_finite())
            {
                return Err(Error::NonFinite(format!("class {} pca bank", bank.label)));
            }
        }
        Ok(ManifoldModel {
            latent_dim,
            data_shape,
            valid_range,
            kind: ManifoldKind::Pca { banks },
        })
    }

    /// Builds a decoder-network manifold. `banks` must be non-empty; each
    /// bank override must target a batch-norm layer of the decoder with
    /// matching channel count. Decoder output size must equal the data
    /// size; an encoder, when given, must map the data shape to
    /// `[latent_dim]`.
    pub fn decoder_net(
        latent_dim: usize,
        data_shape: Vec<usize>,
        valid_range: (f32, f32),
        decoder: Model,
        mut banks: Vec<BnBank>,
        encoder: Option<Model>,
        search: SearchBudget,
    ) -> Result<Self> {
        let d = validate_common(latent_dim, &data_shape, valid_range)?;
        if banks.is_empty() {
            return Err(Error::InvalidArgument("manifold needs at least one class".into()));
        }
        if search.samples == 0 || search.iters == 0 {
            return Err(Error::InvalidArgument(
                "search budget needs at least one sample and one iteration".into(),
            ));
        }
        if !search.bracket.is_finite() || search.bracket <= 0.0 {
            return Err(Error::InvalidArgument("search bracket must be positive".into()));
        }
        let out = decoder.validate()?;
        if decoder.input_shape != [latent_dim] {
            return Err(Error::Shape(format!(
                "decoder input {:?} must be [{latent_dim}]",
                decoder.input_shape
            )));
        }
        if out.iter().product::<usize>() != d {
            return Err(Error::Shape(format!(
                "decoder output {out:?} does not match data shape {data_shape:?}"
            )));
        }
        if let Some(enc) = &encoder {
            let enc_out = enc.validate()?;
            if enc.input_shape != data_shape {
                return Err(Error::Shape(format!(
                    "encoder input {:?} must be {data_shape:?}",
                    enc.input_shape
                )));
            }
            if enc_out != [latent_dim] {
                return Err(Error::Shape(format!(
                    "encoder output {enc_out:?} must be [{latent_dim}]"
                )));
            }
        }
        banks.sort_by_key(|b| b.label);
        for w in banks.windows(2) {
            if w[0].label == w[1].label {
                return Err(Error::InvalidArgument(format!(
                    "duplicate class label {}",
                    w[0].label
                )));
            }
        }
        let mut materialized = Vec::with_capacity(banks.len());
        for bank in &banks {
            let mut per_class = decoder.clone();
            for ov in &bank.overrides {
                let layer = per_class.layers.get_mut(ov.layer).ok_or_else(|| {
                    Error::InvalidArgument(format!(
                        "class {}: override targets layer {} of a {}-layer decoder",
                        bank.label,
                        ov.layer,
                        decoder.layers.len()
                    ))
                })?;
                match layer {
                    LayerSpec::BatchNorm { channels, gamma, beta, running_mean, running_var, .. } => {
                        for (name, t) in [
                            ("gamma", &ov.gamma),
                            ("beta", &ov.beta),
                            ("running_mean", &ov.running_mean),
                            ("running_var", &ov.running_var),
                        ] {
                            if t.shape() != [*channels] {
                                return Err(Error::Shape(format!(
                                    "class {}: {name} override for layer {} has shape {:?}, expected [{channels}]",
                                    bank.label,
                                    ov.layer,
                                    t.shape()
                                )));
                            }
                        }
                        *gamma = ov.gamma.clone();
                        *beta = ov.beta.clone();
                        *running_mean = ov.running_mean.clone();
                        *running_var = ov.running_var.clone();
                    }
                    other => {
                        return Err(Error::InvalidArgument(format!(
                            "class {}: override targets layer {} which is {}, not batch_norm",
                            bank.label,
                            ov.layer,
                            other.kind()
                        )))
                    }
                }
            }
            per_class.validate()?;
            materialized.push(per_class);
        }
        Ok(ManifoldModel {
            latent_dim,
            data_shape,
            valid_range,
            kind: ManifoldKind::DecoderNet { decoder, banks, materialized, encoder, search },
        })
    }

    pub fn latent_dim(&self) -> usize {
        self.latent_dim
    }

    pub fn data_shape(&self) -> &[usize] {
        &self.data_shape
    }

    pub fn valid_range(&self) -> (f32, f32) {
        self.valid_range
    }

    /// Class labels with a chart, ascending.
    pub fn classes(&self) -> Vec<usize> {
        match &self.kind {
            ManifoldKind::Pca { banks } => banks.iter().map(|b| b.label).collect(),
            ManifoldKind::DecoderNet { banks, .. } => banks.iter().map(|b| b.label).collect(),
        }
    }

    fn class_index(&self, label: usize) -> Result<usize> {
        let classes = self.classes();
        classes.binary_search(&label).map_err(|_| {
            Error::InvalidArgument(format!(
                "class {label} has no manifold chart (available: {classes:?})"
            ))
        })
    }

    /// Projects an input onto the chart of `class_label`.
    pub fn encode(&self, x: &Tensor, class_label: usize) -> Result<LatentPoint> {
        if x.shape() != self.data_shape {
            return Err(Error::Shape(format!(
                "input shape {:?} does not match manifold data shape {:?}",
                x.shape(),
                self.data_shape
            )));
        }
        let ci = self.class_index(class_label)?;
        match &self.kind {
            ManifoldKind::Pca { banks } => {
                let bank = &banks[ci];
                let d = bank.mean.len();
                let mut coords = vec![0.0; self.latent_dim];
                for (i, c) in coords.iter_mut().enumerate() {
                    let row = &bank.components[i * d..(i + 1) * d];
                    let mut acc = 0.0;
                    for j in 0..d {
                        acc += row[j] * (x.data()[j] as f64 - bank.mean[j]);
                    }
                    *c = acc;
                }
                Ok(LatentPoint { coords, class_label })
            }
            ManifoldKind::DecoderNet { encoder, search, .. } => match encoder {
                Some(enc) => {
                    let z = forward(enc, x)?;
                    Ok(LatentPoint {
                        coords: z.data().iter().map(|&v| v as f64).collect(),
                        class_label,
                    })
                }
                None => self.latent_search(x, class_label, *search),
            },
        }
    }

    /// Decodes a latent point; convenience wrapper returning only the
    /// clipped tensor.
    pub fn decode(&self, z: &LatentPoint) -> Result<Tensor> {
        self.decode_full(z).map(|d| d.clipped)
    }

    /// Decodes a latent point into both the clipped and the raw tensor.
    pub fn decode_full(&self, z: &LatentPoint) -> Result<Decoded> {
        if z.coords.len() != self.latent_dim {
            return Err(Error::Shape(format!(
                "latent point has {} coords, manifold has latent_dim {}",
                z.coords.len(),
                self.latent_dim
            )));
        }
        if z.coords.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("latent coordinates".into()));
        }
        let ci = self.class_index(z.class_label)?;
        let raw: Tensor = match &self.kind {
            ManifoldKind::Pca { banks } => {
                let bank = &banks[ci];
                let d = bank.mean.len();
                let mut out = bank.mean.clone();
                for (i, &c) in z.coords.iter().enumerate() {
                    let row = &bank.components[i * d..(i + 1) * d];
                    for j in 0..d {
                        out[j] += c * row[j];
                    }
                }
                Tensor::new(self.data_shape.clone(), out.iter().map(|&v| v as f32).collect())?
            }
            ManifoldKind::DecoderNet { materialized, .. } => {
                let zt = Tensor::new(
                    vec![self.latent_dim],
                    z.coords.iter().map(|&v| v as f32).collect(),
                )?;
                let out = forward(&materialized[ci], &zt)?;
                out.reshaped(self.data_shape.clone())?
            }
        };
        let (lo, hi) = self.valid_range;
        let clipped = Tensor::new(
            self.data_shape.clone(),
            raw.data().iter().map(|&v| v.clamp(lo, hi)).collect(),
        )?;
        Ok(Decoded { clipped, raw })
    }

    /// Draws a latent point from the standard normal prior on the chart of
    /// `class_label`.
    pub fn sample_prior(&self, rng: &mut ChaCha8Rng, class_label: usize) -> Result<LatentPoint> {
        self.class_index(class_label)?;
        let coords = (0..self.latent_dim)
            .map(|_| StandardNormal.sample(rng))
            .collect();
        Ok(LatentPoint { coords, class_label })
    }

    /// Encoder-free projection: best of `samples` prior draws refined by
    /// coordinate-wise golden-section descent on raw reconstruction MSE.
    /// Deterministic: the prior draws come from a fixed-seed stream.
    fn latent_search(&self, x: &Tensor, class_label: usize, search: SearchBudget) -> Result<LatentPoint> {
        let mse = |z: &LatentPoint| -> Result<f64> {
            let dec = self.decode_full(z)?;
            let sum: f64 = dec
                .raw
                .data()
                .iter()
                .zip(x.data())
                .map(|(&a, &b)| ((a - b) as f64).powi(2))
                .sum();
            Ok(sum / x.len() as f64)
        };

        let mut rng = ChaCha8Rng::seed_from_u64(0x6c61_7465_6e74); // fixed: encode is a pure function
        let mut best = LatentPoint { coords: vec![0.0; self.latent_dim], class_label };
        let mut best_err = mse(&best)?;
        for _ in 0..search.samples {
            let z = self.sample_prior(&mut rng, class_label)?;
            let e = mse(&z)?;
            if e < best_err {
                best_err = e;
                best = z;
            }
        }

        let phi = (5.0f64.sqrt() - 1.0) / 2.0;
        for _ in 0..search.rounds {
            for i in 0..self.latent_dim {
                let center = best.coords[i];
                let mut a = center - search.bracket;
                let mut b = center + search.bracket;
                let mut probe = best.clone();
                let eval = |coord: f64, probe: &mut LatentPoint| -> Result<f64> {
                    probe.coords[i] = coord;
                    mse(probe)
                };
                let mut c = b - phi * (b - a);
                let mut d = a + phi * (b - a);
                let mut fc = eval(c, &mut probe)?;
                let mut fd = eval(d, &mut probe)?;
                for _ in 0..search.iters {
                    if fc < fd {
                        b = d;
                        d = c;
                        fd = fc;
                        c = b - phi * (b - a);
                        fc = eval(c, &mut probe)?;
                    } else {
                        a = c;
                        c = d;
                        fc = fd;
                        d = a + phi * (b - a);
                        fd = eval(d, &mut probe)?;
                    }
                }
                let candidate = (a + b) / 2.0;
                let e = eval(candidate, &mut probe)?;
                if e < best_err {
                    best_err = e;
                    best.coords[i] = candidate;
                } // else keep the previous coordinate
            }
        }
        Ok(best)
    }
}

// ---------------------------------------------------------------------------
// PCA construction
// ---------------------------------------------------------------------------

/// Builds the PCA bank of one class. Returns the bank (possibly with fewer
/// than `latent_dim` directions if the class covariance is rank-deficient)
/// and any warnings generated.
fn build_pca_bank(
    data: &LabeledDataset,
    class_label: usize,
    latent_dim: usize,
) -> Result<(PcaClassBank, usize, Vec<String>)> {
    let members: Vec<&Tensor> = data
        .inputs
        .iter()
        .zip(&data.labels)
        .filter(|(_, &l)| l == class_label)
        .map(|(t, _)| t)
        .collect();
    let n = members.len();
    if n < 2 {
        return Err(Error::InvalidArgument(format!(
            "class {class_label} has {n} samples; PCA needs at least 2"
        )));
    }
    let d = members[0].len();
    let mut warnings = Vec::new();

    let mut mean = vec![0.0f64; d];
    for t in &members {
        for (m, &v) in mean.iter_mut().zip(t.data()) {
            *m += v as f64;
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }
    // Centered data, row-major n x d.
    let mut y = vec![0.0f64; n * d];
    for (r, t) in members.iter().enumerate() {
        for (j, &v) in t.data().iter().enumerate() {
            y[r * d + j] = v as f64 - mean[j];
        }
    }

    // Eigenvectors of the covariance Y^T Y / n. When n < d, go through the
    // n x n Gram matrix instead: K = Y Y^T / n shares the non-zero spectrum
    // and u_i = Y^T v_i / |Y^T v_i| recovers the data-space directions.
    let (eigvals, directions): (Vec<f64>, Vec<f64>) = if n >= d {
        let mut cov = vec![0.0f64; d * d];
        for r in 0..n {
            let row = &y[r * d..(r + 1) * d];
            for i in 0..d {
                let yi = row[i];
                if yi == 0.0 {
                    continue;
                }
                for j in i..d {
                    cov[i * d + j] += yi * row[j];
                }
            }
        }
        for i in 0..d {
            for j in i..d {
                let v = cov[i * d + j] / n as f64;
                cov[i * d + j] = v;
                cov[j * d + i] = v;
            }
        }
        sym_eigen(&cov, d)?
    } else {
        let mut gram = vec![0.0f64; n * n];
        for r in 0..n {
            for s in r..n {
                let mut acc = 0.0;
                for j in 0..d {
                    acc += y[r * d + j] * y[s * d + j];
                }
                let v = acc / n as f64;
                gram[r * n + s] = v;
                gram[s * n + r] = v;
            }
        }
        let (vals, vecs) = sym_eigen(&gram, n)?;
        // Lift Gram eigenvectors into data space.
        let mut dirs = vec![0.0f64; n * d];
        for i in 0..n {
            let vrow = &vecs[i * n..(i + 1) * n];
            let out = &mut dirs[i * d..(i + 1) * d];
            for r in 0..n {
                let w = vrow[r];
                if w == 0.0 {
                    continue;
                }
                let yrow = &y[r * d..(r + 1) * d];
                for j in 0..d {
                    out[j] += w * yrow[j];
                }
            }
            let norm: f64 = out.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > 0.0 {
                for v in out.iter_mut() {
                    *v /= norm;
                }
            }
            sign_normalize(out);
        }
        (vals, dirs)
    };

    let lead = eigvals.first().copied().unwrap_or(0.0).max(0.0);
    let rank_tol = (lead * 1e-10).max(1e-18);
    let rank = eigvals.iter().take_while(|&&v| v > rank_tol).count();
    if rank == 0 {
        return Err(Error::InvalidArgument(format!(
            "class {class_label} has zero variance; no manifold directions exist"
        )));
    }
    let kept = latent_dim.min(rank);
    if kept < latent_dim {
        warnings.push(format!(
            "class {class_label}: requested {latent_dim} directions but covariance rank is {rank}; kept {kept}"
        ));
    }
    let mut components = Vec::with_capacity(kept * d);
    for i in 0..kept {
        components.extend_from_slice(&directions[i * d..(i + 1) * d]);
    }
    Ok((PcaClassBank { label: class_label, mean, components }, kept, warnings))
}

fn assemble_pca(
    data: &LabeledDataset,
    labels: &[usize],
    latent_dim: usize,
    valid_range: (f32, f32),
) -> Result<(ManifoldModel, Vec<String>)> {
    if latent_dim == 0 {
        return Err(Error::InvalidArgument("latent_dim must be positive".into()));
    }
    let shape = data
        .input_shape()
        .ok_or_else(|| Error::InvalidArgument("dataset is empty".into()))?
        .to_vec();
    let mut warnings = Vec::new();
    let mut banks = Vec::new();
    let mut kept_min = latent_dim;
    for &label in labels {
        let (bank, kept, w) = build_pca_bank(data, label, latent_dim)?;
        warnings.extend(w);
        kept_min = kept_min.min(kept);
        banks.push(bank);
    }
    if kept_min < latent_dim {
        warnings.push(format!(
            "manifold latent_dim reduced from {latent_dim} to {kept_min} (lowest class rank)"
        ));
    }
    // Truncate every bank to the common dimension (rows are ordered by
    // descending variance, so dropping the tail keeps the best directions).
    let d: usize = shape.iter().product();
    for bank in &mut banks {
        bank.components.truncate(kept_min * d);
    }
    let m = ManifoldModel::from_pca_banks(kept_min, shape, valid_range, banks)?;
    Ok((m, warnings))
}

/// Builds a single-class PCA manifold.
pub fn build_pca(
    data: &LabeledDataset,
    class_label: usize,
    latent_dim: usize,
    valid_range: (f32, f32),
) -> Result<(ManifoldModel, Vec<String>)> {
    assemble_pca(data, &[class_label], latent_dim, valid_range)
}

/// Builds a PCA manifold with one chart per class present in the dataset.
pub fn build_pca_manifold(
    data: &LabeledDataset,
    latent_dim: usize,
    valid_range: (f32, f32),
) -> Result<(ManifoldModel, Vec<String>)> {
    let mut labels: Vec<usize> = (0..data.class_count)
        .filter(|c| data.labels.contains(c))
        .collect();
    labels.sort_unstable();
    if labels.is_empty() {
        return Err(Error::InvalidArgument("dataset has no samples".into()));
    }
    assemble_pca(data, &labels, latent_dim, valid_range)
}

// ---------------------------------------------------------------------------
// Serialization
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PcaClassEntry {
    label: usize,
    mean: BlobRef,
    components: BlobRef,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BnOverrideEntry {
    layer: usize,
    gamma: BlobRef,
    beta: BlobRef,
    running_mean: BlobRef,
    running_var: BlobRef,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BnBankEntry {
    label: usize,
    overrides: Vec<BnOverrideEntry>,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
enum ManifoldFile {
    Pca {
        latent_dim: usize,
        data_shape: Vec<usize>,
        valid_range: (f32, f32),
        classes: Vec<PcaClassEntry>,
    },
    DecoderNet {
        latent_dim: usize,
        data_shape: Vec<usize>,
        valid_range: (f32, f32),
        decoder: String,
        encoder: Option<String>,
        #[serde(default)]
        search: SearchBudget,
        bn_banks: Vec<BnBankEntry>,
    },
}

fn f64_tensor(v: &[f64], shape: Vec<usize>) -> Result<Tensor> {
    Tensor::new(shape, v.iter().map(|&x| x as f32).collect())
}

impl ManifoldModel {
    /// Saves the manifold into `dir` as `manifold.json` plus blobs (and,
    /// for decoder manifolds, nested model directories). Returns the
    /// manifold JSON path.
    pub fn save(&self, dir: &Path) -> Result<PathBuf> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let file = match &self.kind {
            ManifoldKind::Pca { banks } => {
                let mut classes = Vec::with_capacity(banks.len());
                for bank in banks {
                    let d = bank.mean.len();
                    let mean_t = f64_tensor(&bank.mean, vec![d])?;
                    let comp_t = f64_tensor(&bank.components, vec![self.latent_dim, d])?;
                    classes.push(PcaClassEntry {
                        label: bank.label,
                        mean: write_blob(dir, &format!("class{}_mean.bin", bank.label), &mean_t)?,
                        components: write_blob(
                            dir,
                            &format!("class{}_components.bin", bank.label),
                            &comp_t,
                        )?,
                    });
                }
                ManifoldFile::Pca {
                    latent_dim: self.latent_dim,
                    data_shape: self.data_shape.clone(),
                    valid_range: self.valid_range,
                    classes,
                }
            }
            ManifoldKind::DecoderNet { decoder, banks, encoder, search, .. } => {
                save_model(decoder, &dir.join("decoder"))?;
                let encoder_rel = match encoder {
                    Some(enc) => {
                        save_model(enc, &dir.join("encoder"))?;
                        Some("encoder/manifest.json".to_string())
                    }
                    None => None,
                };
                let mut bank_entries = Vec::with_capacity(banks.len());
                for bank in banks {
                    let mut overrides = Vec::with_capacity(bank.overrides.len());
                    for ov in &bank.overrides {
                        let stem = format!("class{}_bn{}", bank.label, ov.layer);
                        overrides.push(BnOverrideEntry {
                            layer: ov.layer,
                            gamma: write_blob(dir, &format!("{stem}_gamma.bin"), &ov.gamma)?,
                            beta: write_blob(dir, &format!("{stem}_beta.bin"), &ov.beta)?,
                            running_mean: write_blob(
                                dir,
                                &format!("{stem}_running_mean.bin"),
                                &ov.running_mean,
                            )?,
                            running_var: write_blob(
                                dir,
                                &format!("{stem}_running_var.bin"),
                                &ov.running_var,
                            )?,
                        });
                    }
                    bank_entries.push(BnBankEntry { label: bank.label, overrides });
                }
                ManifoldFile::DecoderNet {
                    latent_dim: self.latent_dim,
                    data_shape: self.data_shape.clone(),
                    valid_range: self.valid_range,
                    decoder: "decoder/manifest.json".to_string(),
                    encoder: encoder_rel,
                    search: *search,
                    bn_banks: bank_entries,
                }
            }
        };
        let path = dir.join("manifold.json");
        write_json(&path, &file)?;
        Ok(path)
    }

    /// Loads a manifold from its JSON path. PCA charts are checked for
    /// row orthonormality (within serialization rounding) as a corruption
    /// guard.
    pub fn load(path: &Path) -> Result<ManifoldModel> {
        let file: ManifoldFile = read_json(path)?;
        let dir = path.parent().unwrap_or_else(|| Path::new(".")).to_path_buf();
        match file {
            ManifoldFile::Pca { latent_dim, data_shape, valid_range, classes } => {
                let d: usize = data_shape.iter().product();
                let mut banks = Vec::with_capacity(classes.len());
                for entry in classes {
                    let mean = crate::manifest::read_blob(&dir, &entry.mean)?;
                    let comps = crate::manifest::read_blob(&dir, &entry.components)?;
                    if mean.shape() != [d] || comps.shape() != [latent_dim, d] {
                        return Err(Error::Shape(format!(
                            "class {}: blob shapes {:?}/{:?} do not match latent_dim {latent_dim}, data dim {d}",
                            entry.label,
                            mean.shape(),
                            comps.shape()
                        )));
                    }
                    let components: Vec<f64> = comps.data().iter().map(|&v| v as f64).collect();
                    for i in 0..latent_dim {
                        for j in i..latent_dim {
                            let dot: f64 = (0..d)
                                .map(|k| components[i * d + k] * components[j * d + k])
                                .sum();
                            let expect = if i == j { 1.0 } else { 0.0 };
                            if (dot - expect).abs() > 1e-3 {
                                return Err(Error::format(
                                    path,
                                    format!(
                                        "class {}: components are not orthonormal (rows {i},{j}: {dot})",
                                        entry.label
                                    ),
                                ));
                            }
                        }
                    }
                    banks.push(PcaClassBank {
                        label: entry.label,
                        mean: mean.data().iter().map(|&v| v as f64).collect(),
                        components,
                    });
                }
                ManifoldModel::from_pca_banks(latent_dim, data_shape, valid_range, banks)
            }
            ManifoldFile::DecoderNet {
                latent_dim,
                data_shape,
                valid_range,
                decoder,
                encoder,
                search,
                bn_banks,
            } => {
                let decoder = load_model(&dir.join(decoder))?;
                let encoder = match encoder {
                    Some(rel) => Some(load_model(&dir.join(rel))?),
                    None => None,
                };
                let mut banks = Vec::with_capacity(bn_banks.len());
                for entry in bn_banks {
                    let mut overrides = Vec::with_capacity(entry.overrides.len());
                    for ov in entry.overrides {
                        overrides.push(BnOverride {
                            layer: ov.layer,
                            gamma: crate::manifest::read_blob(&dir, &ov.gamma)?,
                            beta: crate::manifest::read_blob(&dir, &ov.beta)?,
                            running_mean: crate::manifest::read_blob(&dir, &ov.running_mean)?,
                            running_var: crate::manifest::read_blob(&dir, &ov.running_var)?,
                        });
                    }
                    banks.push(BnBank { label: entry.label, overrides });
                }
                ManifoldModel::decoder_net(
                    latent_dim,
                    data_shape,
                    valid_range,
                    decoder,
                    banks,
                    encoder,
                    search,
                )
            }
        }
    }
}
