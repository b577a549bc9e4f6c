//! Mini-batch SGD training and finite-difference gradient checking.
//!
//! Training runs in a shadow `f64` engine: parameters are lifted from the
//! `f32` model, updated in double precision, and written back once at the
//! end. That keeps the public model format compact while making gradient
//! checks meaningful (central differences in `f32` drown in rounding noise
//! at usable step sizes).
//!
//! The engine understands the same layers as the inference path. The final
//! softmax is folded into the cross-entropy loss, batch norm uses biased
//! batch statistics in training mode and running statistics in eval mode,
//! and all shuffling comes from a caller-seeded ChaCha stream, so a whole
//! training run is a pure function of `(model, data, hyperparameters)`.

use rand::seq::SliceRandom;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::model::{LayerSpec, Model};
use crate::tensor::Tensor;

/// Momentum used for the running-statistics update of batch norm layers.
const BN_MOMENTUM: f64 = 0.1;

// ---------------------------------------------------------------------------
// Batches
// ---------------------------------------------------------------------------

/// A batch of `n` samples sharing `shape`, stored contiguously in `f64`.
#[derive(Debug, Clone)]
struct Batch {
    n: usize,
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Batch {
    fn sample_size(&self) -> usize {
        self.shape.iter().product()
    }

    fn gather(data: &LabeledDataset, indices: &[usize]) -> Batch {
        let shape = data.input_shape().expect("non-empty dataset").to_vec();
        let per = shape.iter().product::<usize>();
        let mut buf = Vec::with_capacity(indices.len() * per);
        for &i in indices {
            buf.extend(data.inputs[i].data().iter().map(|&v| v as f64));
        }
        Batch { n: indices.len(), shape, data: buf }
    }

    fn zeros_like(other: &Batch) -> Batch {
        Batch { n: other.n, shape: other.shape.clone(), data: vec![0.0; other.data.len()] }
    }
}

// ---------------------------------------------------------------------------
// Engine
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
enum Node {
    Dense {
        input: usize,
        output: usize,
        w: Vec<f64>,
        b: Vec<f64>,
    },
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: (usize, usize),
        stride: usize,
        padding: usize,
        w: Vec<f64>,
        b: Vec<f64>,
    },
    BatchNorm {
        channels: usize,
        eps: f64,
        gamma: Vec<f64>,
        beta: Vec<f64>,
        run_mean: Vec<f64>,
        run_var: Vec<f64>,
    },
    Relu,
    Flatten,
}

#[derive(Debug)]
enum Cache {
    Dense { x: Batch },
    Conv2d { x: Batch, out_shape: Vec<usize> },
    BatchNorm { xhat: Vec<f64>, inv_std: Vec<f64>, train: bool },
    Relu { mask: Vec<bool> },
    Flatten { in_shape: Vec<usize> },
}

#[derive(Debug)]
enum NodeGrads {
    None,
    WB { dw: Vec<f64>, db: Vec<f64> },
    GB { dgamma: Vec<f64>, dbeta: Vec<f64> },
}

/// The `f64` twin of a classifier model, stripped of its final softmax.
#[derive(Debug, Clone)]
struct Net {
    nodes: Vec<Node>,
    /// Index of the originating layer in the source model, per node.
    layer_map: Vec<usize>,
}

fn lift(t: &Tensor) -> Vec<f64> {
    t.data().iter().map(|&v| v as f64).collect()
}

fn lower(v: &[f64], shape: Vec<usize>) -> Result<Tensor> {
    let data: Vec<f32> = v.iter().map(|&x| x as f32).collect();
    Tensor::new(shape, data)
}

impl Net {
    fn from_model(model: &Model) -> Result<Net> {
        model.validate()?;
        if !model.is_classifier() {
            return Err(Error::InvalidArgument(
                "training requires a classifier (final softmax layer)".into(),
            ));
        }
        let mut nodes = Vec::new();
        let mut layer_map = Vec::new();
        for (i, layer) in model.layers.iter().enumerate() {
            let node = match layer {
                LayerSpec::Dense { input, output, weight, bias } => Node::Dense {
                    input: *input,
                    output: *output,
                    w: lift(weight),
                    b: lift(bias),
                },
                LayerSpec::Conv2d {
                    in_channels,
                    out_channels,
                    kernel,
                    stride,
                    padding,
                    weight,
                    bias,
                } => Node::Conv2d {
                    in_channels: *in_channels,
                    out_channels: *out_channels,
                    kernel: *kernel,
                    stride: *stride,
                    padding: *padding,
                    w: lift(weight),
                    b: lift(bias),
                },
                LayerSpec::BatchNorm { channels, epsilon, gamma, beta, running_mean, running_var } => {
                    Node::BatchNorm {
                        channels: *channels,
                        eps: *epsilon as f64,
                        gamma: lift(gamma),
                        beta: lift(beta),
                        run_mean: lift(running_mean),
                        run_var: lift(running_var),
                    }
                }
                LayerSpec::Relu => Node::Relu,
                LayerSpec::Flatten => Node::Flatten,
                LayerSpec::Softmax => continue, // folded into the loss
            };
            nodes.push(node);
            layer_map.push(i);
        }
        Ok(Net { nodes, layer_map })
    }

    /// Writes the (possibly updated) parameters back into a copy of the
    /// source model.
    fn to_model(&self, template: &Model) -> Result<Model> {
        let mut layers = template.layers.clone();
        for (node, &li) in self.nodes.iter().zip(&self.layer_map) {
            match (node, &mut layers[li]) {
                (Node::Dense { w, b, input, output }, LayerSpec::Dense { weight, bias, .. }) => {
                    *weight = lower(w, vec![*output, *input])?;
                    *bias = lower(b, vec![*output])?;
                }
                (
                    Node::Conv2d { w, b, in_channels, out_channels, kernel, .. },
                    LayerSpec::Conv2d { weight, bias, .. },
                ) => {
                    *weight = lower(w, vec![*out_channels, *in_channels, kernel.0, kernel.1])?;
                    *bias = lower(b, vec![*out_channels])?;
                }
                (
                    Node::BatchNorm { gamma, beta, run_mean, run_var, channels, .. },
                    LayerSpec::BatchNorm {
                        gamma: g, beta: bt, running_mean: rm, running_var: rv, ..
                    },
                ) => {
                    *g = lower(gamma, vec![*channels])?;
                    *bt = lower(beta, vec![*channels])?;
                    *rm = lower(run_mean, vec![*channels])?;
                    *rv = lower(run_var, vec![*channels])?;
                }
                (Node::Relu, LayerSpec::Relu) | (Node::Flatten, LayerSpec::Flatten) => {}
                _ => unreachable!("node/layer mapping out of sync"),
            }
        }
        Model::new(template.input_shape.clone(), layers, template.class_labels.clone())
    }

    /// Forward pass over a batch, producing logits and per-node caches.
    /// `train` selects batch statistics for batch norm; `update_running`
    /// additionally folds them into the running statistics.
    fn forward(&mut self, x: &Batch, train: bool, update_running: bool) -> (Batch, Vec<Cache>) {
        let mut value = x.clone();
        let mut caches = Vec::with_capacity(self.nodes.len());
        for node in &mut self.nodes {
            let (next, cache) = node.forward(&value, train, update_running);
            caches.push(cache);
            value = next;
        }
        (value, caches)
    }

    /// Backward pass; returns parameter gradients (per node) and the
    /// gradient with respect to the input batch.
    fn backward(&self, caches: &[Cache], dout: Batch) -> (Vec<NodeGrads>, Batch) {
        let mut grads: Vec<NodeGrads> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || NodeGrads::None);
        let mut d = dout;
        for (i, node) in self.nodes.iter().enumerate().rev() {
            let (g, dx) = node.backward(&caches[i], d);
            grads[i] = g;
            d = dx;
        }
        (grads, d)
    }

    fn apply_sgd(&mut self, grads: &[NodeGrads], lr: f64) {
        for (node, g) in self.nodes.iter_mut().zip(grads) {
            match (node, g) {
                (Node::Dense { w, b, .. }, NodeGrads::WB { dw, db })
                | (Node::Conv2d { w, b, .. }, NodeGrads::WB { dw, db }) => {
                    for (p, d) in w.iter_mut().zip(dw) {
                        *p -= lr * d;
                    }
                    for (p, d) in b.iter_mut().zip(db) {
                        *p -= lr * d;
                    }
                }
                (Node::BatchNorm { gamma, beta, .. }, NodeGrads::GB { dgamma, dbeta }) => {
                    for (p, d) in gamma.iter_mut().zip(dgamma) {
                        *p -= lr * d;
                    }
                    for (p, d) in beta.iter_mut().zip(dbeta) {
                        *p -= lr * d;
                    }
                }
                _ => {}
            }
        }
    }

    /// Total number of trainable scalars (weights, biases, gamma, beta).
    fn param_len(&self) -> usize {
        self.nodes
            .iter()
            .map(|n| match n {
                Node::Dense { w, b, .. } | Node::Conv2d { w, b, .. } => w.len() + b.len(),
                Node::BatchNorm { gamma, beta, .. } => gamma.len() + beta.len(),
                _ => 0,
            })
            .sum()
    }

    /// Adds `delta` to the trainable parameter with flat index `i`.
    fn param_add(&mut self, mut i: usize, delta: f64) {
        for node in &mut self.nodes {
            let slices: [&mut [f64]; 2] = match node {
                Node::Dense { w, b, .. } | Node::Conv2d { w, b, .. } => [w, b],
                Node::BatchNorm { gamma, beta, .. } => [gamma, beta],
                _ => continue,
            };
            for s in slices {
                if i < s.len() {
                    s[i] += delta;
                    return;
                }
                i -= s.len();
            }
        }
        panic!("parameter index out of range");
    }

    /// Flattens per-node gradients in the same order as [`Self::param_add`].
    fn grads_flat(&self, grads: &[NodeGrads]) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_len());
        for g in grads {
            match g {
                NodeGrads::WB { dw, db } => {
                    out.extend_from_slice(dw);
                    out.extend_from_slice(db);
                }
                NodeGrads::GB { dgamma, dbeta } => {
                    out.extend_from_slice(dgamma);
                    out.extend_from_slice(dbeta);
                }
                NodeGrads::None => {}
            }
        }
        out
    }
}

impl Node {
    fn forward(&mut self, x: &Batch, train: bool, update_running: bool) -> (Batch, Cache) {
        match self {
            Node::Dense { input, output, w, b } => {
                let n = x.n;
                debug_assert_eq!(x.sample_size(), *input);
                let mut out = vec![0.0; n * *output];
                for s in 0..n {
                    let xs = &x.data[s * *input..(s + 1) * *input];
                    for o in 0..*output {
                        let row = &w[o * *input..(o + 1) * *input];
                        let mut acc = 0.0;
                        for i in 0..*input {
                            acc += row[i] * xs[i];
                        }
                        out[s * *output + o] = acc + b[o];
                    }
                }
                (
                    Batch { n, shape: vec![*output], data: out },
                    Cache::Dense { x: x.clone() },
                )
            }
            Node::Conv2d { in_channels, out_channels, kernel, stride, padding, w, b } => {
                let (ic, h, wd) = (x.shape[0], x.shape[1], x.shape[2]);
                debug_assert_eq!(ic, *in_channels);
                let (kh, kw) = *kernel;
                let (s, p) = (*stride, *padding as isize);
                let oh = (h + 2 * *padding - kh) / s + 1;
                let ow = (wd + 2 * *padding - kw) / s + 1;
                let oc = *out_channels;
                let mut out = vec![0.0; x.n * oc * oh * ow];
                let in_sz = ic * h * wd;
                let out_sz = oc * oh * ow;
                for smp in 0..x.n {
                    let xs = &x.data[smp * in_sz..(smp + 1) * in_sz];
                    let os = &mut out[smp * out_sz..(smp + 1) * out_sz];
                    for o in 0..oc {
                        for oy in 0..oh {
                            for ox in 0..ow {
                                let mut acc = b[o];
                                let y0 = (oy * s) as isize - p;
                                let x0 = (ox * s) as isize - p;
                                for c in 0..ic {
                                    for ky in 0..kh {
                                        let iy = y0 + ky as isize;
                                        if iy < 0 || iy >= h as isize {
                                            continue;
                                        }
                                        for kx in 0..kw {
                                            let ixp = x0 + kx as isize;
                                            if ixp < 0 || ixp >= wd as isize {
                                                continue;
                                            }
                                            acc += xs[(c * h + iy as usize) * wd + ixp as usize]
                                                * w[((o * ic + c) * kh + ky) * kw + kx];
                                        }
                                    }
                                }
                                os[(o * oh + oy) * ow + ox] = acc;
                            }
                        }
                    }
                }
                let out_shape = vec![oc, oh, ow];
                (
                    Batch { n: x.n, shape: out_shape.clone(), data: out },
                    Cache::Conv2d { x: x.clone(), out_shape },
                )
            }
            Node::BatchNorm { channels, eps, gamma, beta, run_mean, run_var } => {
                let c_count = *channels;
                let per = x.sample_size();
                let spatial = per / c_count;
                let m = (x.n * spatial) as f64;
                let channel_of = |idx_in_sample: usize| idx_in_sample / spatial;

                let (mean, var): (Vec<f64>, Vec<f64>) = if train {
                    let mut mean = vec![0.0; c_count];
                    for (i, v) in x.data.iter().enumerate() {
                        mean[channel_of(i % per)] += v;
                    }
                    for mv in &mut mean {
                        *mv /= m;
                    }
                    let mut var = vec![0.0; c_count];
                    for (i, v) in x.data.iter().enumerate() {
                        let c = channel_of(i % per);
                        var[c] += (v - mean[c]).powi(2);
                    }
                    for vv in &mut var {
                        *vv /= m;
                    }
                    if update_running {
                        for c in 0..c_count {
                            run_mean[c] = (1.0 - BN_MOMENTUM) * run_mean[c] + BN_MOMENTUM * mean[c];
                            run_var[c] = (1.0 - BN_MOMENTUM) * run_var[c] + BN_MOMENTUM * var[c];
                        }
                    }
                    (mean, var)
                } else {
                    (run_mean.clone(), run_var.clone())
                };

                let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + *eps).sqrt()).collect();
                let mut xhat = vec![0.0; x.data.len()];
                let mut out = vec![0.0; x.data.len()];
                for (i, v) in x.data.iter().enumerate() {
                    let c = channel_of(i % per);
                    let xh = (v - mean[c]) * inv_std[c];
                    xhat[i] = xh;
                    out[i] = gamma[c] * xh + beta[c];
                }
                (
                    Batch { n: x.n, shape: x.shape.clone(), data: out },
                    Cache::BatchNorm { xhat, inv_std, train },
                )
            }
            Node::Relu => {
                let mask: Vec<bool> = x.data.iter().map(|&v| v > 0.0).collect();
                let data = x.data.iter().map(|&v| v.max(0.0)).collect();
                (
                    Batch { n: x.n, shape: x.shape.clone(), data },
                    Cache::Relu { mask },
                )
            }
            Node::Flatten => {
                let flat = x.sample_size();
                (
                    Batch { n: x.n, shape: vec![flat], data: x.data.clone() },
                    Cache::Flatten { in_shape: x.shape.clone() },
                )
            }
        }
    }

    fn backward(&self, cache: &Cache, dy: Batch) -> (NodeGrads, Batch) {
        match (self, cache) {
            (Node::Dense { input, output, w, .. }, Cache::Dense { x }) => {
                let n = dy.n;
                let mut dw = vec![0.0; w.len()];
                let mut db = vec![0.0; *output];
                let mut dx = Batch::zeros_like(x);
                for s in 0..n {
                    let xs = &x.data[s * *input..(s + 1) * *input];
                    let dys = &dy.data[s * *output..(s + 1) * *output];
                    let dxs = &mut dx.data[s * *input..(s + 1) * *input];
                    for o in 0..*output {
                        let g = dys[o];
                        db[o] += g;
                        let wrow = &w[o * *input..(o + 1) * *input];
                        let dwrow = &mut dw[o * *input..(o + 1) * *input];
                        for i in 0..*input {
                            dwrow[i] += g * xs[i];
                            dxs[i] += g * wrow[i];
                        }
                    }
                }
                (NodeGrads::WB { dw, db }, dx)
            }
            (
                Node::Conv2d { in_channels, out_channels, kernel, stride, padding, w, .. },
                Cache::Conv2d { x, out_shape },
            ) => {
                let (ic, h, wd) = (x.shape[0], x.shape[1], x.shape[2]);
                let (kh, kw) = *kernel;
                let (s, p) = (*stride, *padding as isize);
                let (oc, oh, ow) = (out_shape[0], out_shape[1], out_shape[2]);
                debug_assert_eq!(oc, *out_channels);
                debug_assert_eq!(ic, *in_channels);
                let in_sz = ic * h * wd;
                let out_sz = oc * oh * ow;
                let mut dw = vec![0.0; w.len()];
                let mut db = vec![0.0; oc];
                let mut dx = Batch::zeros_like(x);
                for smp in 0..x.n {
                    let xs = &x.data[smp * in_sz..(smp + 1) * in_sz];
                    let dys = &dy.data[smp * out_sz..(smp + 1) * out_sz];
                    let dxs = &mut dx.data[smp * in_sz..(smp + 1) * in_sz];
                    for o in 0..oc {
                        for oy in 0..oh {
                            for ox in 0..ow {
                                let g = dys[(o * oh + oy) * ow + ox];
                                if g == 0.0 {
                                    continue;
                                }
                                db[o] += g;
                                let y0 = (oy * s) as isize - p;
                                let x0 = (ox * s) as isize - p;
                                for c in 0..ic {
                                    for ky in 0..kh {
                                        let iy = y0 + ky as isize;
                                        if iy < 0 || iy >= h as isize {
                                            continue;
                                        }
                                        for kx in 0..kw {
                                            let ixp = x0 + kx as isize;
                                            if ixp < 0 || ixp >= wd as isize {
                                                continue;
                                            }
                                            let xi = (c * h + iy as usize) * wd + ixp as usize;
                                            let wi = ((o * ic + c) * kh + ky) * kw + kx;
                                            dw[wi] += g * xs[xi];
                                            dxs[xi] += g * w[wi];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                (NodeGrads::WB { dw, db }, dx)
            }
            (
                Node::BatchNorm { channels, gamma, .. },
                Cache::BatchNorm { xhat, inv_std, train },
            ) => {
                let c_count = *channels;
                let per = dy.sample_size();
                let spatial = per / c_count;
                let m = (dy.n * spatial) as f64;
                let channel_of = |idx_in_sample: usize| idx_in_sample / spatial;

                let mut dgamma = vec![0.0; c_count];
                let mut dbeta = vec![0.0; c_count];
                for (i, g) in dy.data.iter().enumerate() {
                    let c = channel_of(i % per);
                    dgamma[c] += g * xhat[i];
                    dbeta[c] += g;
                }

                let mut dx = Batch::zeros_like(&dy);
                if *train {
                    // Batch statistics depend on x, so the gradient couples
                    // all positions in a channel:
                    // dx = inv_std/m * (m*dxhat - sum(dxhat) - xhat * sum(dxhat*xhat))
                    let mut sum_dxhat = vec![0.0; c_count];
                    let mut sum_dxhat_xhat = vec![0.0; c_count];
                    for (i, g) in dy.data.iter().enumerate() {
                        let c = channel_of(i % per);
                        let dxh = g * gamma[c];
                        sum_dxhat[c] += dxh;
                        sum_dxhat_xhat[c] += dxh * xhat[i];
                    }
                    for (i, g) in dy.data.iter().enumerate() {
                        let c = channel_of(i % per);
                        let dxh = g * gamma[c];
                        dx.data[i] = inv_std[c] / m
                            * (m * dxh - sum_dxhat[c] - xhat[i] * sum_dxhat_xhat[c]);
                    }
                } else {
                    // Running statistics are constants: a pure affine map.
                    for (i, g) in dy.data.iter().enumerate() {
                        let c = channel_of(i % per);
                        dx.data[i] = g * gamma[c] * inv_std[c];
                    }
                }
                (NodeGrads::GB { dgamma, dbeta }, dx)
            }
            (Node::Relu, Cache::Relu { mask }) => {
                let mut dx = dy;
                for (v, &keep) in dx.data.iter_mut().zip(mask) {
                    if !keep {
                        *v = 0.0;
                    }
                }
                (NodeGrads::None, dx)
            }
            (Node::Flatten, Cache::Flatten { in_shape }) => {
                let dx = Batch { n: dy.n, shape: in_shape.clone(), data: dy.data };
                (NodeGrads::None, dx)
            }
            _ => unreachable!("cache/node mismatch"),
        }
    }
}

/// Softmax + cross-entropy over a batch of logits. Returns the mean loss
/// and the gradient with respect to the logits.
fn loss_and_dlogits(logits: &Batch, labels: &[usize]) -> (f64, Batch) {
    let k = logits.sample_size();
    let n = logits.n;
    debug_assert_eq!(labels.len(), n);
    let mut loss = 0.0;
    let mut dz = Batch::zeros_like(logits);
    for s in 0..n {
        let z = &logits.data[s * k..(s + 1) * k];
        let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = z.iter().map(|v| (v - max).exp()).collect();
        let sum: f64 = exps.iter().sum();
        let y = labels[s];
        loss += -(exps[y] / sum).ln();
        for c in 0..k {
            let p = exps[c] / sum;
            dz.data[s * k + c] = (p - if c == y { 1.0 } else { 0.0 }) / n as f64;
        }
    }
    (loss / n as f64, dz)
}

fn validate_training_inputs(model: &Model, data: &LabeledDataset) -> Result<usize> {
    let out = model.validate()?;
    if !model.is_classifier() {
        return Err(Error::InvalidArgument(
            "training requires a classifier (final softmax layer)".into(),
        ));
    }
    if data.is_empty() {
        return Err(Error::InvalidArgument("training dataset is empty".into()));
    }
    let shape = data.input_shape().expect("non-empty");
    if shape != model.input_shape.as_slice() {
        return Err(Error::Shape(format!(
            "dataset inputs {shape:?} do not match model input {:?}",
            model.input_shape
        )));
    }
    let classes = out[0];
    if let Some(&bad) = data.labels.iter().find(|&&l| l >= classes) {
        return Err(Error::InvalidArgument(format!(
            "label {bad} exceeds model output dimension {classes}"
        )));
    }
    Ok(classes)
}

/// Trains a classifier with plain mini-batch SGD.
///
/// Returns the trained model and the per-epoch mean training loss. The run
/// is deterministic in `seed`. `lr == 0` performs no update at all — the
/// returned model is identical to the input (running statistics included) —
/// but still reports the loss curve.
pub fn train_sgd(
    model: &Model,
    data: &LabeledDataset,
    lr: f64,
    epochs: usize,
    batch_size: usize,
    seed: u64,
) -> Result<(Model, Vec<f64>)> {
    validate_training_inputs(model, data)?;
    if !lr.is_finite() || lr < 0.0 {
        return Err(Error::InvalidArgument(format!("learning rate {lr} must be finite and >= 0")));
    }
    if batch_size == 0 {
        return Err(Error::InvalidArgument("batch_size must be positive".into()));
    }
    let mut net = Net::from_model(model)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut curve = Vec::with_capacity(epochs);
    let update = lr > 0.0;
    for _ in 0..epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(batch_size) {
            let x = Batch::gather(data, chunk);
            let labels: Vec<usize> = chunk.iter().map(|&i| data.labels[i]).collect();
            let (logits, caches) = net.forward(&x, true, update);
            let (loss, dz) = loss_and_dlogits(&logits, &labels);
            if !loss.is_finite() {
                return Err(Error::NonFinite("training loss diverged".into()));
            }
            total += loss * chunk.len() as f64;
            if update {
                let (grads, _) = net.backward(&caches, dz);
                net.apply_sgd(&grads, lr);
            }
        }
        curve.push(total / data.len() as f64);
    }
    let trained = if update { net.to_model(model)? } else { model.clone() };
    Ok((trained, curve))
}

/// Compares analytic gradients against central finite differences for one
/// `(input, label)` pair and returns the worst relative error
/// `|g_a - g_fd| / max(1e-8, |g_a| + |g_fd|)` over every trainable
/// parameter (weights, biases, batch-norm gamma/beta).
///
/// Batch norm runs in eval mode here: with a single sample, batch
/// statistics would collapse the output to beta and make the check vacuous.
pub fn grad_check(model: &Model, input: &Tensor, label: usize, eps: f64) -> Result<f64> {
    let classes = {
        let out = model.validate()?;
        if !model.is_classifier() {
            return Err(Error::InvalidArgument(
                "gradient check requires a classifier".into(),
            ));
        }
        out[0]
    };
    if label >= classes {
        return Err(Error::InvalidArgument(format!(
            "label {label} exceeds output dimension {classes}"
        )));
    }
    if !(eps > 0.0 && eps <= 1e-2) {
        return Err(Error::InvalidArgument(format!("eps {eps} must be in (0, 1e-2]")));
    }
    if input.shape() != model.input_shape {
        return Err(Error::Shape(format!(
            "input shape {:?} does not match model input {:?}",
            input.shape(),
            model.input_shape
        )));
    }

    let mut net = Net::from_model(model)?;
    let x = Batch {
        n: 1,
        shape: input.shape().to_vec(),
        data: input.data().iter().map(|&v| v as f64).collect(),
    };
    let labels = [label];

    let eval_loss = |net: &mut Net| -> f64 {
        let (logits, _) = net.forward(&x, false, false);
        loss_and_dlogits(&logits, &labels).0
    };

    let (logits, caches) = net.forward(&x, false, false);
    let (_, dz) = loss_and_dlogits(&logits, &labels);
    let (grads, _) = net.backward(&caches, dz);
    let analytic = net.grads_flat(&grads);
    debug_assert_eq!(analytic.len(), net.param_len());

    let mut worst = 0.0f64;
    for i in 0..analytic.len() {
        net.param_add(i, eps);
        let plus = eval_loss(&mut net);
        net.param_add(i, -2.0 * eps);
        let minus = eval_loss(&mut net);
        net.param_add(i, eps);
        let fd = (plus - minus) / (2.0 * eps);
        let ga = analytic[i];
        if !fd.is_finite() || !ga.is_finite() {
            return Err(Error::NonFinite(format!("gradient at parameter {i}")));
        }
        let rel = (ga - fd).abs() / (1e-8f64).max(ga.abs() + fd.abs());
        worst = worst.max(rel);
    }
    Ok(worst)
}
