//! Single-input inference and activation tracing.
//!
//! Inference runs in `f32`. Besides the final output, [`forward_trace`]
//! records one vector of neuron activations per dense/conv layer; those
//! vectors are what the coverage criteria consume.
//!
//! Trace points: the activation of a dense or conv layer is read *after*
//! any batch-norm and relu layers that immediately follow it, i.e. the
//! value actually fed into the next computation stage. A dense layer that
//! is followed directly by softmax (or ends the net) is traced at its raw
//! outputs. Conv activations are reduced to one value per output channel —
//! the mean over the channel's spatial map — so a conv "neuron" is a
//! channel, mirroring how wide conv nets are profiled in practice.

use crate::error::{Error, Result};
use crate::model::{LayerSpec, Model};
use crate::tensor::Tensor;

/// Per-input activation record of every traced layer.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationTrace {
    pub layers: Vec<TraceLayer>,
}

/// Activations of one traced layer: one value per neuron.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceLayer {
    /// Index of the dense/conv layer in `Model::layers`.
    pub model_layer: usize,
    /// One activation per neuron (dense output or conv channel mean).
    pub values: Vec<f32>,
}

impl ActivationTrace {
    /// Neuron count per traced layer.
    pub fn neuron_counts(&self) -> Vec<usize> {
        self.layers.iter().map(|l| l.values.len()).collect()
    }
}

/// Runs the model on one input, returning only the output tensor.
pub fn forward(model: &Model, input: &Tensor) -> Result<Tensor> {
    run(model, input, false).map(|(out, _)| out)
}

/// Runs the model on one input, returning the output and the activation
/// trace of every dense/conv layer.
pub fn forward_trace(model: &Model, input: &Tensor) -> Result<(Tensor, ActivationTrace)> {
    run(model, input, true).map(|(out, trace)| (out, trace.expect("trace requested")))
}

fn run(model: &Model, input: &Tensor, want_trace: bool) -> Result<(Tensor, Option<ActivationTrace>)> {
    if input.shape() != model.input_shape {
        return Err(Error::Shape(format!(
            "input shape {:?} does not match model input {:?}",
            input.shape(),
            model.input_shape
        )));
    }
    if !input.all_finite() {
        return Err(Error::NonFinite("model input contains NaN/Inf".into()));
    }

    // trace_point[j] = list of traced layer indices whose activation is read
    // from the value flowing out of layer j.
    let n = model.layers.len();
    let mut trace_point: Vec<Vec<usize>> = vec![Vec::new(); n];
    if want_trace {
        for (i, layer) in model.layers.iter().enumerate() {
            if !layer.is_traced() {
                continue;
            }
            let mut point = i;
            while point + 1 < n
                && matches!(
                    model.layers[point + 1],
                    LayerSpec::BatchNorm { .. } | LayerSpec::Relu
                )
            {
                point += 1;
            }
            trace_point[point].push(i);
        }
    }

    let mut value = input.clone();
    let mut traced: Vec<TraceLayer> = Vec::new();
    for (j, layer) in model.layers.iter().enumerate() {
        value = apply(layer, &value)?;
        if !value.all_finite() {
            return Err(Error::NonFinite(format!(
                "layer {j} ({}) produced NaN/Inf",
                layer.kind()
            )));
        }
        for &origin in &trace_point[j] {
            traced.push(TraceLayer {
                model_layer: origin,
                values: neuron_values(&model.layers[origin], &value),
            });
        }
    }
    let trace = want_trace.then(|| {
        traced.sort_by_key(|t| t.model_layer);
        ActivationTrace { layers: traced }
    });
    Ok((value, trace))
}

/// Reduces a traced layer's output tensor to per-neuron activations.
fn neuron_values(origin: &LayerSpec, value: &Tensor) -> Vec<f32> {
    match origin {
        LayerSpec::Dense { .. } => value.data().to_vec(),
        LayerSpec::Conv2d { .. } => {
            // One neuron per channel: mean over the spatial map.
            let shape = value.shape();
            let (c, spatial) = (shape[0], shape[1] * shape[2]);
            let data = value.data();
            (0..c)
                .map(|ch| {
                    let sum: f64 = data[ch * spatial..(ch + 1) * spatial]
                        .iter()
                        .map(|v| *v as f64)
                        .sum();
                    (sum / spatial as f64) as f32
                })
                .collect()
        }
        _ => unreachable!("only dense/conv layers are traced"),
    }
}

fn apply(layer: &LayerSpec, input: &Tensor) -> Result<Tensor> {
    match layer {
        LayerSpec::Dense { input: d_in, output, weight, bias } => {
            if input.shape() != [*d_in] {
                return Err(Error::Shape(format!(
                    "dense expects [{d_in}], got {:?}",
                    input.shape()
                )));
            }
            let x = input.data();
            let w = weight.data();
            let b = bias.data();
            let mut out = vec![0.0f32; *output];
            for o in 0..*output {
                let row = &w[o * d_in..(o + 1) * d_in];
                let mut acc = 0.0f32;
                for i in 0..*d_in {
                    acc += row[i] * x[i];
                }
                out[o] = acc + b[o];
            }
            new_raw(vec![*output], out)
        }
        LayerSpec::Conv2d { in_channels, out_channels, kernel, stride, padding, weight, bias } => {
            let out_shape = layer.output_shape(0, input.shape())?;
            let (oc, oh, ow) = (out_shape[0], out_shape[1], out_shape[2]);
            let (ic, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2]);
            debug_assert_eq!(ic, *in_channels);
            debug_assert_eq!(oc, *out_channels);
            let (kh, kw) = *kernel;
            let x = input.data();
            let wt = weight.data();
            let b = bias.data();
            let mut out = vec![0.0f32; oc * oh * ow];
            let pad = *padding as isize;
            for o in 0..oc {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = b[o];
                        let y0 = (oy * stride) as isize - pad;
                        let x0 = (ox * stride) as isize - pad;
                        for c in 0..ic {
                            for ky in 0..kh {
                                let iy = y0 + ky as isize;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                for kx in 0..kw {
                                    let ix = x0 + kx as isize;
                                    if ix < 0 || ix >= w as isize {
                                        continue;
                                    }
                                    let xv = x[(c * h + iy as usize) * w + ix as usize];
                                    let wv = wt[((o * ic + c) * kh + ky) * kw + kx];
                                    acc += xv * wv;
                                }
                            }
                        }
                        out[(o * oh + oy) * ow + ox] = acc;
                    }
                }
            }
            new_raw(out_shape, out)
        }
        LayerSpec::BatchNorm { channels, epsilon, gamma, beta, running_mean, running_var } => {
            let g = gamma.data();
            let bt = beta.data();
            let rm = running_mean.data();
            let rv = running_var.data();
            let shape = input.shape().to_vec();
            let spatial: usize = shape.iter().skip(1).product::<usize>().max(1);
            let per_channel = if shape.len() == 1 { 1 } else { spatial };
            let mut out = input.data().to_vec();
            for (idx, v) in out.iter_mut().enumerate() {
                let c = if shape.len() == 1 { idx } else { idx / per_channel };
                debug_assert!(c < *channels);
                let inv = 1.0 / (rv[c] + epsilon).sqrt();
                *v = (*v - rm[c]) * inv * g[c] + bt[c];
            }
            new_raw(shape, out)
        }
        LayerSpec::Relu => {
            let out = input.data().iter().map(|v| v.max(0.0)).collect();
            new_raw(input.shape().to_vec(), out)
        }
        LayerSpec::Softmax => {
            let out = softmax(input.data());
            new_raw(input.shape().to_vec(), out)
        }
        LayerSpec::Flatten => input.reshaped(vec![input.len()]),
    }
}

/// Numerically stable softmax over a slice.
pub fn softmax(logits: &[f32]) -> Vec<f32> {
    let max = logits.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
    let exps: Vec<f64> = logits.iter().map(|v| ((v - max) as f64).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.iter().map(|e| (e / sum) as f32).collect()
}

/// Internal fast constructor: shape is structurally correct, finiteness is
/// checked by the caller after each layer.
fn new_raw(shape: Vec<usize>, data: Vec<f32>) -> Result<Tensor> {
    Ok(Tensor::new_unchecked(shape, data))
}
