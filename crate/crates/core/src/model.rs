//! Network description: layers, shape checking, and small builders.
//!
//! A [`Model`] is a flat sequence of layers applied in order to a single
//! input tensor. Only the handful of layer kinds needed for small image
//! classifiers is supported; shapes are validated eagerly so that inference
//! code can index without checks.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

/// One layer of a feed-forward network.
///
/// Weight layouts:
/// * `Dense`: `weight` is `[output, input]`, `bias` is `[output]`.
/// * `Conv2d`: `weight` is `[out_channels, in_channels, kh, kw]`,
///   `bias` is `[out_channels]`; inputs are `[channels, height, width]`.
/// * `BatchNorm`: all four parameter tensors are `[channels]`; in a rank-3
///   input the leading axis is the channel axis, in a rank-1 input every
///   element is its own channel.
#[derive(Debug, Clone, PartialEq)]
pub enum LayerSpec {
    Dense {
        input: usize,
        output: usize,
        weight: Tensor,
        bias: Tensor,
    },
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: (usize, usize),
        stride: usize,
        padding: usize,
        weight: Tensor,
        bias: Tensor,
    },
    BatchNorm {
        channels: usize,
        epsilon: f32,
        gamma: Tensor,
        beta: Tensor,
        running_mean: Tensor,
        running_var: Tensor,
    },
    Relu,
    Softmax,
    Flatten,
}

impl LayerSpec {
    /// Short lowercase name used in diagnostics and manifests.
    pub fn kind(&self) -> &'static str {
        match self {
            LayerSpec::Dense { .. } => "dense",
            LayerSpec::Conv2d { .. } => "conv2d",
            LayerSpec::BatchNorm { .. } => "batch_norm",
            LayerSpec::Relu => "relu",
            LayerSpec::Softmax => "softmax",
            LayerSpec::Flatten => "flatten",
        }
    }

    /// True for layers whose outputs define coverage-tracked neurons.
    pub fn is_traced(&self) -> bool {
        matches!(self, LayerSpec::Dense { .. } | LayerSpec::Conv2d { .. })
    }

    fn validate_params(&self, index: usize) -> Result<()> {
        let fail = |msg: String| Err(Error::Shape(format!("layer {index}: {msg}")));
        match self {
            LayerSpec::Dense { input, output, weight, bias } => {
                if *input == 0 || *output == 0 {
                    return fail("dense dimensions must be positive".into());
                }
                if weight.shape() != [*output, *input] {
                    return fail(format!(
                        "dense weight shape {:?}, expected [{output}, {input}]",
                        weight.shape()
                    ));
                }
                if bias.shape() != [*output] {
                    return fail(format!("dense bias shape {:?}, expected [{output}]", bias.shape()));
                }
            }
            LayerSpec::Conv2d { in_channels, out_channels, kernel, stride, weight, bias, .. } => {
                if *in_channels == 0 || *out_channels == 0 || kernel.0 == 0 || kernel.1 == 0 {
                    return fail("conv2d dimensions must be positive".into());
                }
                if *stride == 0 {
                    return fail("conv2d stride must be positive".into());
                }
                if weight.shape() != [*out_channels, *in_channels, kernel.0, kernel.1] {
                    return fail(format!(
                        "conv2d weight shape {:?}, expected [{out_channels}, {in_channels}, {}, {}]",
                        weight.shape(),
                        kernel.0,
                        kernel.1
                    ));
                }
                if bias.shape() != [*out_channels] {
                    return fail(format!(
                        "conv2d bias shape {:?}, expected [{out_channels}]",
                        bias.shape()
                    ));
                }
            }
            LayerSpec::BatchNorm { channels, epsilon, gamma, beta, running_mean, running_var } => {
                if *channels == 0 {
                    return fail("batch_norm channels must be positive".into());
                }
                if !epsilon.is_finite() || *epsilon < 0.0 {
                    return fail(format!("batch_norm epsilon {epsilon} must be finite and >= 0"));
                }
                for (name, t) in [
                    ("gamma", gamma),
                    ("beta", beta),
                    ("running_mean", running_mean),
                    ("running_var", running_var),
                ] {
                    if t.shape() != [*channels] {
                        return fail(format!(
                            "batch_norm {name} shape {:?}, expected [{channels}]",
                            t.shape()
                        ));
                    }
                }
                if running_var.data().iter().any(|v| *v < 0.0) {
                    return fail("batch_norm running_var must be non-negative".into());
                }
            }
            LayerSpec::Relu | LayerSpec::Softmax | LayerSpec::Flatten => {}
        }
        Ok(())
    }

    /// Output shape of this layer given `input` shape, or a shape error.
    pub fn output_shape(&self, index: usize, input: &[usize]) -> Result<Vec<usize>> {
        let fail = |msg: String| {
            Err(Error::Shape(format!("layer {index} ({}): {msg}", self.kind())))
        };
        match self {
            LayerSpec::Dense { input: d_in, output, .. } => {
                if input != [*d_in] {
                    return fail(format!("expects input [{d_in}], got {input:?}"));
                }
                Ok(vec![*output])
            }
            LayerSpec::Conv2d { in_channels, out_channels, kernel, stride, padding, .. } => {
                let [c, h, w] = match input {
                    [c, h, w] => [*c, *h, *w],
                    _ => return fail(format!("expects rank-3 input, got {input:?}")),
                };
                if c != *in_channels {
                    return fail(format!("expects {in_channels} input channels, got {c}"));
                }
                let (kh, kw) = *kernel;
                let h_pad = h + 2 * padding;
                let w_pad = w + 2 * padding;
                if h_pad < kh || w_pad < kw {
                    return fail(format!(
                        "kernel {kh}x{kw} larger than padded input {h_pad}x{w_pad}"
                    ));
                }
                let oh = (h_pad - kh) / stride + 1;
                let ow = (w_pad - kw) / stride + 1;
                Ok(vec![*out_channels, oh, ow])
            }
            LayerSpec::BatchNorm { channels, .. } => {
                let c = match input {
                    [c] => *c,
                    [c, _, _] => *c,
                    _ => return fail(format!("expects rank-1 or rank-3 input, got {input:?}")),
                };
                if c != *channels {
                    return fail(format!("expects {channels} channels, got {c}"));
                }
                Ok(input.to_vec())
            }
            LayerSpec::Relu => Ok(input.to_vec()),
            LayerSpec::Softmax => {
                if input.len() != 1 {
                    return fail(format!("expects rank-1 input, got {input:?}"));
                }
                Ok(input.to_vec())
            }
            LayerSpec::Flatten => Ok(vec![input.iter().product()]),
        }
    }
}

/// A validated feed-forward network.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub input_shape: Vec<usize>,
    pub layers: Vec<LayerSpec>,
    /// Human-readable class names; for classifiers its length equals the
    /// output dimension. May be empty for non-classifier nets (decoders).
    pub class_labels: Vec<String>,
}

impl Model {
    /// Builds a model and validates that all layer shapes compose.
    pub fn new(
        input_shape: Vec<usize>,
        layers: Vec<LayerSpec>,
        class_labels: Vec<String>,
    ) -> Result<Self> {
        let model = Model { input_shape, layers, class_labels };
        model.validate()?;
        Ok(model)
    }

    /// Checks parameter shapes and layer composition; returns the output
    /// shape on success.
    pub fn validate(&self) -> Result<Vec<usize>> {
        if self.input_shape.is_empty() || self.input_shape.iter().any(|d| *d == 0) {
            return Err(Error::Shape(format!(
                "input shape {:?} must be non-empty with positive dims",
                self.input_shape
            )));
        }
        if self.layers.is_empty() {
            return Err(Error::Shape("model has no layers".into()));
        }
        let mut shape = self.input_shape.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            layer.validate_params(i)?;
            if matches!(layer, LayerSpec::Softmax) && i + 1 != self.layers.len() {
                return Err(Error::Shape(format!(
                    "layer {i}: softmax is only supported as the final layer"
                )));
            }
            shape = layer.output_shape(i, &shape)?;
        }
        if self.is_classifier() && !self.class_labels.is_empty() && self.class_labels.len() != shape[0]
        {
            return Err(Error::Shape(format!(
                "{} class labels for output dimension {}",
                self.class_labels.len(),
                shape[0]
            )));
        }
        Ok(shape)
    }

    /// Output shape after the final layer.
    pub fn output_shape(&self) -> Result<Vec<usize>> {
        self.validate()
    }

    /// True when the final layer is a softmax.
    pub fn is_classifier(&self) -> bool {
        matches!(self.layers.last(), Some(LayerSpec::Softmax))
    }

    /// Indices of the layers whose outputs are coverage-tracked.
    pub fn traced_layers(&self) -> Vec<usize> {
        self.layers
            .iter()
            .enumerate()
            .filter(|(_, l)| l.is_traced())
            .map(|(i, _)| i)
            .collect()
    }

    /// Number of tracked neurons per traced layer: the output width of a
    /// dense layer, the output channel count of a convolution.
    pub fn neuron_counts(&self) -> Vec<usize> {
        self.layers
            .iter()
            .filter_map(|l| match l {
                LayerSpec::Dense { output, .. } => Some(*output),
                LayerSpec::Conv2d { out_channels, .. } => Some(*out_channels),
                _ => None,
            })
            .collect()
    }
}

/// Builds a softmax MLP classifier with the given hidden widths.
///
/// Architecture: `Flatten`, then per hidden width a `Dense` (+ optional
/// `BatchNorm`) + `Relu`, then a final `Dense` to `classes` and `Softmax`.
/// Weights use Kaiming-normal init (`N(0, 2/fan_in)`), biases start at zero;
/// the construction is deterministic in `seed`.
pub fn build_mlp(
    input_shape: &[usize],
    hidden: &[usize],
    classes: usize,
    batch_norm: bool,
    seed: u64,
) -> Result<Model> {
    if classes < 2 {
        return Err(Error::InvalidArgument(format!(
            "classifier needs at least 2 classes, got {classes}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut layers = vec![LayerSpec::Flatten];
    let mut fan_in: usize = input_shape.iter().product();
    if fan_in == 0 {
        return Err(Error::Shape(format!("input shape {input_shape:?} is empty")));
    }
    for &width in hidden {
        layers.push(dense_kaiming(fan_in, width, &mut rng)?);
        if batch_norm {
            layers.push(LayerSpec::BatchNorm {
                channels: width,
                epsilon: 1e-5,
                gamma: Tensor::filled(vec![width], 1.0)?,
                beta: Tensor::zeros(vec![width]),
                running_mean: Tensor::zeros(vec![width]),
                running_var: Tensor::filled(vec![width], 1.0)?,
            });
        }
        layers.push(LayerSpec::Relu);
        fan_in = width;
    }
    layers.push(dense_kaiming(fan_in, classes, &mut rng)?);
    layers.push(LayerSpec::Softmax);
    let labels = (0..classes).map(|c| format!("class_{c}")).collect();
    Model::new(input_shape.to_vec(), layers, labels)
}

fn dense_kaiming(input: usize, output: usize, rng: &mut ChaCha8Rng) -> Result<LayerSpec> {
    let std = (2.0 / input as f64).sqrt();
    let normal = Normal::new(0.0, std).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let weight: Vec<f32> = (0..input * output).map(|_| normal.sample(rng) as f32).collect();
    Ok(LayerSpec::Dense {
        input,
        output,
        weight: Tensor::new(vec![output, input], weight)?,
        bias: Tensor::zeros(vec![output]),
    })
}

/// Deterministically fills a tensor with uniform values in `[-scale, scale]`.
/// Used by tests and synthetic model builders.
pub fn random_tensor(shape: Vec<usize>, scale: f32, rng: &mut ChaCha8Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-scale..=scale)).collect();
    Tensor::new(shape, data).expect("uniform values are finite")
}
