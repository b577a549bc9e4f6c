//! Simulated int8 weight quantization.
//!
//! Quantization here is a model-to-model transform: selected layers'
//! weights and biases are snapped onto a symmetric per-tensor int8 grid and
//! immediately dequantized, so the result is an ordinary `f32` model whose
//! parameters carry int8-sized rounding error. Inference code is untouched.
//!
//! Per tensor: `scale = max|w| / 127` (`1` for an all-zero tensor),
//! `q = clamp(round(w / scale), -127, 127)`, stored value `q * scale`.
//! The transform is idempotent: re-quantizing a quantized tensor recovers
//! the same integers and the same scale, hence identical values.

use crate::error::Result;
use crate::model::{LayerSpec, Model};
use crate::tensor::Tensor;

/// Layer kinds whose parameters are quantized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuantKind {
    Dense,
    Conv2d,
}

/// Quantizes one tensor onto the symmetric int8 grid.
fn quantize_tensor(t: &Tensor) -> Result<Tensor> {
    let amax = t.data().iter().fold(0.0f32, |m, v| m.max(v.abs()));
    let scale = if amax == 0.0 { 1.0 } else { amax / 127.0 };
    let data: Vec<f32> = t
        .data()
        .iter()
        .map(|&v| (v / scale).round().clamp(-127.0, 127.0) * scale)
        .collect();
    Tensor::new(t.shape().to_vec(), data)
}

/// Returns a copy of the model with the weights and biases of every layer
/// whose kind appears in `kinds` quantized. Other layers (batch norm
/// parameters included) are untouched.
pub fn quantize(model: &Model, kinds: &[QuantKind]) -> Result<Model> {
    let dense = kinds.contains(&QuantKind::Dense);
    let conv = kinds.contains(&QuantKind::Conv2d);
    let mut layers = Vec::with_capacity(model.layers.len());
    for layer in &model.layers {
        layers.push(match layer {
            LayerSpec::Dense { input, output, weight, bias } if dense => LayerSpec::Dense {
                input: *input,
                output: *output,
                weight: quantize_tensor(weight)?,
                bias: quantize_tensor(bias)?,
            },
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
                weight,
                bias,
            } if conv => LayerSpec::Conv2d {
                in_channels: *in_channels,
                out_channels: *out_channels,
                kernel: *kernel,
                stride: *stride,
                padding: *padding,
                weight: quantize_tensor(weight)?,
                bias: quantize_tensor(bias)?,
            },
            other => other.clone(),
        });
    }
    Model::new(model.input_shape.clone(), layers, model.class_labels.clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_mlp, random_tensor};
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn grid_has_at_most_255_levels_and_preserves_extremes() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let t = random_tensor(vec![64], 3.0, &mut rng);
        let q = quantize_tensor(&t).unwrap();
        let amax = t.data().iter().fold(0.0f32, |m, v| m.max(v.abs()));
        let scale = amax / 127.0;
        for (&orig, &qv) in t.data().iter().zip(q.data()) {
            // Every value lands on the grid and within half a step.
            let steps = qv / scale;
            assert!((steps - steps.round()).abs() < 1e-4);
            assert!((orig - qv).abs() <= scale * 0.5 + 1e-6);
        }
        // The largest-magnitude entry maps to exactly +/-127 steps.
        let idx = t
            .data()
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.abs().total_cmp(&b.1.abs()))
            .unwrap()
            .0;
        assert!((q.data()[idx].abs() - amax).abs() < amax * 1e-6);
    }

    #[test]
    fn idempotent() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..10 {
            let t = random_tensor(vec![40], 2.0, &mut rng);
            let q1 = quantize_tensor(&t).unwrap();
            let q2 = quantize_tensor(&q1).unwrap();
            assert_eq!(q1, q2);
        }
        let model = build_mlp(&[6], &[5], 3, true, 3).unwrap();
        let q1 = quantize(&model, &[QuantKind::Dense, QuantKind::Conv2d]).unwrap();
        let q2 = quantize(&q1, &[QuantKind::Dense, QuantKind::Conv2d]).unwrap();
        assert_eq!(q1, q2);
    }

    #[test]
    fn all_zero_tensor_stays_zero() {
        let t = Tensor::zeros(vec![8]);
        assert_eq!(quantize_tensor(&t).unwrap(), t);
    }

    #[test]
    fn kind_selection_is_respected() {
        let model = build_mlp(&[6], &[5], 3, true, 3).unwrap();
        let q = quantize(&model, &[QuantKind::Conv2d]).unwrap();
        // No conv layers in an MLP: nothing changes.
        assert_eq!(q, model);
        let q = quantize(&model, &[QuantKind::Dense]).unwrap();
        assert_ne!(q, model);
        // Batch norm parameters survive untouched.
        for (a, b) in model.layers.iter().zip(&q.layers) {
            if let (
                LayerSpec::BatchNorm { gamma: g1, .. },
                LayerSpec::BatchNorm { gamma: g2, .. },
            ) = (a, b)
            {
                assert_eq!(g1, g2);
            }
        }
    }
}
