//! Fault oracles: decide whether a model's behaviour on an input counts as
//! a defect.
//!
//! Three verdict styles are supported:
//!
//! * **Label consistency** — inputs decoded from a class manifold should
//!   keep that class's label; a differing argmax is a fault.
//! * **Differential** — several models vote on the same input; disagreement
//!   (by label, or numerically beyond a tolerance) is a fault.
//! * **Quantization differential** — a float model against its quantized
//!   sibling; an argmax flip is a fault, and the L1 distance between the
//!   probability vectors doubles as a fitness signal for campaigns that
//!   have no coverage feedback.
//!
//! All verdicts are pure functions of their inputs: no randomness, no state.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forward::forward;
use crate::model::Model;
use crate::tensor::{argmax, Tensor};

/// How a differential oracle compares model outputs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Agreement {
    /// Fault iff any two argmax labels differ.
    ExactLabel,
    /// Fault iff any two outputs differ by more than the tolerance in any
    /// coordinate (max pairwise Chebyshev distance).
    Numeric(f64),
}

/// One model's view of an input: winning label plus the full output vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelPrediction {
    pub label: usize,
    pub probs: Vec<f32>,
}

impl ModelPrediction {
    fn from_output(output: &[f32]) -> Result<ModelPrediction> {
        let label = argmax(output)
            .ok_or_else(|| Error::InvalidArgument("empty model output".into()))?;
        Ok(ModelPrediction { label, probs: output.to_vec() })
    }
}

/// Outcome of an oracle check.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub is_fault: bool,
    /// Every model's prediction that went into the decision, in evaluation
    /// order (primary model first where that distinction exists).
    pub predictions: Vec<ModelPrediction>,
    /// Present only for quantization differentials: L1 distance between
    /// the probability vectors, in `[0, 2]`.
    pub fitness: Option<f64>,
}

/// Slack allowed when validating that a vector is a probability
/// distribution; covers `f32` softmax rounding.
const PROB_SLACK: f32 = 1e-4;

fn check_probability_vector(probs: &[f32], what: &str) -> Result<()> {
    if probs.is_empty() {
        return Err(Error::InvalidArgument(format!("{what} is empty")));
    }
    let mut sum = 0.0f64;
    for &p in probs {
        if !p.is_finite() || !(-PROB_SLACK..=1.0 + PROB_SLACK).contains(&p) {
            return Err(Error::InvalidArgument(format!(
                "{what} is not a probability vector: entry {p}"
            )));
        }
        sum += p as f64;
    }
    if (sum - 1.0).abs() > PROB_SLACK as f64 {
        return Err(Error::InvalidArgument(format!(
            "{what} is not a probability vector: sum {sum}"
        )));
    }
    Ok(())
}

/// Label-consistency check: fault iff the winning class (ties broken by
/// lowest index) differs from the expected label.
pub fn check_label_consistency(probs: &[f32], expected: usize) -> Result<Verdict> {
    check_probability_vector(probs, "model output")?;
    let prediction = ModelPrediction::from_output(probs)?;
    let is_fault = prediction.label != expected;
    Ok(Verdict { is_fault, predictions: vec![prediction], fitness: None })
}

/// Differential check over two or more model outputs.
pub fn check_differential(outputs: &[Vec<f32>], agreement: Agreement) -> Result<Verdict> {
    if outputs.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "differential check needs at least 2 outputs, got {}",
            outputs.len()
        )));
    }
    let len = outputs[0].len();
    for (i, out) in outputs.iter().enumerate() {
        if out.len() != len {
            return Err(Error::InvalidArgument(format!(
                "output {i} has {} entries, output 0 has {len}",
                out.len()
            )));
        }
        if out.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("output {i}")));
        }
    }
    let predictions: Vec<ModelPrediction> = outputs
        .iter()
        .map(|o| ModelPrediction::from_output(o))
        .collect::<Result<_>>()?;
    let is_fault = match agreement {
        Agreement::ExactLabel => {
            let first = predictions[0].label;
            predictions.iter().any(|p| p.label != first)
        }
        Agreement::Numeric(tau) => {
            if !tau.is_finite() || tau < 0.0 {
                return Err(Error::InvalidArgument(format!(
                    "numeric tolerance {tau} must be finite and non-negative"
                )));
            }
            let mut worst = 0.0f64;
            for i in 0..outputs.len() {
                for j in (i + 1)..outputs.len() {
                    for k in 0..len {
                        worst = worst.max((outputs[i][k] as f64 - outputs[j][k] as f64).abs());
                    }
                }
            }
            worst > tau
        }
    };
    Ok(Verdict { is_fault, predictions, fitness: None })
}

/// Float-vs-quantized check. Fitness is the L1 distance between the two
/// probability vectors (symmetric, in `[0, 2]`); the fault bit is an
/// argmax flip.
pub fn quant_fitness(p_orig: &[f32], p_quant: &[f32]) -> Result<(f64, Verdict)> {
    check_probability_vector(p_orig, "original output")?;
    check_probability_vector(p_quant, "quantized output")?;
    if p_orig.len() != p_quant.len() {
        return Err(Error::InvalidArgument(format!(
            "probability vectors have different lengths: {} vs {}",
            p_orig.len(),
            p_quant.len()
        )));
    }
    let fitness: f64 = p_orig
        .iter()
        .zip(p_quant)
        .map(|(&a, &b)| (a as f64 - b as f64).abs())
        .sum();
    let a = ModelPrediction::from_output(p_orig)?;
    let b = ModelPrediction::from_output(p_quant)?;
    let is_fault = a.label != b.label;
    let verdict = Verdict { is_fault, predictions: vec![a, b], fitness: Some(fitness) };
    Ok((fitness, verdict))
}

/// True iff every element is finite and inside the closed range.
pub fn validate_input(x: &Tensor, valid_range: (f32, f32)) -> bool {
    let (lo, hi) = valid_range;
    x.data().iter().all(|&v| v.is_finite() && v >= lo && v <= hi)
}

/// An oracle bound into a fuzzing campaign. The campaign runs the primary
/// (coverage-traced) model itself and hands its output in; the oracle owns
/// any companion models it needs beyond that.
#[derive(Debug, Clone)]
pub enum Oracle {
    /// Candidates must keep their seed's class label.
    LabelConsistency,
    /// Companion models must agree with the primary model.
    Differential { companions: Vec<Model>, agreement: Agreement },
    /// The quantized sibling must agree with the primary model; also
    /// yields the L1 fitness used by black-box campaigns.
    QuantDiff { quantized: Model },
}

impl Oracle {
    pub fn differential(companions: Vec<Model>, agreement: Agreement) -> Result<Oracle> {
        if companions.is_empty() {
            return Err(Error::InvalidArgument(
                "differential oracle needs at least one companion model".into(),
            ));
        }
        if let Agreement::Numeric(tau) = agreement {
            if !tau.is_finite() || tau < 0.0 {
                return Err(Error::InvalidArgument(format!(
                    "numeric tolerance {tau} must be finite and non-negative"
                )));
            }
        }
        for m in &companions {
            m.validate()?;
        }
        Ok(Oracle::Differential { companions, agreement })
    }

    pub fn quant_diff(quantized: Model) -> Result<Oracle> {
        quantized.validate()?;
        if !quantized.is_classifier() {
            return Err(Error::InvalidArgument(
                "quantization oracle needs a classifier (softmax output)".into(),
            ));
        }
        Ok(Oracle::QuantDiff { quantized })
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            Oracle::LabelConsistency => "label_consistency",
            Oracle::Differential { .. } => "differential",
            Oracle::QuantDiff { .. } => "quant_diff",
        }
    }

    /// Whether this oracle produces a fitness signal (and therefore can
    /// drive a campaign without coverage feedback).
    pub fn has_fitness(&self) -> bool {
        matches!(self, Oracle::QuantDiff { .. })
    }

    /// Checks that the oracle's own models are compatible with the
    /// campaign's primary model.
    pub fn validate_against(&self, primary: &Model) -> Result<()> {
        match self {
            Oracle::LabelConsistency => {
                if !primary.is_classifier() {
                    return Err(Error::InvalidArgument(
                        "label-consistency oracle needs a classifier (softmax output)".into(),
                    ));
                }
            }
            Oracle::Differential { companions, .. } => {
                let out = primary.output_shape()?;
                for (i, m) in companions.iter().enumerate() {
                    if m.input_shape != primary.input_shape {
                        return Err(Error::Shape(format!(
                            "companion model {i} input {:?} differs from primary {:?}",
                            m.input_shape, primary.input_shape
                        )));
                    }
                    let mo = m.output_shape()?;
                    if mo != out {
                        return Err(Error::Shape(format!(
                            "companion model {i} output {mo:?} differs from primary {out:?}"
                        )));
                    }
                }
            }
            Oracle::QuantDiff { quantized } => {
                if !primary.is_classifier() {
                    return Err(Error::InvalidArgument(
                        "quantization oracle needs a classifier primary".into(),
                    ));
                }
                if quantized.input_shape != primary.input_shape
                    || quantized.output_shape()? != primary.output_shape()?
                {
                    return Err(Error::Shape(
                        "quantized model shape differs from primary".into(),
                    ));
                }
            }
        }
        Ok(())
    }

    /// Evaluates one candidate. `primary_output` is the primary model's
    /// output on `input` (already computed by the campaign alongside the
    /// activation trace); `expected` is the class of the seed the
    /// candidate was mutated from.
    pub fn evaluate(&self, input: &Tensor, primary_output: &Tensor, expected: usize) -> Result<Verdict> {
        match self {
            Oracle::LabelConsistency => check_label_consistency(primary_output.data(), expected),
            Oracle::Differential { companions, agreement } => {
                let mut outputs = Vec::with_capacity(companions.len() + 1);
                outputs.push(primary_output.data().to_vec());
                for m in companions {
                    outputs.push(forward(m, input)?.into_data());
                }
                check_differential(&outputs, *agreement)
            }
            Oracle::QuantDiff { quantized } => {
                let q = forward(quantized, input)?;
                let (_, verdict) = quant_fitness(primary_output.data(), q.data())?;
                Ok(verdict)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::build_mlp;
    use crate::quant::{quantize, QuantKind};
    use proptest::prelude::*;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn label_consistency_basic() {
        let v = check_label_consistency(&[0.9, 0.1], 0).unwrap();
        assert!(!v.is_fault);
        assert_eq!(v.predictions[0].label, 0);
        assert_eq!(v.fitness, None);

        let v = check_label_consistency(&[0.4, 0.6], 0).unwrap();
        assert!(v.is_fault);

        // Exact tie resolves to the lowest index.
        let v = check_label_consistency(&[0.5, 0.5], 0).unwrap();
        assert!(!v.is_fault);
        let v = check_label_consistency(&[0.5, 0.5], 1).unwrap();
        assert!(v.is_fault);
    }

    #[test]
    fn label_consistency_rejects_non_probabilities() {
        assert!(check_label_consistency(&[0.9, 0.3], 0).is_err()); // sum 1.2
        assert!(check_label_consistency(&[1.2, -0.2], 0).is_err()); // out of [0,1]
        assert!(check_label_consistency(&[], 0).is_err());
    }

    #[test]
    fn differential_label_mode() {
        let same = vec![vec![0.1, 0.9], vec![0.2, 0.8], vec![0.4, 0.6]];
        let v = check_differential(&same, Agreement::ExactLabel).unwrap();
        assert!(!v.is_fault);
        assert_eq!(v.predictions.iter().map(|p| p.label).collect::<Vec<_>>(), vec![1, 1, 1]);

        let split = vec![vec![0.1, 0.9], vec![0.7, 0.3]];
        assert!(check_differential(&split, Agreement::ExactLabel).unwrap().is_fault);

        assert!(check_differential(&[vec![1.0, 0.0]], Agreement::ExactLabel).is_err());
        assert!(check_differential(&[vec![1.0], vec![1.0, 0.0]], Agreement::ExactLabel).is_err());
    }

    #[test]
    fn differential_numeric_mode() {
        // Worst pairwise gap is |0.10 - 0.18| = 0.08 > 0.05.
        let angles = vec![vec![0.10], vec![0.10], vec![0.18]];
        let v = check_differential(&angles, Agreement::Numeric(0.05)).unwrap();
        assert!(v.is_fault);
        let v = check_differential(&angles, Agreement::Numeric(0.09)).unwrap();
        assert!(!v.is_fault);
        assert!(check_differential(&angles, Agreement::Numeric(-1.0)).is_err());
        assert!(check_differential(&angles, Agreement::Numeric(f64::NAN)).is_err());
    }

    #[test]
    fn quant_fitness_hand_examples() {
        let (f, v) = quant_fitness(&[0.6, 0.4], &[0.6, 0.4]).unwrap();
        assert_eq!(f, 0.0);
        assert!(!v.is_fault);

        let (f, v) = quant_fitness(&[0.6, 0.4], &[0.4, 0.6]).unwrap();
        assert!((f - 0.4).abs() < 1e-6);
        assert!(v.is_fault, "argmax flips 0 -> 1");
        assert_eq!(v.fitness, Some(f));

        let (f, v) = quant_fitness(&[0.9, 0.1], &[0.8, 0.2]).unwrap();
        assert!((f - 0.2).abs() < 1e-7);
        assert!(!v.is_fault);

        assert!(quant_fitness(&[1.0], &[0.5, 0.5]).is_err());
    }

    #[test]
    fn validate_input_checks_range() {
        let t = Tensor::new(vec![3], vec![0.0, 128.0, 255.0]).unwrap();
        assert!(validate_input(&t, (0.0, 255.0)));
        let t = Tensor::new(vec![3], vec![0.0, 128.0, 255.1]).unwrap();
        assert!(!validate_input(&t, (0.0, 255.0)));
    }

    #[test]
    fn duplicated_model_never_disagrees() {
        let model = build_mlp(&[2, 3], &[8], 4, false, 7).unwrap();
        let oracle =
            Oracle::differential(vec![model.clone(), model.clone()], Agreement::ExactLabel)
                .unwrap();
        oracle.validate_against(&model).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let x = crate::model::random_tensor(vec![2, 3], 1.0, &mut rng);
            let out = forward(&model, &x).unwrap();
            let v = oracle.evaluate(&x, &out, 0).unwrap();
            assert!(!v.is_fault);
            assert_eq!(v.predictions.len(), 3);
        }
    }

    #[test]
    fn quant_oracle_runs_quantized_sibling() {
        let model = build_mlp(&[4], &[16], 3, false, 11).unwrap();
        let quant = quantize(&model, &[QuantKind::Dense]).unwrap();
        let oracle = Oracle::quant_diff(quant.clone()).unwrap();
        oracle.validate_against(&model).unwrap();
        assert!(oracle.has_fitness());
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = crate::model::random_tensor(vec![4], 1.0, &mut rng);
        let out = forward(&model, &x).unwrap();
        let v = oracle.evaluate(&x, &out, 0).unwrap();
        let f = v.fitness.expect("quant verdicts carry fitness");
        // Cross-check against running the quantized model directly.
        let qout = forward(&quant, &x).unwrap();
        let expect: f64 = out
            .data()
            .iter()
            .zip(qout.data())
            .map(|(&a, &b)| (a as f64 - b as f64).abs())
            .sum();
        assert!((f - expect).abs() < 1e-12);
    }

    #[test]
    fn oracle_shape_validation() {
        let model = build_mlp(&[4], &[8], 3, false, 1).unwrap();
        let other = build_mlp(&[5], &[8], 3, false, 1).unwrap();
        let oracle = Oracle::differential(vec![other], Agreement::ExactLabel).unwrap();
        assert!(oracle.validate_against(&model).is_err());
        assert!(Oracle::differential(vec![], Agreement::ExactLabel).is_err());
    }

    fn prob_vector(n: usize) -> impl Strategy<Value = Vec<f32>> {
        proptest::collection::vec(0.01f64..1.0, n).prop_map(|raw| {
            let sum: f64 = raw.iter().sum();
            raw.iter().map(|&v| (v / sum) as f32).collect()
        })
    }

    proptest! {
        #[test]
        fn quant_fitness_symmetric_and_bounded(a in prob_vector(6), b in prob_vector(6)) {
            let (f_ab, _) = quant_fitness(&a, &b).unwrap();
            let (f_ba, _) = quant_fitness(&b, &a).unwrap();
            prop_assert!((f_ab - f_ba).abs() < 1e-12);
            prop_assert!((0.0..=2.0).contains(&f_ab));
        }

        #[test]
        fn probability_vectors_from_softmax_always_pass(v in proptest::collection::vec(-10.0f32..10.0, 1..8)) {
            let probs = crate::forward::softmax(&v);
            prop_assert!(check_label_consistency(&probs, 0).is_ok());
        }
    }
}
