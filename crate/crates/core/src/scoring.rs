//! Option-restricted softmax over answer-token log-probabilities.

use crate::error::{argument, Result};
use crate::model::OptionDistribution;
use crate::scalar::Real;

/// Gap below the smallest observed candidate assigned to labels that the
/// backend did not return.
pub const FLOOR_GAP: f64 = 10.0;

/// Softmax over option logits, shifted by the maximum for stability.
pub fn restricted_softmax<T: Real>(logits: &[T]) -> Result<OptionDistribution<T>> {
    if logits.is_empty() {
        return Err(argument("no option logits"));
    }
    if logits.iter().any(|z| !z.is_finite()) {
        return Err(argument("non-finite option logit"));
    }
    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let exps: Vec<T> = logits.iter().map(|&z| (z - max).exp()).collect();
    let total = exps.iter().fold(T::zero(), |a, &b| a + b);
    OptionDistribution::new(exps.into_iter().map(|e| e / total).collect())
}

/// Label log-probabilities after the floor rule.
#[derive(Debug, Clone, PartialEq)]
pub struct FlooredLogits<T> {
    pub logits: Vec<T>,
    /// Positions of labels that received the floor value.
    pub missing: Vec<usize>,
}

/// Fills labels absent from the candidate list with `min_observed − 10`.
///
/// `min_observed` is the smallest log-probability among all candidates
/// the backend returned at the answer position.
pub fn apply_floor<T: Real>(label_logprobs: &[Option<T>], min_observed: T) -> Result<FlooredLogits<T>> {
    if label_logprobs.iter().all(Option::is_none) {
        return Err(argument("none of the option labels were observed"));
    }
    let floor = min_observed - T::lit(FLOOR_GAP);
    let mut missing = Vec::new();
    let logits = label_logprobs
        .iter()
        .enumerate()
        .map(|(i, lp)| {
            lp.unwrap_or_else(|| {
                missing.push(i);
                floor
            })
        })
        .collect();
    Ok(FlooredLogits { logits, missing })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn equal_logits_are_uniform() {
        let p = restricted_softmax(&[-0.1, -0.1]).unwrap();
        assert_eq!(p.probs(), [0.5, 0.5]);
    }

    #[test]
    fn two_label_logits() {
        let p = restricted_softmax(&[2.0_f64, 0.0]).unwrap();
        assert!((p.probs()[0] - 0.880797).abs() < 1e-4);
        assert!((p.probs()[1] - 0.119203).abs() < 1e-4);
    }

    #[test]
    fn floor_rule_concentrates_mass() {
        let f = apply_floor(&[Some(-0.05), None, None, None], -3.0).unwrap();
        assert_eq!(f.missing, [1, 2, 3]);
        assert_eq!(f.logits[1], -13.0);
        let p = restricted_softmax(&f.logits).unwrap();
        assert!(p.probs()[0] > 0.99);
        assert!(apply_floor::<f64>(&[None, None], -1.0).is_err());
    }

    #[test]
    fn works_in_single_precision() {
        let p = restricted_softmax(&[1.0_f32, 1.0, 1.0]).unwrap();
        assert!((p.probs()[0] - 1.0 / 3.0).abs() < 1e-6);
    }

    #[test]
    fn rejects_empty_and_nan() {
        assert!(restricted_softmax::<f64>(&[]).is_err());
        assert!(restricted_softmax(&[f64::NAN, 0.0]).is_err());
    }
}
