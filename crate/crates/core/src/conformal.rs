//! Split-conformal calibration over option distributions.
//!
//! Scores are nonconformity values: lower means the option fits the
//! distribution better. A calibrated threshold admits every option whose
//! score does not exceed it.

use serde::{Deserialize, Serialize};

use crate::error::{argument, Result};
use crate::model::{OptionDistribution, PredictionSet, ScoreMethod, Threshold};
use crate::scalar::Scalar;

fn check_index<T: Scalar>(dist: &OptionDistribution<T>, index: usize) -> Result<()> {
    if index >= dist.len() {
        return Err(argument(format!(
            "option index {index} out of range for {} options",
            dist.len()
        )));
    }
    Ok(())
}

/// `1 − p_c`.
pub fn lac_score<T: Scalar>(dist: &OptionDistribution<T>, index: usize) -> Result<T> {
    check_index(dist, index)?;
    Ok(T::one() - dist.probs()[index])
}

/// Total mass of every option at least as probable as `index` (ties included).
pub fn aps_score<T: Scalar>(dist: &OptionDistribution<T>, index: usize) -> Result<T> {
    check_index(dist, index)?;
    let p = dist.probs()[index];
    Ok(dist
        .probs()
        .iter()
        .filter(|&&q| q >= p)
        .fold(T::zero(), |acc, &q| acc + q))
}

pub fn score<T: Scalar>(method: ScoreMethod, dist: &OptionDistribution<T>, index: usize) -> Result<T> {
    match method {
        ScoreMethod::Lac => lac_score(dist, index),
        ScoreMethod::Aps => aps_score(dist, index),
    }
}

/// A distribution paired with its gold option.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredInstance<T = f64> {
    pub instance_id: String,
    pub distribution: OptionDistribution<T>,
    pub gold_index: usize,
}

impl<T: Scalar> ScoredInstance<T> {
    pub fn new(
        instance_id: impl Into<String>,
        distribution: OptionDistribution<T>,
        gold_index: usize,
    ) -> Result<Self> {
        check_index(&distribution, gold_index)?;
        Ok(Self {
            instance_id: instance_id.into(),
            distribution,
            gold_index,
        })
    }
}

/// Calibrated threshold for one score method.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationModel<T = f64> {
    pub method: ScoreMethod,
    pub alpha: T,
    pub n: usize,
    pub q_hat: Threshold<T>,
}

/// 1-based rank `⌈(n+1)(1−α)⌉` of the calibration quantile, or `None`
/// when it exceeds `n` (the threshold is then unbounded).
pub fn conformal_rank<T: Scalar>(n: usize, alpha: T) -> Result<Option<usize>> {
    if n == 0 {
        return Err(argument("calibration set is empty"));
    }
    if !(alpha > T::zero() && alpha < T::one()) {
        return Err(argument(format!("alpha {alpha:?} outside (0, 1)")));
    }
    let target = T::from_count(n + 1) * (T::one() - alpha);
    let rank = target
        .ceil_index()
        .ok_or_else(|| argument("conformal rank is not representable"))?
        .max(1);
    Ok((rank <= n).then_some(rank))
}

/// Empirical conformal quantile of raw scores.
pub fn quantile_threshold<T: Scalar>(scores: &[T], alpha: T) -> Result<Threshold<T>> {
    match conformal_rank(scores.len(), alpha)? {
        None => Ok(Threshold::Unbounded),
        Some(rank) => {
            let mut sorted = scores.to_vec();
            sorted.sort_by(|a, b| a.partial_cmp(b).expect("scores are comparable"));
            Ok(Threshold::Finite(sorted[rank - 1]))
        }
    }
}

/// Scores every calibration instance at its gold option and takes the
/// conformal quantile.
pub fn calibrate<T: Scalar>(
    scored: &[ScoredInstance<T>],
    method: ScoreMethod,
    alpha: T,
) -> Result<CalibrationModel<T>> {
    if scored.is_empty() {
        return Err(argument("calibration set is empty"));
    }
    let scores = scored
        .iter()
        .map(|s| score(method, &s.distribution, s.gold_index))
        .collect::<Result<Vec<_>>>()?;
    Ok(CalibrationModel {
        method,
        alpha,
        n: scored.len(),
        q_hat: quantile_threshold(&scores, alpha)?,
    })
}

/// Options whose score is within the calibrated threshold.
pub fn predict_set<T: Scalar>(
    model: &CalibrationModel<T>,
    dist: &OptionDistribution<T>,
) -> PredictionSet<T> {
    let members = (0..dist.len())
        .filter(|&c| {
            let s = score(model.method, dist, c).expect("index in range");
            model.q_hat.admits(s)
        })
        .collect();
    PredictionSet {
        method: model.method,
        threshold: model.q_hat,
        members,
    }
}

/// [`predict_set`] that falls back to the top option when the set is empty.
pub fn predict_set_nonempty<T: Scalar>(
    model: &CalibrationModel<T>,
    dist: &OptionDistribution<T>,
) -> PredictionSet<T> {
    let mut set = predict_set(model, dist);
    if set.members.is_empty() {
        set.members.insert(dist.argmax());
    }
    set
}

#[cfg(test)]
mod tests {
    use super::*;
    use num_rational::Ratio;

    fn d(p: &[f64]) -> OptionDistribution {
        OptionDistribution::new(p.to_vec()).unwrap()
    }

    fn model(method: ScoreMethod, q: f64) -> CalibrationModel {
        CalibrationModel {
            method,
            alpha: 0.1,
            n: 10,
            q_hat: Threshold::Finite(q),
        }
    }

    #[test]
    fn lac_examples() {
        assert!((lac_score(&d(&[0.6, 0.3, 0.1]), 0).unwrap() - 0.4).abs() < 1e-12);
        assert_eq!(lac_score(&d(&[1.0, 0.0]), 0).unwrap(), 0.0);
        for c in 0..4 {
            assert_eq!(lac_score(&d(&[0.25; 4]), c).unwrap(), 0.75);
        }
        assert!(lac_score(&d(&[0.5, 0.5]), 2).is_err());
    }

    #[test]
    fn aps_examples() {
        let p = d(&[0.5, 0.3, 0.2]);
        assert_eq!(aps_score(&p, 0).unwrap(), 0.5);
        assert!((aps_score(&p, 1).unwrap() - 0.8).abs() < 1e-12);
        assert!((aps_score(&p, 2).unwrap() - 1.0).abs() < 1e-12);
        assert!((aps_score(&d(&[0.4, 0.4, 0.2]), 0).unwrap() - 0.8).abs() < 1e-12);
        assert!(aps_score(&p, 3).is_err());
    }

    #[test]
    fn rank_examples() {
        assert_eq!(conformal_rank(9, 0.1).unwrap(), Some(9));
        assert_eq!(conformal_rank(19, 0.1).unwrap(), Some(18));
        assert_eq!(conformal_rank(4, 0.1).unwrap(), None);
        assert!(conformal_rank(0, 0.1).is_err());
        assert!(conformal_rank(5, 1.5).is_err());
    }

    #[test]
    fn calibrate_picks_rank_18_of_19() {
        let scored: Vec<_> = (1..=19)
            .map(|i| {
                // LAC score 1 - p_gold = i/100
                let p = 1.0 - i as f64 / 100.0;
                ScoredInstance::new(format!("q{i}"), d(&[p, 1.0 - p]), 0).unwrap()
            })
            .collect();
        let m = calibrate(&scored, ScoreMethod::Lac, 0.1).unwrap();
        let q = m.q_hat.finite().unwrap();
        assert!((q - 0.18).abs() < 1e-12, "{q}");
    }

    #[test]
    fn calibrate_overflow_is_unbounded() {
        let scored: Vec<_> = (0..4)
            .map(|i| ScoredInstance::new(format!("q{i}"), d(&[0.7, 0.3]), 0).unwrap())
            .collect();
        let m = calibrate(&scored, ScoreMethod::Aps, 0.1).unwrap();
        assert_eq!(m.q_hat, Threshold::Unbounded);
        assert_eq!(predict_set(&m, &d(&[0.1, 0.2, 0.3, 0.4])).len(), 4);
        assert!(calibrate::<f64>(&[], ScoreMethod::Lac, 0.1).is_err());
    }

    #[test]
    fn predict_set_examples() {
        let s = predict_set(&model(ScoreMethod::Lac, 0.5), &d(&[0.6, 0.3, 0.1]));
        assert_eq!(s.members.iter().copied().collect::<Vec<_>>(), [0]);
        let s = predict_set(&model(ScoreMethod::Aps, 0.8), &d(&[0.5, 0.3, 0.2]));
        assert_eq!(s.members.iter().copied().collect::<Vec<_>>(), [0, 1]);
    }

    #[test]
    fn empty_sets_kept_unless_forced() {
        let m = model(ScoreMethod::Aps, 0.2);
        let p = d(&[0.5, 0.3, 0.2]);
        assert!(predict_set(&m, &p).is_empty());
        assert_eq!(predict_set_nonempty(&m, &p).members.len(), 1);
    }

    #[test]
    fn exact_rationals() {
        let r = |a, b| Ratio::new(a, b);
        let p = OptionDistribution::new(vec![r(1_i64, 2), r(3, 10), r(1, 5)]).unwrap();
        assert_eq!(aps_score(&p, 1).unwrap(), r(4, 5));
        assert_eq!(lac_score(&p, 2).unwrap(), r(4, 5));
        assert_eq!(conformal_rank(19, r(1, 10)).unwrap(), Some(18));
        assert_eq!(conformal_rank(9, r(1, 10)).unwrap(), Some(9));
    }

    #[test]
    fn model_record_round_trips() {
        let m = CalibrationModel {
            method: ScoreMethod::Lac,
            alpha: 0.1,
            n: 4,
            q_hat: Threshold::Unbounded,
        };
        let json = serde_json::to_string(&m).unwrap();
        assert_eq!(json, r#"{"method":"LAC","alpha":0.1,"n":4,"q_hat":"+inf"}"#);
        let back: CalibrationModel = serde_json::from_str(&json).unwrap();
        assert_eq!(back, m);
    }
}
