//! Domain model and numerical kernels for measuring the uncertainty of
//! retrieval-augmented multiple-choice QA with conformal prediction.
//!
//! The kernels are generic over [`Scalar`] / [`Real`]; the aliases below
//! fix the double-precision instantiation used by the rest of the
//! workspace.

pub mod conformal;
pub mod error;
pub mod mixture;
pub mod model;
pub mod retrieval;
pub mod scalar;
pub mod scoring;

pub use error::{CoreError, Result};
pub use model::{
    letter_index, normalize_ws, option_letter, stable_argmax, Document, McqaInstance, ScoreMethod,
    SplitSpec, StepAction, StrategyTrace, TraceStep,
};
pub use scalar::{Real, Scalar};

/// Exact rationals for oracle-grade conformal arithmetic.
pub type Rational = num_rational::Ratio<i64>;

pub type OptionDistribution = model::OptionDistribution<f64>;
pub type PredictionSet = model::PredictionSet<f64>;
pub type Threshold = model::Threshold<f64>;
pub type CalibrationModel = conformal::CalibrationModel<f64>;
pub type ScoredInstance = conformal::ScoredInstance<f64>;
pub type VectorIndex = retrieval::VectorIndex<f64>;
pub type Ranking = retrieval::Ranking<f64>;
pub type GaussianMixture = mixture::GaussianMixture<f64>;
