//! Scalar abstraction shared by the numerical kernels.
//!
//! Conformal scoring and calibration only need ring operations and an
//! ordering, so they run on exact rationals as well as on floats. Kernels
//! that need `exp`, `ln` or `sqrt` (softmax, mixtures, cosine search) ask
//! for [`Real`] instead.

use std::fmt::Debug;

use num_rational::Ratio;
use num_traits::{Float, FromPrimitive, Num, ToPrimitive};

/// Ordered numeric type usable by the conformal machinery.
pub trait Scalar:
    Num + PartialOrd + Copy + FromPrimitive + ToPrimitive + Debug + Send + Sync + 'static
{
    /// Tolerance used when checking that a probability vector sums to one.
    fn sum_tolerance() -> f64;

    /// `⌈self⌉` as an index, for finite non-negative values.
    ///
    /// Float implementations snap values within a few ulps of an integer
    /// onto that integer, so `10 * (1 - 0.1)` yields 9 rather than 10.
    fn ceil_index(self) -> Option<usize>;

    /// Lossy conversion used for reporting and tolerance checks.
    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }

    /// Conversion from a literal; panics only for values the type cannot hold.
    fn lit(value: f64) -> Self {
        Self::from_f64(value).expect("literal representable in scalar type")
    }

    fn from_count(n: usize) -> Self {
        Self::from_usize(n).expect("count representable in scalar type")
    }
}

/// Floating-point scalars (`f32`, `f64`).
pub trait Real: Scalar + Float {}

fn snapped_ceil(v: f64, rel_tol: f64) -> Option<usize> {
    if !v.is_finite() || v < 0.0 {
        return None;
    }
    let nearest = v.round();
    let r = if (v - nearest).abs() <= rel_tol * v.abs().max(1.0) {
        nearest
    } else {
        v.ceil()
    };
    r.to_usize()
}

impl Scalar for f64 {
    fn sum_tolerance() -> f64 {
        1e-9
    }

    fn ceil_index(self) -> Option<usize> {
        snapped_ceil(self, 1e-12)
    }
}

impl Scalar for f32 {
    fn sum_tolerance() -> f64 {
        1e-5
    }

    fn ceil_index(self) -> Option<usize> {
        snapped_ceil(f64::from(self), 1e-6)
    }
}

impl Real for f64 {}
impl Real for f32 {}

impl Scalar for Ratio<i64> {
    fn sum_tolerance() -> f64 {
        0.0
    }

    fn ceil_index(self) -> Option<usize> {
        if self < Ratio::from_integer(0) {
            return None;
        }
        self.ceil().to_integer().to_usize()
    }
}

impl Scalar for Ratio<i128> {
    fn sum_tolerance() -> f64 {
        0.0
    }

    fn ceil_index(self) -> Option<usize> {
        if self < Ratio::from_integer(0) {
            return None;
        }
        self.ceil().to_integer().to_usize()
    }
}
