//! Scalar abstraction for the numeric kernels.
//!
//! Everything that computes (distances, content scores, losses, metrics) is
//! generic over [`Real`] so the same code runs in `f32` or `f64`. Pipeline
//! I/O stays `f64`; see the aliases at the crate root.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign};

/// Floating-point scalar: `f32` or `f64`.
pub trait Real:
    Float + FromPrimitive + NumAssign + Sum + Debug + Display + Default + Send + Sync + 'static
{
    fn to_f64_lossy(self) -> f64 {
        self.to_f64().expect("float converts to f64")
    }
}

impl Real for f32 {}
impl Real for f64 {}

/// Shorthand for converting an `f64` constant into the working scalar.
pub fn real<F: Real>(x: f64) -> F {
    F::from_f64(x).expect("f64 constant representable in scalar type")
}

/// Numerically stable `ln(1 + exp(x))`.
pub fn softplus<F: Real>(x: F) -> F {
    if x > real(30.0) {
        x
    } else {
        x.exp().ln_1p()
    }
}

/// Numerically stable logistic sigmoid.
pub fn sigmoid<F: Real>(x: F) -> F {
    if x >= F::zero() {
        F::one() / (F::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::one() + e)
    }
}

/// `ln(sigmoid(x))` without intermediate underflow.
pub fn ln_sigmoid<F: Real>(x: F) -> F {
    -softplus(-x)
}

/// `ln(1 - sigmoid(x))` without intermediate underflow.
pub fn ln_one_minus_sigmoid<F: Real>(x: F) -> F {
    -softplus(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn sigmoid_matches_naive_in_safe_range() {
        for i in -40..=40 {
            let x = i as f64 / 4.0;
            assert_relative_eq!(sigmoid(x), 1.0 / (1.0 + (-x).exp()), max_relative = 1e-12);
        }
    }

    #[test]
    fn sigmoid_extremes_saturate() {
        assert_eq!(sigmoid(800.0_f64), 1.0);
        assert_eq!(sigmoid(-800.0_f64), 0.0);
        assert!(ln_sigmoid(-800.0_f64).is_finite());
        assert!(ln_one_minus_sigmoid(800.0_f64).is_finite());
    }

    #[test]
    fn softplus_generic_over_f32() {
        let y: f32 = softplus(0.0_f32);
        assert_relative_eq!(y, std::f32::consts::LN_2, max_relative = 1e-6);
    }
}
