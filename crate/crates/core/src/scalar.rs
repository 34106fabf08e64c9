//! Floating-point scalar abstraction: the whole numeric core is generic over
//! this trait, with `f64` aliases exported at the crate root.

use std::fmt::{Debug, Display};

use num_traits::{Float, FromPrimitive, NumAssignOps, ToPrimitive};

/// Scalar type the tensor engine computes in. Implemented for `f32` and `f64`.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + NumAssignOps + Debug + Display + Default + Send + Sync + 'static
{
    fn of_f64(v: f64) -> Self {
        <Self as FromPrimitive>::from_f64(v).expect("f64 conversion")
    }

    fn as_f64(self) -> f64 {
        <Self as ToPrimitive>::to_f64(&self).expect("f64 conversion")
    }

    fn of_usize(v: usize) -> Self {
        <Self as FromPrimitive>::from_usize(v).expect("usize conversion")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Numerically stable logistic function.
pub fn sigmoid<S: Scalar>(x: S) -> S {
    if x >= S::zero() {
        S::one() / (S::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (S::one() + e)
    }
}

/// Numerically stable `ln(1 + e^x)`.
pub fn softplus<S: Scalar>(x: S) -> S {
    x.max(S::zero()) + (-x.abs()).exp().ln_1p()
}

/// Inverse of [`softplus`]: the pre-activation that produces `y > 0`.
pub fn softplus_inv<S: Scalar>(y: S) -> S {
    // ln(e^y - 1), rewritten to stay stable for large y.
    y + (-(-y).exp_m1()).ln()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sigmoid_symmetry() {
        for &x in &[-50.0, -3.0, -0.5, 0.0, 0.5, 3.0, 50.0_f64] {
            let s = sigmoid(x) + sigmoid(-x);
            assert!((s - 1.0).abs() < 1e-15, "sigma(x)+sigma(-x)={s} at x={x}");
        }
        assert_eq!(sigmoid(0.0_f64), 0.5);
    }

    #[test]
    fn softplus_roundtrip() {
        for &y in &[1e-6, 1e-3, 0.5, 1.0, 20.0_f64] {
            let x = softplus_inv(y);
            let back = softplus(x);
            assert!(
                (back - y).abs() / y < 1e-12,
                "softplus(softplus_inv({y})) = {back}"
            );
        }
    }

    #[test]
    fn softplus_large_negative_is_tiny() {
        assert!(softplus(-40.0_f64) < 1e-17);
        assert!(softplus(-40.0_f64) > 0.0);
    }
}
