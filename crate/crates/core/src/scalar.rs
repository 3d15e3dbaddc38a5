//! Floating-point scalar abstraction shared by every numeric module.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::str::FromStr;

use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};
use serde::de::DeserializeOwned;
use serde::Serialize;

/// Real scalar usable by the task, network, transport and statistics code.
///
/// Implemented for `f32` and `f64`. Tolerances quoted in the documentation
/// assume `f64`; the `f32` instantiation is usable but looser.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + NumAssign
    + Sum
    + Debug
    + Display
    + std::fmt::LowerExp
    + FromStr
    + Default
    + Send
    + Sync
    + Serialize
    + DeserializeOwned
    + 'static
{
    /// Converts an `f64` literal. Every `f64` is representable (possibly
    /// rounded) in both implementors, so this never fails.
    #[inline]
    fn of(x: f64) -> Self {
        Self::from_f64(x).expect("f64 literal representable")
    }

    #[inline]
    fn of_usize(n: usize) -> Self {
        Self::from_usize(n).expect("usize representable")
    }

    #[inline]
    fn f64(self) -> f64 {
        self.to_f64().expect("scalar representable as f64")
    }

    /// Numerical-zero threshold used for probability sums and marginals.
    #[inline]
    fn sum_tolerance() -> Self {
        Self::of(1e-9).max(Self::epsilon() * Self::of(1e3))
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Numerically stable `log Σ exp(x_i)`; returns `-inf` for empty or all-`-inf` input.
pub fn logsumexp<T: Scalar>(xs: impl IntoIterator<Item = T> + Clone) -> T {
    let max = xs
        .clone()
        .into_iter()
        .fold(T::neg_infinity(), |m, x| if x > m { x } else { m });
    if max == T::neg_infinity() {
        return max;
    }
    if max == T::infinity() {
        return max;
    }
    let s: T = xs.into_iter().map(|x| (x - max).exp()).sum();
    max + s.ln()
}

/// `x ln x` with the convention `0 ln 0 = 0`.
#[inline]
pub fn xlogx<T: Scalar>(x: T) -> T {
    if x <= T::zero() {
        T::zero()
    } else {
        x * x.ln()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn logsumexp_matches_naive() {
        let xs = [0.1f64, -2.0, 3.5];
        let naive = xs.iter().map(|x| x.exp()).sum::<f64>().ln();
        assert!((logsumexp(xs.iter().copied()) - naive).abs() < 1e-12);
    }

    #[test]
    fn logsumexp_handles_large_and_empty() {
        let big = [1000.0f64, 1000.0];
        assert!((logsumexp(big.iter().copied()) - (1000.0 + 2f64.ln())).abs() < 1e-9);
        let empty: [f64; 0] = [];
        assert_eq!(logsumexp(empty.iter().copied()), f64::NEG_INFINITY);
        let f = [f64::NEG_INFINITY, 0.0f64];
        assert_eq!(logsumexp(f.iter().copied()), 0.0);
    }

    #[test]
    fn f32_instantiation() {
        let v = logsumexp([0.0f32, 0.0].iter().copied());
        assert!((v - 2f32.ln()).abs() < 1e-6);
        assert!(f32::sum_tolerance() > 1e-9);
    }
}
