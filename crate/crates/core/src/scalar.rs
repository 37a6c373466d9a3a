//! Scalar abstractions shared by the attention algebra.
//!
//! The forward pass, prompt assembly, teachers and block-wise output
//! decomposition only need ring operations, so they are written against
//! [`Scalar`] and run unchanged on `f32`, `f64` and exact rationals.
//! Anything that needs `exp`/`sqrt` (softmax scores, norms) asks for [`Real`].

use std::fmt::Debug;
use std::ops::Neg;

use num_traits::{Float, FromPrimitive, Num, ToPrimitive};

/// Ring-like scalar used by the dense algebra in this crate.
pub trait Scalar:
    Clone + Debug + PartialEq + PartialOrd + Num + Neg<Output = Self> + FromPrimitive + ToPrimitive + Send + Sync + 'static
{
    /// Converts an `f64` constant into this scalar.
    ///
    /// For rationals the conversion is exact (every finite `f64` is a dyadic rational).
    fn lit(x: f64) -> Self {
        Self::from_f64(x).unwrap_or_else(|| panic!("{x} is not representable"))
    }

    fn to_f64_lossy(&self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }

    fn from_usize_lit(n: usize) -> Self {
        Self::from_usize(n).expect("usize not representable")
    }
}

impl<T> Scalar for T where
    T: Clone
        + Debug
        + PartialEq
        + PartialOrd
        + Num
        + Neg<Output = T>
        + FromPrimitive
        + ToPrimitive
        + Send
        + Sync
        + 'static
{
}

/// Floating-point scalar: everything in [`Scalar`] plus transcendental functions.
pub trait Real: Scalar + Float {}

impl<T> Real for T where T: Scalar + Float {}

/// Exact rational arithmetic, used to check algebraic identities with zero rounding.
pub type Exact = num_rational::BigRational;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rational_literal_is_exact() {
        let half = Exact::lit(0.5);
        assert_eq!(half.clone() + half, Exact::lit(1.0));
        let tenth = Exact::lit(0.1);
        // 0.1 as f64 is a dyadic rational, not 1/10.
        assert_ne!(tenth, Exact::new(1.into(), 10.into()));
        assert_eq!(tenth.to_f64_lossy(), 0.1);
    }
}
