//! Scalar abstraction: every numeric kernel in this crate is generic over the
//! floating-point type, with `f32` as the shipping default and `f64` used
//! where tests need tighter tolerances.

use std::fmt::{Debug, Display};

use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};

/// Floating-point scalar usable by the tape, the schedulers and the models.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + NumAssign + Debug + Display + Default + 'static
{
    /// Lossless-enough conversion from `f64` literals and RNG draws.
    fn from_f64_lossy(v: f64) -> Self {
        Self::from_f64(v).expect("finite f64 converts to any Scalar")
    }

    fn to_f64_lossy(self) -> f64 {
        self.to_f64().expect("Scalar converts to f64")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

#[cfg(test)]
mod tests {
    use super::*;

    fn roundtrip<T: Scalar>() {
        let x = T::from_f64_lossy(0.25);
        assert_eq!(x.to_f64_lossy(), 0.25);
    }

    #[test]
    fn f32_and_f64_are_scalars() {
        roundtrip::<f32>();
        roundtrip::<f64>();
    }
}
