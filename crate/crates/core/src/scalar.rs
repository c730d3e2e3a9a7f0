use std::fmt::{Debug, Display};
use std::ops::{Add, Mul, Sub};

use num_traits::{Float, FromPrimitive, One, Zero};

/// Floating-point type that chart values, grid points and p-values live in.
pub trait Scalar:
    Float + FromPrimitive + Debug + Display + Default + Send + Sync + 'static
{
    /// Converts a literal. Panics only for values that cannot be represented at all.
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("literal representable in scalar type")
    }

    fn from_index(k: usize) -> Self {
        Self::from_usize(k).expect("index representable in scalar type")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Arithmetic needed to propagate a probability vector through a kernel.
///
/// Satisfied by `f32`/`f64`, by [`crate::exact::Dyadic`] and by
/// `num_rational::BigRational`.
pub trait Probability:
    Clone
    + Debug
    + PartialOrd
    + Zero
    + One
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Send
    + Sync
{
}

impl<T> Probability for T where
    T: Clone
        + Debug
        + PartialOrd
        + Zero
        + One
        + Add<Output = T>
        + Sub<Output = T>
        + Mul<Output = T>
        + Send
        + Sync
{
}
