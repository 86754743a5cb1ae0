//! Scalar abstraction shared by the numeric modules.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FloatConst, FromPrimitive, NumAssign, ToPrimitive};

/// Floating point type the volume math is written against: `f32` or `f64`.
pub trait Scalar:
    Float
    + FloatConst
    + FromPrimitive
    + ToPrimitive
    + NumAssign
    + Sum
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + 'static
{
    /// Lossy conversion from `f64`; used for literal constants.
    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("f64 literal representable")
    }

    fn from_usize_(v: usize) -> Self {
        Self::from_usize(v).expect("usize representable")
    }

    fn to_f64_(self) -> f64 {
        self.to_f64().expect("finite scalar")
    }

    fn to_f32_(self) -> f32 {
        self.to_f32().expect("finite scalar")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}
