//! Scalar abstraction shared by the numeric modules.
//!
//! Everything that is pure math (matrices, fitters, the optimizer, mixture
//! fitting, the loss) is written against [`Real`] so it runs in `f32` or
//! `f64`. The simulator and protocol layers are fixed to `f64`.

use std::fmt::{Debug, Display};

use num_traits::{Float, FloatConst, FromPrimitive, NumAssign, ToPrimitive};

/// floating point: f32 or f64
pub trait Real:
    Float
    + FloatConst
    + FromPrimitive
    + ToPrimitive
    + NumAssign
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    /// Converts an `f64` literal. Only used for constants that are exactly
    /// representable or where rounding to the target precision is intended.
    #[inline]
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("f64 literal representable")
    }

    #[inline]
    fn from_usize_lossy(n: usize) -> Self {
        Self::from_usize(n).expect("usize representable")
    }

    #[inline]
    fn to_f64_lossy(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }

    /// Machine-epsilon scaled tolerance helper.
    #[inline]
    fn eps_times(k: f64) -> Self {
        Self::epsilon() * Self::lit(k)
    }
}

impl Real for f32 {}
impl Real for f64 {}

/// Wraps an angle into `(-pi, pi]`.
pub fn wrap_angle<T: Real>(a: T) -> T {
    let tau = T::TAU();
    let mut w = a % tau;
    if w <= -T::PI() {
        w += tau;
    } else if w > T::PI() {
        w -= tau;
    }
    w
}
