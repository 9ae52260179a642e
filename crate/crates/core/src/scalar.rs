//! Scalar abstraction shared by every numerical routine in the crate.

use nalgebra::RealField;
use num_complex::Complex;
use num_traits::{FloatConst, FromPrimitive, ToPrimitive};

/// Real floating-point scalar (`f32` or `f64`).
///
/// Math functions come from [`RealField`]; constants and conversions from
/// `num-traits`.
pub trait Real:
    RealField + Copy + FloatConst + FromPrimitive + ToPrimitive + Send + Sync + 'static
{
    /// Converts an `f64` literal.
    #[inline]
    fn lit(x: f64) -> Self {
        <Self as FromPrimitive>::from_f64(x).expect("representable literal")
    }

    #[inline]
    fn from_usize_lossy(n: usize) -> Self {
        <Self as FromPrimitive>::from_usize(n).expect("representable integer")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        <Self as ToPrimitive>::to_f64(&self).unwrap_or(f64::NAN)
    }

    /// Machine epsilon of the type.
    fn epsilon() -> Self;
}

impl Real for f32 {
    fn epsilon() -> Self {
        f32::EPSILON
    }
}

impl Real for f64 {
    fn epsilon() -> Self {
        f64::EPSILON
    }
}

/// Complex scalar over [`Real`].
pub type Cx<T> = Complex<T>;

#[inline]
pub fn cx<T: Real>(re: T, im: T) -> Cx<T> {
    Complex::new(re, im)
}

#[inline]
pub fn re<T: Real>(x: T) -> Cx<T> {
    Complex::new(x, T::zero())
}

#[inline]
pub fn imag_unit<T: Real>() -> Cx<T> {
    Complex::new(T::zero(), T::one())
}

/// `|z|` without going through the inherent `num_complex` methods, which
/// require `num_traits::Float`.
#[inline]
pub fn modulus<T: Real>(z: Cx<T>) -> T {
    z.re.hypot(z.im)
}

/// `exp(z)` for [`Real`] scalars.
#[inline]
pub fn cexp<T: Real>(z: Cx<T>) -> Cx<T> {
    let (s, c) = z.im.sin_cos();
    let m = z.re.exp();
    Complex::new(m * c, m * s)
}

#[inline]
pub fn is_finite<T: Real>(z: Cx<T>) -> bool {
    z.re.is_finite() && z.im.is_finite()
}
