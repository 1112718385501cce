//! Scalar abstraction: all core math is generic over `f32`/`f64`.

use rand::Rng;

/// Floating-point scalar the numeric core is generic over.
///
/// `f32` is the training/inference default; `f64` backs the gradient checks
/// and the high-precision oracles in tests.
pub trait Scalar:
    num_traits::Float
    + ndarray::ScalarOperand
    + std::ops::AddAssign
    + std::ops::MulAssign
    + std::ops::SubAssign
    + std::fmt::Debug
    + std::fmt::Display
    + Send
    + Sync
    + 'static
{
    fn from_f64(x: f64) -> Self;
    fn to_f64_(self) -> f64;

    /// Draws a standard normal variate. Sampling happens in `f64` so the
    /// stream of draws is identical across scalar types.
    fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> Self {
        // Box-Muller on two uniform draws; avoids a rand_distr dependency and
        // keeps the draw sequence under our own control.
        let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
        let u2: f64 = rng.gen::<f64>();
        let z = (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
        Self::from_f64(z)
    }
}

impl Scalar for f32 {
    fn from_f64(x: f64) -> Self {
        x as f32
    }
    fn to_f64_(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn from_f64(x: f64) -> Self {
        x
    }
    fn to_f64_(self) -> f64 {
        self
    }
}
