//! Scalar abstraction shared by every numerical routine in the crate.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

/// Floating point scalar the simulators, solvers and estimators are generic over.
pub trait Real:
    Float + FromPrimitive + ToPrimitive + NumAssign + Sum + Debug + Display + Default + Send + Sync + 'static
{
    /// Draw from N(0, 1).
    fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> Self;

    /// Draw from the uniform distribution on the half-open interval [0, 1).
    fn unit_uniform<R: Rng + ?Sized>(rng: &mut R) -> Self;

    /// Literal conversion; every `f64` is representable (possibly rounded).
    #[inline]
    fn lit(value: f64) -> Self {
        Self::from_f64(value).expect("f64 literal representable")
    }

    #[inline]
    fn from_usize_lossy(value: usize) -> Self {
        Self::from_usize(value).expect("usize representable")
    }

    #[inline]
    fn to_f64_lossy(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }

    #[inline]
    fn half() -> Self {
        Self::lit(0.5)
    }

    #[inline]
    fn two() -> Self {
        Self::lit(2.0)
    }
}

impl Real for f64 {
    #[inline]
    fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> Self {
        StandardNormal.sample(rng)
    }

    #[inline]
    fn unit_uniform<R: Rng + ?Sized>(rng: &mut R) -> Self {
        rng.random::<f64>()
    }
}

impl Real for f32 {
    #[inline]
    fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> Self {
        StandardNormal.sample(rng)
    }

    #[inline]
    fn unit_uniform<R: Rng + ?Sized>(rng: &mut R) -> Self {
        rng.random::<f32>()
    }
}

/// Monte Carlo estimate with its standard error.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Estimate<F> {
    pub mean: F,
    pub std_error: F,
}

impl<F: Real> Estimate<F> {
    /// Sample mean and standard error of the mean, accumulated in input order.
    pub fn from_samples(samples: &[F]) -> Option<Self> {
        let n = samples.len();
        if n == 0 {
            return None;
        }
        let nf = F::from_usize_lossy(n);
        let mean = samples.iter().copied().sum::<F>() / nf;
        let std_error = if n > 1 {
            let ss: F = samples.iter().map(|&s| (s - mean) * (s - mean)).sum();
            (ss / F::from_usize_lossy(n - 1) / nf).sqrt()
        } else {
            F::zero()
        };
        Some(Self { mean, std_error })
    }

    /// Is `target` inside `mean ± k·SE + slack`?
    pub fn covers(&self, target: F, k: F, slack: F) -> bool {
        (self.mean - target).abs() <= k * self.std_error + slack
    }
}

impl<F: Display> Display for Estimate<F> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{} ± {}", self.mean, self.std_error)
    }
}
