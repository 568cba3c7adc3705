//! Scalar traits shared by plain arithmetic and recorded (AD) arithmetic.

use std::ops::{Add, Div, Mul, Neg, Sub};

/// Numeric payload a tape can carry: plain `f64` or a forward-mode dual.
///
/// Tape nodes store their local partial derivatives as values of this type,
/// so a tape over [`crate::adcore::Dual`] propagates second-order information
/// through the reverse sweep.
pub trait TapeScalar:
    Copy
    + std::fmt::Debug
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
{
    fn from_f64(v: f64) -> Self;
    /// Primal (value) part.
    fn raw(&self) -> f64;
    fn is_zero(&self) -> bool;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn sqrt(self) -> Self;
    fn powf(self, e: f64) -> Self;

    fn zero() -> Self {
        Self::from_f64(0.0)
    }
    fn one() -> Self {
        Self::from_f64(1.0)
    }
}

impl TapeScalar for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn raw(&self) -> f64 {
        *self
    }
    fn is_zero(&self) -> bool {
        *self == 0.0
    }
    fn exp(self) -> Self {
        f64::exp(self)
    }
    fn ln(self) -> Self {
        f64::ln(self)
    }
    fn sqrt(self) -> Self {
        f64::sqrt(self)
    }
    fn powf(self, e: f64) -> Self {
        f64::powf(self, e)
    }
}

/// The interface numeric model code is written against. Implemented by plain
/// `f64` (fast path) and by tape-recorded values (derivative path), so a single
/// generic implementation of e.g. a likelihood serves both.
pub trait DiffScalar:
    Copy
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
{
    /// Plain value of this scalar.
    fn raw(&self) -> f64;
    /// A constant compatible with `self` (for recorded values: on the same tape).
    fn lift(&self, v: f64) -> Self;
    /// `self + c` for a plain constant `c`.
    fn add_c(self, c: f64) -> Self;
    /// `self * c` for a plain constant `c`.
    fn mul_c(self, c: f64) -> Self;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn sqrt(self) -> Self;
    fn powf(self, e: f64) -> Self;
    /// log(sum(exp(terms))), stable against over/underflow. `terms` must be nonempty.
    fn logsumexp(terms: &[Self]) -> Self;
}

pub(crate) fn logsumexp_f64(terms: &[f64]) -> f64 {
    debug_assert!(!terms.is_empty());
    let mut m = f64::NEG_INFINITY;
    for &t in terms {
        if t > m {
            m = t;
        }
    }
    if !m.is_finite() {
        // all -inf (sum is zero) or a NaN/inf is present; the naive sum
        // reproduces the correct limit / propagates the NaN
        return terms.iter().copied().map(f64::exp).sum::<f64>().ln();
    }
    let s: f64 = terms.iter().map(|&t| (t - m).exp()).sum();
    m + s.ln()
}

impl DiffScalar for f64 {
    fn raw(&self) -> f64 {
        *self
    }
    fn lift(&self, v: f64) -> Self {
        v
    }
    fn add_c(self, c: f64) -> Self {
        self + c
    }
    fn mul_c(self, c: f64) -> Self {
        self * c
    }
    fn exp(self) -> Self {
        f64::exp(self)
    }
    fn ln(self) -> Self {
        f64::ln(self)
    }
    fn sqrt(self) -> Self {
        f64::sqrt(self)
    }
    fn powf(self, e: f64) -> Self {
        f64::powf(self, e)
    }
    fn logsumexp(terms: &[Self]) -> Self {
        logsumexp_f64(terms)
    }
}
