//! Forward-mode dual numbers, used as the tape payload when extracting
//! second derivatives (forward-over-reverse).

use std::ops::{Add, Div, Mul, Neg, Sub};

use super::scalar::TapeScalar;

/// A first-order dual number `re + dx·ε` with `ε² = 0`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Dual {
    pub re: f64,
    pub dx: f64,
}

impl Dual {
    pub fn new(re: f64, dx: f64) -> Self {
        Dual { re, dx }
    }

    pub fn constant(re: f64) -> Self {
        Dual { re, dx: 0.0 }
    }
}

impl Add for Dual {
    type Output = Dual;
    fn add(self, rhs: Dual) -> Dual {
        Dual::new(self.re + rhs.re, self.dx + rhs.dx)
    }
}

impl Sub for Dual {
    type Output = Dual;
    fn sub(self, rhs: Dual) -> Dual {
        Dual::new(self.re - rhs.re, self.dx - rhs.dx)
    }
}

impl Mul for Dual {
    type Output = Dual;
    fn mul(self, rhs: Dual) -> Dual {
        Dual::new(self.re * rhs.re, self.re * rhs.dx + self.dx * rhs.re)
    }
}

impl Div for Dual {
    type Output = Dual;
    fn div(self, rhs: Dual) -> Dual {
        let q = self.re / rhs.re;
        Dual::new(q, (self.dx - q * rhs.dx) / rhs.re)
    }
}

impl Neg for Dual {
    type Output = Dual;
    fn neg(self) -> Dual {
        Dual::new(-self.re, -self.dx)
    }
}

impl TapeScalar for Dual {
    fn from_f64(v: f64) -> Self {
        Dual::constant(v)
    }
    fn raw(&self) -> f64 {
        self.re
    }
    fn is_zero(&self) -> bool {
        self.re == 0.0 && self.dx == 0.0
    }
    fn exp(self) -> Self {
        let e = self.re.exp();
        Dual::new(e, self.dx * e)
    }
    fn ln(self) -> Self {
        Dual::new(self.re.ln(), self.dx / self.re)
    }
    fn sqrt(self) -> Self {
        let s = self.re.sqrt();
        Dual::new(s, 0.5 * self.dx / s)
    }
    fn powf(self, e: f64) -> Self {
        Dual::new(self.re.powf(e), e * self.re.powf(e - 1.0) * self.dx)
    }
}
