//! Elementary-operation counter used to assert the reverse-mode work bound.
//!
//! The tape charges the counter for every elementary operation it performs
//! (forward recording and reverse accumulation). [`Counted`] is a plain-value
//! wrapper that charges one unit per scalar operation, giving a comparable
//! measure of the work of an uninstrumented evaluation.

use std::cell::Cell;
use std::ops::{Add, Div, Mul, Neg, Sub};

use super::scalar::{logsumexp_f64, DiffScalar};

thread_local! {
    static OPS: Cell<u64> = const { Cell::new(0) };
}

pub fn reset() {
    OPS.with(|c| c.set(0));
}

pub fn current() -> u64 {
    OPS.with(|c| c.get())
}

pub(crate) fn add(n: u64) {
    OPS.with(|c| c.set(c.get() + n));
}

/// `f64` wrapper whose every operation increments the thread-local counter.
#[derive(Clone, Copy, Debug, PartialEq, PartialOrd)]
pub struct Counted(pub f64);

impl Add for Counted {
    type Output = Counted;
    fn add(self, rhs: Counted) -> Counted {
        add(1);
        Counted(self.0 + rhs.0)
    }
}

impl Sub for Counted {
    type Output = Counted;
    fn sub(self, rhs: Counted) -> Counted {
        add(1);
        Counted(self.0 - rhs.0)
    }
}

impl Mul for Counted {
    type Output = Counted;
    fn mul(self, rhs: Counted) -> Counted {
        add(1);
        Counted(self.0 * rhs.0)
    }
}

impl Div for Counted {
    type Output = Counted;
    fn div(self, rhs: Counted) -> Counted {
        add(1);
        Counted(self.0 / rhs.0)
    }
}

impl Neg for Counted {
    type Output = Counted;
    fn neg(self) -> Counted {
        add(1);
        Counted(-self.0)
    }
}

impl DiffScalar for Counted {
    fn raw(&self) -> f64 {
        self.0
    }
    fn lift(&self, v: f64) -> Self {
        Counted(v)
    }
    fn add_c(self, c: f64) -> Self {
        add(1);
        Counted(self.0 + c)
    }
    fn mul_c(self, c: f64) -> Self {
        add(1);
        Counted(self.0 * c)
    }
    fn exp(self) -> Self {
        add(1);
        Counted(self.0.exp())
    }
    fn ln(self) -> Self {
        add(1);
        Counted(self.0.ln())
    }
    fn sqrt(self) -> Self {
        add(1);
        Counted(self.0.sqrt())
    }
    fn powf(self, e: f64) -> Self {
        add(1);
        Counted(self.0.powf(e))
    }
    fn logsumexp(terms: &[Self]) -> Self {
        // max scan + shift/exp/sum + final log
        add(3 * terms.len() as u64 + 1);
        let vals: Vec<f64> = terms.iter().map(|t| t.0).collect();
        Counted(logsumexp_f64(&vals))
    }
}
