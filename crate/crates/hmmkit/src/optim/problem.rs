//! Objective wrapper shared by all optimizers: evaluation counting, the
//! non-finite-as-rejection convention, and finite-difference fallbacks when no
//! gradient is supplied.

use std::cell::Cell;

use nalgebra::DMatrix;

pub(crate) type ValueFn<'a> = &'a dyn Fn(&[f64]) -> f64;
pub(crate) type GradFn<'a> = &'a dyn Fn(&[f64]) -> Option<Vec<f64>>;
pub(crate) type HessFn<'a> = &'a dyn Fn(&[f64]) -> Option<DMatrix<f64>>;

pub(crate) struct Problem<'a> {
    f: ValueFn<'a>,
    grad: Option<GradFn<'a>>,
    hess: Option<HessFn<'a>>,
    n_f: Cell<u64>,
    n_g: Cell<u64>,
    n_h: Cell<u64>,
}

impl<'a> Problem<'a> {
    pub fn new(f: ValueFn<'a>, grad: Option<GradFn<'a>>, hess: Option<HessFn<'a>>) -> Self {
        Problem {
            f,
            grad,
            hess,
            n_f: Cell::new(0),
            n_g: Cell::new(0),
            n_h: Cell::new(0),
        }
    }

    /// Objective value; `None` signals an evaluation failure (NaN/inf).
    pub fn eval(&self, x: &[f64]) -> Option<f64> {
        self.n_f.set(self.n_f.get() + 1);
        let v = (self.f)(x);
        v.is_finite().then_some(v)
    }

    /// Gradient: supplied when available, otherwise central finite differences
    /// with step `sqrt(eps)·max(1, |x_i|)`; those probes count as function
    /// evaluations.
    pub fn gradient(&self, x: &[f64]) -> Option<Vec<f64>> {
        if let Some(g) = self.grad {
            self.n_g.set(self.n_g.get() + 1);
            let v = g(x)?;
            if v.iter().all(|c| c.is_finite()) {
                return Some(v);
            }
            return None;
        }
        let h0 = f64::EPSILON.sqrt();
        let mut g = vec![0.0; x.len()];
        let mut xp = x.to_vec();
        for i in 0..x.len() {
            let h = h0 * x[i].abs().max(1.0);
            xp[i] = x[i] + h;
            let fp = self.eval(&xp)?;
            xp[i] = x[i] - h;
            let fm = self.eval(&xp)?;
            xp[i] = x[i];
            g[i] = (fp - fm) / (2.0 * h);
            if !g[i].is_finite() {
                return None;
            }
        }
        Some(g)
    }

    /// Supplied Hessian, if any was configured.
    pub fn hessian(&self, x: &[f64]) -> Option<DMatrix<f64>> {
        let h = self.hess?;
        self.n_h.set(self.n_h.get() + 1);
        let m = h(x)?;
        m.iter().all(|v| v.is_finite()).then_some(m)
    }

    pub fn has_supplied_hessian(&self) -> bool {
        self.hess.is_some()
    }

    pub fn counts(&self) -> (u64, u64, u64) {
        (self.n_f.get(), self.n_g.get(), self.n_h.get())
    }
}

pub(crate) fn norm2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn axpy(x: &[f64], alpha: f64, d: &[f64]) -> Vec<f64> {
    x.iter().zip(d).map(|(xi, di)| xi + alpha * di).collect()
}
