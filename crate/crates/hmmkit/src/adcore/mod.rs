//! Automatic differentiation engine: exact gradients and Hessians of scalar
//! functions of a real vector.
//!
//! Gradients come from a reverse-mode tape rebuilt on every call; Hessians are
//! obtained forward-over-reverse by running the same tape over dual numbers,
//! one direction per column. Values agree with plain arithmetic to the last
//! ulp because the recorded operations perform literally the same flops.

mod dual;
pub mod opcount;
mod scalar;
mod tape;

pub use dual::Dual;
pub use scalar::{DiffScalar, TapeScalar};
pub use tape::{Ad, Tape};

use nalgebra::DMatrix;

use crate::error::{HmmError, Result};

/// A deterministic, side-effect-free scalar function of a real vector,
/// expressed generically so it can be evaluated with plain numbers or
/// recorded for differentiation.
pub trait DiffFunction {
    /// Input dimension.
    fn dim(&self) -> usize;
    /// Evaluate at `x`. Must not depend on anything but `x` and `self`.
    fn eval<S: DiffScalar>(&self, x: &[S]) -> S;
}

fn check_dim<F: DiffFunction + ?Sized>(f: &F, x: &[f64]) -> Result<()> {
    if x.len() != f.dim() {
        return Err(HmmError::Dimension(format!(
            "function expects {} inputs, got {}",
            f.dim(),
            x.len()
        )));
    }
    if let Some(i) = x.iter().position(|v| !v.is_finite()) {
        return Err(HmmError::Domain(format!(
            "input component {i} is not finite: {}",
            x[i]
        )));
    }
    Ok(())
}

/// Plain evaluation of `f` at `x`.
pub fn value<F: DiffFunction + ?Sized>(f: &F, x: &[f64]) -> Result<f64> {
    check_dim(f, x)?;
    let v = f.eval(x);
    if v.is_nan() {
        return Err(HmmError::NonFinite(
            "function value is NaN at the requested point".into(),
        ));
    }
    Ok(v)
}

/// Exact gradient of `f` at `x` by one reverse sweep.
pub fn gradient<F: DiffFunction + ?Sized>(f: &F, x: &[f64]) -> Result<Vec<f64>> {
    Ok(value_and_gradient(f, x)?.1)
}

/// Value and gradient from a single recorded evaluation.
pub fn value_and_gradient<F: DiffFunction + ?Sized>(f: &F, x: &[f64]) -> Result<(f64, Vec<f64>)> {
    check_dim(f, x)?;
    let tape: Tape<f64> = Tape::with_capacity(2 * x.len() + 16);
    let vars: Vec<Ad<'_, f64>> = x.iter().map(|&v| tape.var(v)).collect();
    let out = f.eval(&vars);
    let v = out.value();
    if v.is_nan() {
        return Err(HmmError::NonFinite(
            "function value is NaN at the requested point".into(),
        ));
    }
    let g = tape.gradient(out, &vars);
    let g: Vec<f64> = g.into_iter().collect();
    if let Some(i) = g.iter().position(|c| !c.is_finite()) {
        return Err(HmmError::NonFinite(format!(
            "gradient component {i} is not finite (non-differentiable elementary \
             operation or overflow at the evaluation point)"
        )));
    }
    Ok((v, g))
}

/// Exact Hessian of `f` at `x`, forward-over-reverse one column at a time,
/// then symmetrized as (H + Hᵀ)/2.
pub fn hessian<F: DiffFunction + ?Sized>(f: &F, x: &[f64]) -> Result<DMatrix<f64>> {
    check_dim(f, x)?;
    let n = x.len();
    let mut h = DMatrix::<f64>::zeros(n, n);
    for j in 0..n {
        let tape: Tape<Dual> = Tape::with_capacity(2 * n + 16);
        let vars: Vec<Ad<'_, Dual>> = x
            .iter()
            .enumerate()
            .map(|(i, &v)| tape.var(Dual::new(v, if i == j { 1.0 } else { 0.0 })))
            .collect();
        let out = f.eval(&vars);
        if out.value().re.is_nan() {
            return Err(HmmError::NonFinite(
                "function value is NaN at the requested point".into(),
            ));
        }
        let g = tape.gradient(out, &vars);
        for (i, gi) in g.iter().enumerate() {
            h[(i, j)] = gi.dx;
        }
    }
    // mandated symmetrization
    let ht = h.transpose();
    let h = (h + ht) * 0.5;
    if h.iter().any(|v| !v.is_finite()) {
        return Err(HmmError::NonFinite(
            "Hessian contains non-finite entries".into(),
        ));
    }
    Ok(h)
}
