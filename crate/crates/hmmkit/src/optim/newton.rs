//! Newton-type minimizer. Uses the supplied Hessian when available (otherwise
//! a direct BFGS approximation), adds a Levenberg-style ridge whenever the
//! matrix is not positive definite, and guarantees descent with a backtracking
//! line search.

use nalgebra::{Cholesky, DMatrix, DVector};

use super::problem::{dot, norm2, Problem};
use super::{finish, OptimOutcome, OptimStatus, OptimizerConfig};

const RIDGE_START: f64 = 1e-3;
const RIDGE_GROWTH: f64 = 10.0;
const RIDGE_MAX: f64 = 1e12;
const MAX_HALVINGS: usize = 40;

pub(crate) fn run(prob: &Problem, x0: &[f64], cfg: &OptimizerConfig) -> OptimOutcome {
    let n = x0.len();
    let mut x = x0.to_vec();
    let Some(mut f) = prob.eval(&x) else {
        return finish(prob, x, f64::INFINITY, 0, OptimStatus::EvaluationFailure);
    };
    let Some(mut g) = prob.gradient(&x) else {
        return finish(prob, x, f, 0, OptimStatus::EvaluationFailure);
    };
    // direct Hessian approximation when none is supplied
    let mut b_approx = if prob.has_supplied_hessian() {
        None
    } else {
        Some(DMatrix::<f64>::identity(n, n))
    };
    let mut iterations = 0u64;
    let tol = &cfg.tolerances;
    loop {
        if norm2(&g) <= tol.gradient * f.abs().max(1.0) {
            return finish(prob, x, f, iterations, OptimStatus::Converged);
        }
        if iterations >= cfg.max_iterations {
            return finish(prob, x, f, iterations, OptimStatus::MaxIterations);
        }
        let h = match &b_approx {
            Some(b) => b.clone(),
            None => match prob.hessian(&x) {
                Some(h) => h,
                None => return finish(prob, x, f, iterations, OptimStatus::EvaluationFailure),
            },
        };

        let gv = DVector::from_column_slice(&g);
        let mut mu = 0.0f64;
        let mut accepted: Option<(Vec<f64>, f64, f64)> = None; // (step, alpha, f_new)
        while mu <= RIDGE_MAX {
            let mut h_ridge = h.clone();
            for i in 0..n {
                h_ridge[(i, i)] += mu;
            }
            let Some(chol) = Cholesky::new(h_ridge) else {
                mu = if mu == 0.0 { RIDGE_START } else { mu * RIDGE_GROWTH };
                continue;
            };
            let p: Vec<f64> = (-chol.solve(&gv)).iter().copied().collect();
            if dot(&p, &g) >= 0.0 {
                mu = if mu == 0.0 { RIDGE_START } else { mu * RIDGE_GROWTH };
                continue;
            }
            let mut alpha = 1.0f64;
            let mut found = None;
            for _ in 0..=MAX_HALVINGS {
                let xt: Vec<f64> = x.iter().zip(&p).map(|(xi, pi)| xi + alpha * pi).collect();
                if let Some(ft) = prob.eval(&xt) {
                    if ft < f {
                        found = Some((p.iter().map(|v| v * alpha).collect(), alpha, ft));
                        break;
                    }
                }
                alpha *= 0.5;
            }
            match found {
                Some(hit) => {
                    accepted = Some(hit);
                    break;
                }
                // step rejected even after halving: raise the ridge
                None => mu = if mu == 0.0 { RIDGE_START } else { mu * RIDGE_GROWTH },
            }
        }
        let Some((step, _alpha, f_new)) = accepted else {
            return finish(prob, x, f, iterations, OptimStatus::LineSearchFailure);
        };
        for (xi, si) in x.iter_mut().zip(&step) {
            *xi += si;
        }
        let f_old = f;
        f = f_new;
        let Some(g_new) = prob.gradient(&x) else {
            return finish(prob, x, f, iterations + 1, OptimStatus::EvaluationFailure);
        };
        if let Some(b) = &mut b_approx {
            // direct BFGS update of the Hessian approximation
            let s = DVector::from_column_slice(&step);
            let y = DVector::from_fn(n, |i, _| g_new[i] - g[i]);
            let sy = (y.transpose() * &s)[(0, 0)];
            if sy > 1e-10 * s.norm() * y.norm() {
                let bs = &*b * &s;
                let sbs = (s.transpose() * &bs)[(0, 0)];
                if sbs > 0.0 {
                    *b -= (&bs * bs.transpose()) / sbs;
                }
                *b += (&y * y.transpose()) / sy;
            }
        }
        g = g_new;
        iterations += 1;

        if (f_old - f).abs() <= tol.relative_f * f.abs().max(1.0)
            || norm2(&step) <= tol.step * norm2(&x).max(1.0)
        {
            return finish(prob, x, f, iterations, OptimStatus::Converged);
        }
    }
}
