//! Quasi-Newton minimizer with the inverse-Hessian BFGS update and a strong
//! Wolfe line search.

use nalgebra::{DMatrix, DVector};

use super::line_search::strong_wolfe;
use super::problem::{dot, norm2, Problem};
use super::{finish, OptimOutcome, OptimStatus, OptimizerConfig};

pub(crate) fn run(prob: &Problem, x0: &[f64], cfg: &OptimizerConfig) -> OptimOutcome {
    let n = x0.len();
    let mut x = x0.to_vec();
    let Some(mut f) = prob.eval(&x) else {
        return finish(prob, x, f64::INFINITY, 0, OptimStatus::EvaluationFailure);
    };
    let Some(mut g) = prob.gradient(&x) else {
        return finish(prob, x, f, 0, OptimStatus::EvaluationFailure);
    };
    let mut h_inv = DMatrix::<f64>::identity(n, n);
    let mut iterations = 0u64;
    let tol = &cfg.tolerances;
    loop {
        if norm2(&g) <= tol.gradient * f.abs().max(1.0) {
            return finish(prob, x, f, iterations, OptimStatus::Converged);
        }
        if iterations >= cfg.max_iterations {
            return finish(prob, x, f, iterations, OptimStatus::MaxIterations);
        }
        let gv = DVector::from_column_slice(&g);
        let mut p: Vec<f64> = (-(&h_inv * &gv)).iter().copied().collect();
        let mut dphi0 = dot(&p, &g);
        if dphi0 >= 0.0 {
            // approximation lost positive definiteness: restart
            h_inv = DMatrix::identity(n, n);
            p = g.iter().map(|v| -v).collect();
            dphi0 = dot(&p, &g);
            if dphi0 >= 0.0 {
                return finish(prob, x, f, iterations, OptimStatus::Converged);
            }
        }
        let Some(ls) = strong_wolfe(prob, &x, &p, f, dphi0, 1.0) else {
            return finish(prob, x, f, iterations, OptimStatus::LineSearchFailure);
        };
        let s: Vec<f64> = p.iter().map(|v| v * ls.alpha).collect();
        let y: Vec<f64> = ls.g.iter().zip(&g).map(|(a, b)| a - b).collect();
        let f_old = f;
        for (xi, si) in x.iter_mut().zip(&s) {
            *xi += si;
        }
        f = ls.f;
        g = ls.g;
        iterations += 1;

        let sy = dot(&s, &y);
        if sy > 1e-10 * norm2(&s) * norm2(&y) {
            let rho = 1.0 / sy;
            let sv = DVector::from_column_slice(&s);
            let yv = DVector::from_column_slice(&y);
            let hy = &h_inv * &yv;
            let yhy = (yv.transpose() * &hy)[(0, 0)];
            h_inv -= rho * (&sv * hy.transpose() + &hy * sv.transpose());
            h_inv += (rho * rho * yhy + rho) * (&sv * sv.transpose());
        }

        if (f_old - f).abs() <= tol.relative_f * f.abs().max(1.0)
            || norm2(&s) <= tol.step * norm2(&x).max(1.0)
        {
            return finish(prob, x, f, iterations, OptimStatus::Converged);
        }
    }
}
