//! Fletcher-Reeves conjugate gradients with a restart every n iterations and
//! the shared strong Wolfe line search.

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
    let mut d: Vec<f64> = g.iter().map(|v| -v).collect();
    let mut gg = dot(&g, &g);
    let mut since_restart = 0usize;
    let mut iterations = 0u64;
    let tol = &cfg.tolerances;
    loop {
        if norm2(&g) <= tol.gradient * f.abs().max(1.0) {
            return finish(prob, x, f, iterations, OptimStatus::Converged);
        }
        if iterations >= cfg.max_iterations {
            return finish(prob, x, f, iterations, OptimStatus::MaxIterations);
        }
        let mut dphi0 = dot(&d, &g);
        if dphi0 >= 0.0 {
            d = g.iter().map(|v| -v).collect();
            dphi0 = dot(&d, &g);
            since_restart = 0;
        }
        let Some(ls) = strong_wolfe(prob, &x, &d, f, dphi0, 1.0) else {
            return finish(prob, x, f, iterations, OptimStatus::LineSearchFailure);
        };
        let step: Vec<f64> = d.iter().map(|v| v * ls.alpha).collect();
        for (xi, si) in x.iter_mut().zip(&step) {
            *xi += si;
        }
        let f_old = f;
        f = ls.f;
        let g_new = ls.g;
        let gg_new = dot(&g_new, &g_new);
        since_restart += 1;
        iterations += 1;
        let beta = if since_restart >= n {
            since_restart = 0;
            0.0
        } else {
            gg_new / gg
        };
        d = g_new
            .iter()
            .zip(&d)
            .map(|(gi, di)| -gi + beta * di)
            .collect();
        g = g_new;
        gg = gg_new;

        if (f_old - f).abs() <= tol.relative_f * f.abs().max(1.0)
            || norm2(&step) <= tol.step * norm2(&x).max(1.0)
        {
            return finish(prob, x, f, iterations, OptimStatus::Converged);
        }
    }
}
