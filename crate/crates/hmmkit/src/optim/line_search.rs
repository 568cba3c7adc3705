//! Strong Wolfe line search (bracket + zoom with quadratic interpolation and
//! bisection fallback). Failed objective evaluations act as +inf, steering the
//! bracket back toward feasible territory.

use super::problem::{axpy, dot, Problem};

pub(crate) const WOLFE_C1: f64 = 1e-4;
pub(crate) const WOLFE_C2: f64 = 0.9;
const MAX_BRACKET: usize = 60;
const MAX_ZOOM: usize = 50;

pub(crate) struct LsPoint {
    pub alpha: f64,
    pub f: f64,
    pub g: Vec<f64>,
}

struct Trial {
    alpha: f64,
    f: f64,
    dphi: Option<f64>,
}

fn phi(prob: &Problem, x: &[f64], dir: &[f64], alpha: f64) -> (Vec<f64>, f64) {
    let xt = axpy(x, alpha, dir);
    let f = prob.eval(&xt).unwrap_or(f64::INFINITY);
    (xt, f)
}

/// Search along `dir` from `x` for a step satisfying the strong Wolfe
/// conditions. `dphi0 = g0·dir` must be negative. Returns the accepted point
/// with its gradient, or `None` after the zoom budget is spent.
pub(crate) fn strong_wolfe(
    prob: &Problem,
    x: &[f64],
    dir: &[f64],
    f0: f64,
    dphi0: f64,
    alpha_init: f64,
) -> Option<LsPoint> {
    debug_assert!(dphi0 < 0.0);
    let mut prev = Trial {
        alpha: 0.0,
        f: f0,
        dphi: Some(dphi0),
    };
    let mut alpha = alpha_init.max(1e-16);
    for iter in 0..MAX_BRACKET {
        let (xt, f_a) = phi(prob, x, dir, alpha);
        if f_a > f0 + WOLFE_C1 * alpha * dphi0 || (f_a >= prev.f && iter > 0) {
            return zoom(
                prob,
                x,
                dir,
                f0,
                dphi0,
                prev,
                Trial {
                    alpha,
                    f: f_a,
                    dphi: None,
                },
            );
        }
        match prob.gradient(&xt) {
            Some(g) => {
                let dphi_a = dot(&g, dir);
                if dphi_a.abs() <= -WOLFE_C2 * dphi0 {
                    return refine(
                        prob,
                        x,
                        dir,
                        f0,
                        dphi0,
                        LsPoint { alpha, f: f_a, g },
                        &prev,
                    );
                }
                if dphi_a >= 0.0 {
                    return zoom(
                        prob,
                        x,
                        dir,
                        f0,
                        dphi0,
                        Trial {
                            alpha,
                            f: f_a,
                            dphi: Some(dphi_a),
                        },
                        prev,
                    );
                }
                prev = Trial {
                    alpha,
                    f: f_a,
                    dphi: Some(dphi_a),
                };
            }
            // gradient failed past this point: bracket into the near side
            None => {
                return zoom(
                    prob,
                    x,
                    dir,
                    f0,
                    dphi0,
                    prev,
                    Trial {
                        alpha,
                        f: f_a,
                        dphi: None,
                    },
                )
            }
        }
        alpha = (alpha * 2.0).min(1e10);
    }
    None
}

/// Interpolated trial step inside (lo, hi): exact for quadratic sections,
/// safeguarded toward bisection otherwise.
fn interp(lo: &Trial, hi: &Trial) -> f64 {
    let d = hi.alpha - lo.alpha;
    let mid = lo.alpha + 0.5 * d;
    let Some(dphi_lo) = lo.dphi else { return mid };
    if !hi.f.is_finite() || !lo.f.is_finite() {
        return mid;
    }
    let denom = hi.f - lo.f - dphi_lo * d;
    if denom <= 0.0 {
        return mid;
    }
    let t = lo.alpha - 0.5 * dphi_lo * d * d / denom;
    let (a, b) = if d > 0.0 {
        (lo.alpha, hi.alpha)
    } else {
        (hi.alpha, lo.alpha)
    };
    let margin = 0.02 * (b - a);
    if t.is_finite() && t > a + margin && t < b - margin {
        t
    } else {
        mid
    }
}

fn zoom(
    prob: &Problem,
    x: &[f64],
    dir: &[f64],
    f0: f64,
    dphi0: f64,
    mut lo: Trial,
    mut hi: Trial,
) -> Option<LsPoint> {
    for _ in 0..MAX_ZOOM {
        let t = interp(&lo, &hi);
        let (xt, f_t) = phi(prob, x, dir, t);
        if f_t > f0 + WOLFE_C1 * t * dphi0 || f_t >= lo.f {
            hi = Trial {
                alpha: t,
                f: f_t,
                dphi: None,
            };
        } else {
            let Some(g) = prob.gradient(&xt) else {
                hi = Trial {
                    alpha: t,
                    f: f_t,
                    dphi: None,
                };
                continue;
            };
            let dphi_t = dot(&g, dir);
            if dphi_t.abs() <= -WOLFE_C2 * dphi0 {
                return Some(LsPoint { alpha: t, f: f_t, g });
            }
            if dphi_t * (hi.alpha - lo.alpha) >= 0.0 {
                hi = Trial {
                    alpha: lo.alpha,
                    f: lo.f,
                    dphi: lo.dphi,
                };
            }
            lo = Trial {
                alpha: t,
                f: f_t,
                dphi: Some(dphi_t),
            };
        }
        if (hi.alpha - lo.alpha).abs() <= 1e-16 * lo.alpha.abs().max(1.0) {
            break;
        }
    }
    None
}

/// One-sided secant polish of an already-acceptable point: drives the
/// directional derivative toward zero (exact line minimum on quadratic
/// sections, which is what gives quasi-Newton and conjugate-gradient their
/// finite termination there). Every candidate must keep the Wolfe conditions;
/// the incumbent is returned otherwise.
fn refine(
    prob: &Problem,
    x: &[f64],
    dir: &[f64],
    f0: f64,
    dphi0: f64,
    mut best: LsPoint,
    anchor: &Trial,
) -> Option<LsPoint> {
    let mut prev_alpha = anchor.alpha;
    let mut prev_dphi = anchor.dphi.unwrap_or(dphi0);
    for _ in 0..3 {
        let dphi_best = dot(&best.g, dir);
        if dphi_best.abs() <= 0.1 * dphi0.abs() {
            break;
        }
        let denom = dphi_best - prev_dphi;
        if denom.abs() < 1e-300 {
            break;
        }
        let t = best.alpha - dphi_best * (best.alpha - prev_alpha) / denom;
        if !t.is_finite() || t <= 0.0 {
            break;
        }
        let (xt, f_t) = phi(prob, x, dir, t);
        if f_t > f0 + WOLFE_C1 * t * dphi0 {
            break;
        }
        let Some(g_t) = prob.gradient(&xt) else { break };
        let dphi_t = dot(&g_t, dir);
        if dphi_t.abs() > -WOLFE_C2 * dphi0 || f_t > best.f {
            break;
        }
        prev_alpha = best.alpha;
        prev_dphi = dphi_best;
        best = LsPoint {
            alpha: t,
            f: f_t,
            g: g_t,
        };
    }
    Some(best)
}
