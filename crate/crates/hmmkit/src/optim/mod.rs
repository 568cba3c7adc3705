//! Optimizer suite over working parameters: derivative-free (Nelder-Mead),
//! gradient-based (BFGS, Fletcher-Reeves CG), Hessian-based (Newton-type with
//! Levenberg ridge), the hybrid Nelder-Mead-then-Newton scheme, and the
//! top-level model fit driver.
//!
//! All optimizers share one convergence contract (gradient norm, relative
//! objective change, step size) so their iteration counts are comparable, and
//! one failure convention: a non-finite objective value is a rejection, never
//! a panic.

mod bfgs;
mod cg;
mod line_search;
mod nelder_mead;
mod newton;
mod problem;

pub(crate) use nelder_mead::SimplexState;
pub(crate) use problem::Problem;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::adcore;
use crate::adcore::DiffFunction;
use crate::error::{HmmError, Result};
use crate::inference::FitResult;
use crate::likelihood::{NllFunction, ObservationSeries};
use crate::params::{
    natural_from_working, working_from_natural, EmissionSpec, NaturalParams, WorkingParams,
};

/// Optimization algorithm selector.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    NelderMead,
    Bfgs,
    ConjugateGradient,
    NewtonType,
}

impl std::str::FromStr for Algorithm {
    type Err = HmmError;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "nelder_mead" | "neldermead" | "nm" => Ok(Algorithm::NelderMead),
            "bfgs" => Ok(Algorithm::Bfgs),
            "cg" | "conjugate_gradient" => Ok(Algorithm::ConjugateGradient),
            "newton" | "newton_type" => Ok(Algorithm::NewtonType),
            other => Err(HmmError::InvalidArgument(format!(
                "unknown optimizer `{other}` (expected nelder_mead, bfgs, cg, or newton)"
            ))),
        }
    }
}

/// Shared convergence tolerances.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Tolerances {
    pub gradient: f64,
    pub relative_f: f64,
    pub step: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Tolerances {
            gradient: 1e-8,
            relative_f: 1e-10,
            step: 1e-10,
        }
    }
}

/// Full optimizer configuration; parses from JSON and from CLI flags.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub algorithm: Algorithm,
    pub use_supplied_gradient: bool,
    pub use_supplied_hessian: bool,
    pub max_iterations: u64,
    pub tolerances: Tolerances,
}

impl Default for OptimizerConfig {
    /// Newton-type with supplied gradient and Hessian: the default used for
    /// every direct model fit.
    fn default() -> Self {
        OptimizerConfig {
            algorithm: Algorithm::NewtonType,
            use_supplied_gradient: true,
            use_supplied_hessian: true,
            max_iterations: 10_000,
            tolerances: Tolerances::default(),
        }
    }
}

impl OptimizerConfig {
    pub fn with_algorithm(algorithm: Algorithm) -> Self {
        let supports_grad = algorithm != Algorithm::NelderMead;
        OptimizerConfig {
            algorithm,
            use_supplied_gradient: supports_grad,
            use_supplied_hessian: algorithm == Algorithm::NewtonType,
            ..OptimizerConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_iterations < 1 {
            return Err(HmmError::InvalidArgument(
                "max_iterations must be at least 1".into(),
            ));
        }
        if self.use_supplied_hessian && self.algorithm != Algorithm::NewtonType {
            return Err(HmmError::InvalidArgument(
                "a supplied Hessian requires the newton algorithm".into(),
            ));
        }
        Ok(())
    }

    /// Routine name: base algorithm plus `_gr`/`_he`/`_grhe` suffixes for
    /// supplied derivatives it actually consumes.
    pub fn id(&self) -> String {
        let base = match self.algorithm {
            Algorithm::NelderMead => return "nelder_mead".into(),
            Algorithm::Bfgs => "bfgs",
            Algorithm::ConjugateGradient => "cg",
            Algorithm::NewtonType => "newton",
        };
        let gr = self.use_supplied_gradient;
        let he = self.use_supplied_hessian && self.algorithm == Algorithm::NewtonType;
        match (gr, he) {
            (true, true) => format!("{base}_grhe"),
            (true, false) => format!("{base}_gr"),
            (false, true) => format!("{base}_he"),
            (false, false) => base.into(),
        }
    }
}

/// Terminal state of an optimizer run.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimStatus {
    Converged,
    MaxIterations,
    EvaluationFailure,
    LineSearchFailure,
}

impl std::fmt::Display for OptimStatus {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            OptimStatus::Converged => "converged",
            OptimStatus::MaxIterations => "max_iterations",
            OptimStatus::EvaluationFailure => "evaluation_failure",
            OptimStatus::LineSearchFailure => "line_search_failure",
        };
        write!(f, "{s}")
    }
}

/// Result of one optimizer run. Iterations count accepted outer steps;
/// finite-difference gradient probes count as function evaluations.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct OptimOutcome {
    pub x_final: Vec<f64>,
    pub f_final: f64,
    pub iterations: u64,
    pub function_evals: u64,
    pub gradient_evals: u64,
    pub hessian_evals: u64,
    pub status: OptimStatus,
}

pub(crate) fn finish(
    prob: &Problem,
    x: Vec<f64>,
    f: f64,
    iterations: u64,
    status: OptimStatus,
) -> OptimOutcome {
    let (nf, ng, nh) = prob.counts();
    OptimOutcome {
        x_final: x,
        f_final: f,
        iterations,
        function_evals: nf,
        gradient_evals: ng,
        hessian_evals: nh,
        status,
    }
}

pub type ValueClosure<'a> = &'a dyn Fn(&[f64]) -> f64;
pub type GradClosure<'a> = &'a dyn Fn(&[f64]) -> Option<Vec<f64>>;
pub type HessClosure<'a> = &'a dyn Fn(&[f64]) -> Option<DMatrix<f64>>;

/// Downhill simplex minimization of `f` from `x0`.
pub fn nelder_mead(f: ValueClosure, x0: &[f64], cfg: &OptimizerConfig) -> OptimOutcome {
    let prob = Problem::new(f, None, None);
    let Some(mut state) = SimplexState::init(&prob, x0) else {
        return finish(
            &prob,
            x0.to_vec(),
            f64::INFINITY,
            0,
            OptimStatus::EvaluationFailure,
        );
    };
    let tol = &cfg.tolerances;
    let mut iterations = 0u64;
    let status = loop {
        let (best, f_best) = state.best();
        if state.diameter() <= tol.step * problem::norm2(best).max(1.0)
            && state.f_spread() <= tol.relative_f * f_best.abs().max(1.0)
        {
            break OptimStatus::Converged;
        }
        if iterations >= cfg.max_iterations {
            break OptimStatus::MaxIterations;
        }
        state.step(&prob);
        iterations += 1;
    };
    let (best, f_best) = state.best();
    finish(&prob, best.to_vec(), f_best, iterations, status)
}

/// Nelder-Mead for exactly `budget` iterations with no convergence stop;
/// the first phase of the hybrid scheme.
pub(crate) fn nelder_mead_budget(
    prob: &Problem,
    x0: &[f64],
    budget: u64,
) -> Option<(SimplexState, u64)> {
    let mut state = SimplexState::init(prob, x0)?;
    for _ in 0..budget {
        state.step(prob);
    }
    Some((state, budget))
}

/// BFGS minimization; central finite differences stand in for a missing
/// gradient callback.
pub fn bfgs(
    f: ValueClosure,
    grad: Option<GradClosure>,
    x0: &[f64],
    cfg: &OptimizerConfig,
) -> OptimOutcome {
    let prob = Problem::new(f, grad, None);
    bfgs::run(&prob, x0, cfg)
}

/// Fletcher-Reeves conjugate gradients with restarts every n iterations.
pub fn conjugate_gradient(
    f: ValueClosure,
    grad: Option<GradClosure>,
    x0: &[f64],
    cfg: &OptimizerConfig,
) -> OptimOutcome {
    let prob = Problem::new(f, grad, None);
    cg::run(&prob, x0, cfg)
}

/// Newton-type minimization with a Levenberg ridge fallback; a BFGS
/// approximation replaces a missing Hessian callback.
pub fn newton_type(
    f: ValueClosure,
    grad: Option<GradClosure>,
    hess: Option<HessClosure>,
    x0: &[f64],
    cfg: &OptimizerConfig,
) -> OptimOutcome {
    let prob = Problem::new(f, grad, hess);
    newton::run(&prob, x0, cfg)
}

/// Hybrid scheme: exactly `nm_budget` Nelder-Mead iterations (no convergence
/// stop), then a Newton-type run from the incumbent best point. Iteration and
/// evaluation counts aggregate both phases.
pub fn hybrid(
    f: ValueClosure,
    grad: Option<GradClosure>,
    hess: Option<HessClosure>,
    x0: &[f64],
    nm_budget: u64,
    cfg: &OptimizerConfig,
) -> OptimOutcome {
    assert!(nm_budget >= 1, "hybrid requires nm_budget >= 1");
    let nm_prob = Problem::new(f, None, None);
    let Some((state, nm_iters)) = nelder_mead_budget(&nm_prob, x0, nm_budget) else {
        return finish(
            &nm_prob,
            x0.to_vec(),
            f64::INFINITY,
            0,
            OptimStatus::EvaluationFailure,
        );
    };
    let (best, _) = state.best();
    let best = best.to_vec();
    let (nm_f, _, _) = nm_prob.counts();
    let mut outcome = newton_type(f, grad, hess, &best, cfg);
    outcome.iterations += nm_iters;
    outcome.function_evals += nm_f;
    outcome
}

/// Fit a model: transform the initial values to working space, minimize the
/// negative log-likelihood with the configured optimizer, sort states by
/// ascending emission location, and evaluate the Hessian at the optimum.
///
/// Optimization failures are data, not errors: the returned result carries
/// `converged = false` and the terminal status. Only invalid inputs
/// (family/support/shape mismatches) produce an `Err`.
pub fn fit(
    spec: &EmissionSpec,
    obs: &ObservationSeries,
    init: &NaturalParams,
    optcfg: &OptimizerConfig,
) -> Result<FitResult> {
    optcfg.validate()?;
    if init.spec() != *spec {
        return Err(HmmError::Dimension(format!(
            "initial values are for a {}-state {} model, expected {}-state {}",
            init.m(),
            init.emission().family(),
            spec.m(),
            spec.family()
        )));
    }
    let nllfn = NllFunction::new(obs, spec)?;
    let w0 = working_from_natural(init, spec)?;

    let value_fn = |x: &[f64]| nllfn.eval(x);
    let grad_fn = |x: &[f64]| adcore::gradient(&nllfn, x).ok();
    let hess_fn = |x: &[f64]| adcore::hessian(&nllfn, x).ok();
    let grad_opt: Option<GradClosure> = if optcfg.use_supplied_gradient {
        Some(&grad_fn)
    } else {
        None
    };
    let hess_opt: Option<HessClosure> = if optcfg.use_supplied_hessian {
        Some(&hess_fn)
    } else {
        None
    };

    let outcome = match optcfg.algorithm {
        Algorithm::NelderMead => nelder_mead(&value_fn, w0.as_slice(), optcfg),
        Algorithm::Bfgs => bfgs(&value_fn, grad_opt, w0.as_slice(), optcfg),
        Algorithm::ConjugateGradient => {
            conjugate_gradient(&value_fn, grad_opt, w0.as_slice(), optcfg)
        }
        Algorithm::NewtonType => {
            newton_type(&value_fn, grad_opt, hess_opt, w0.as_slice(), optcfg)
        }
    };
    Ok(assemble_fit(spec, &nllfn, init, &w0, outcome, optcfg.id()))
}

fn assemble_fit(
    spec: &EmissionSpec,
    nllfn: &NllFunction,
    init: &NaturalParams,
    w0: &WorkingParams,
    outcome: OptimOutcome,
    optimizer_id: String,
) -> FitResult {
    let converged = outcome.status == OptimStatus::Converged;
    // Map the final iterate back to natural space and relabel states in
    // ascending emission order. Failed runs can end at points outside the
    // representable region; fall back to consistent values there.
    let mapped = WorkingParams::new(outcome.x_final.clone(), spec)
        .and_then(|w| natural_from_working(&w, spec).map(|n| (w, n)));
    let (working_hat, natural_hat, nll_value, hessian_working) = match mapped {
        Ok((w_raw, natural)) => {
            let (sorted, _) = natural.sort_states();
            match working_from_natural(&sorted, spec) {
                Ok(w_sorted) => {
                    let nll_value =
                        adcore::value(nllfn, w_sorted.as_slice()).unwrap_or(outcome.f_final);
                    let hess = adcore::hessian(nllfn, w_sorted.as_slice()).ok();
                    (w_sorted, sorted, nll_value, hess)
                }
                Err(_) => {
                    let hess = adcore::hessian(nllfn, w_raw.as_slice()).ok();
                    (w_raw, natural, outcome.f_final, hess)
                }
            }
        }
        Err(_) => (w0.clone(), init.clone(), outcome.f_final, None),
    };
    FitResult {
        working_hat,
        natural_hat,
        nll: nll_value,
        converged,
        status: outcome.status,
        iterations: outcome.iterations,
        function_evals: outcome.function_evals,
        gradient_evals: outcome.gradient_evals,
        hessian_evals: outcome.hessian_evals,
        optimizer_id,
        hessian_working,
        cov_natural: None,
    }
}
