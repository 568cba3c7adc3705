//! Post-fit uncertainty machinery: smoothing probabilities with delta-method
//! standard errors, the natural-parameter covariance, Wald-type confidence
//! intervals with boundary clipping, the parametric bootstrap, and AIC/BIC.
//!
//! Smoothing probabilities are treated as functions of the parameters
//! conditional on the one observed series (not as expectations over
//! hypothetical resampled data sets): the interval for cell (i, t) quantifies
//! estimation uncertainty in `P(C_t = i | x_1..x_T)` for this series.

use nalgebra::{Cholesky, DMatrix};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adcore::{self, DiffFunction, DiffScalar};
use crate::error::{HmmError, Result};
use crate::likelihood::{
    forward_backward, log_factorial_table, ObservationSeries, SmoothingCellFn,
};
use crate::optim::{OptimStatus, OptimizerConfig};
use crate::params::{
    flat_param_names, natural_values_from_working, EmissionFamily, EmissionSpec, NaturalParams,
    WorkingParams,
};
use crate::stats::{derive_seed, quantile};

/// Maximum-likelihood fit of one model to one series.
#[derive(Clone, Debug)]
pub struct FitResult {
    pub working_hat: WorkingParams,
    pub natural_hat: NaturalParams,
    pub nll: f64,
    pub converged: bool,
    pub status: OptimStatus,
    pub iterations: u64,
    pub function_evals: u64,
    pub gradient_evals: u64,
    pub hessian_evals: u64,
    pub optimizer_id: String,
    /// Hessian of the negative log-likelihood over working parameters at the
    /// optimum; absent only when the final point was not evaluable.
    pub hessian_working: Option<DMatrix<f64>>,
    /// Delta-method covariance over natural parameters; filled on demand.
    pub cov_natural: Option<DMatrix<f64>>,
}

#[derive(Serialize, Deserialize)]
struct FitResultJson {
    optimizer_id: String,
    converged: bool,
    status: OptimStatus,
    iterations: u64,
    function_evals: u64,
    gradient_evals: u64,
    hessian_evals: u64,
    nll: Option<f64>,
    model: serde_json::Value,
    working: Vec<f64>,
    hessian_working: Option<Vec<Vec<f64>>>,
    cov_natural: Option<Vec<Vec<f64>>>,
}

fn matrix_to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect())
        .collect()
}

fn rows_to_matrix(rows: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    let n = rows.len();
    if rows.iter().any(|r| r.len() != n) {
        return Err(HmmError::Dimension("matrix rows are not square".into()));
    }
    Ok(DMatrix::from_fn(n, n, |i, j| rows[i][j]))
}

impl FitResult {
    pub fn to_json(&self) -> Result<String> {
        let mirror = FitResultJson {
            optimizer_id: self.optimizer_id.clone(),
            converged: self.converged,
            status: self.status,
            iterations: self.iterations,
            function_evals: self.function_evals,
            gradient_evals: self.gradient_evals,
            hessian_evals: self.hessian_evals,
            nll: self.nll.is_finite().then_some(self.nll),
            model: serde_json::from_str(&self.natural_hat.to_json()?)?,
            working: self.working_hat.as_slice().to_vec(),
            hessian_working: self.hessian_working.as_ref().map(matrix_to_rows),
            cov_natural: self.cov_natural.as_ref().map(matrix_to_rows),
        };
        Ok(serde_json::to_string_pretty(&mirror)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let mirror: FitResultJson = serde_json::from_str(text)?;
        let natural_hat = NaturalParams::from_json(&mirror.model.to_string())?;
        let spec = natural_hat.spec();
        let working_hat = WorkingParams::new(mirror.working, &spec)?;
        Ok(FitResult {
            working_hat,
            natural_hat,
            nll: mirror.nll.unwrap_or(f64::INFINITY),
            converged: mirror.converged,
            status: mirror.status,
            iterations: mirror.iterations,
            function_evals: mirror.function_evals,
            gradient_evals: mirror.gradient_evals,
            hessian_evals: mirror.hessian_evals,
            optimizer_id: mirror.optimizer_id,
            hessian_working: mirror
                .hessian_working
                .as_deref()
                .map(rows_to_matrix)
                .transpose()?,
            cov_natural: mirror.cov_natural.as_deref().map(rows_to_matrix).transpose()?,
        })
    }
}

/// Two-sided interval around a point estimate.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceInterval {
    pub estimate: f64,
    pub lower: f64,
    pub upper: f64,
    pub level: f64,
}

/// Standard normal quantile by rational approximation (relative error below
/// 1.2e-9 everywhere in (0, 1)).
pub fn normal_quantile(p: f64) -> f64 {
    assert!(p > 0.0 && p < 1.0, "quantile level must lie in (0,1)");
    const A: [f64; 6] = [
        -3.969683028665376e+01,
        2.209460984245205e+02,
        -2.759285104469687e+02,
        1.383577518672690e+02,
        -3.066479806614716e+01,
        2.506628277459239e+00,
    ];
    const B: [f64; 5] = [
        -5.447609879822406e+01,
        1.615858368580409e+02,
        -1.556989798598866e+02,
        6.680131188771972e+01,
        -1.328068155288572e+01,
    ];
    const C: [f64; 6] = [
        -7.784894002430293e-03,
        -3.223964580411365e-01,
        -2.400758277161838e+00,
        -2.549732539343734e+00,
        4.374664141464968e+00,
        2.938163982698783e+00,
    ];
    const D: [f64; 4] = [
        7.784695709041462e-03,
        3.224671290700398e-01,
        2.445134137142996e+00,
        3.754408661907416e+00,
    ];
    const P_LOW: f64 = 0.02425;

    if p < P_LOW {
        let q = (-2.0 * p.ln()).sqrt();
        (((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    } else if p <= 1.0 - P_LOW {
        let q = p - 0.5;
        let r = q * q;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    } else {
        let q = (-2.0 * (1.0 - p).ln()).sqrt();
        -(((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    }
}

/// Wald interval `estimate ± z(level)·se`, intersected with `bounds` when the
/// parameter has a restricted range.
pub fn wald_ci(
    estimate: f64,
    se: f64,
    level: f64,
    bounds: Option<(f64, f64)>,
) -> Result<ConfidenceInterval> {
    if !(0.0 < level && level < 1.0) {
        return Err(HmmError::InvalidArgument(format!(
            "confidence level must lie in (0,1), got {level}"
        )));
    }
    if !(se >= 0.0) {
        return Err(HmmError::InvalidArgument(format!(
            "standard error must be nonnegative, got {se}"
        )));
    }
    let z = normal_quantile(0.5 + level / 2.0);
    let mut lower = estimate - z * se;
    let mut upper = estimate + z * se;
    if let Some((lo, hi)) = bounds {
        lower = lower.max(lo);
        upper = upper.min(hi);
    }
    // clipping never inverts the ordering around the estimate
    lower = lower.min(estimate);
    upper = upper.max(estimate);
    Ok(ConfidenceInterval {
        estimate,
        lower,
        upper,
        level,
    })
}

/// Smoothing probabilities `P(C_t = i | x_1..x_T)`, an m x T matrix whose
/// columns each sum to one.
pub fn smoothing_probabilities(
    n: &NaturalParams,
    obs: &ObservationSeries,
) -> Result<DMatrix<f64>> {
    let cache = forward_backward(n, obs)?;
    let m = n.m();
    let t_len = obs.len();
    let mut probs = DMatrix::zeros(m, t_len);
    let mut col = vec![0.0f64; m];
    for t in 0..t_len {
        for i in 0..m {
            col[i] = cache.log_alpha[(i, t)] + cache.log_beta[(i, t)];
        }
        let denom = f64::logsumexp(&col);
        for i in 0..m {
            probs[(i, t)] = (col[i] - denom).exp();
        }
    }
    Ok(probs)
}

/// Smoothing probabilities with per-cell standard errors and clipped Wald
/// intervals.
#[derive(Clone, Debug)]
pub struct SmoothingReport {
    pub probs: DMatrix<f64>,
    pub se: DMatrix<f64>,
    pub ci_lower: DMatrix<f64>,
    pub ci_upper: DMatrix<f64>,
    pub most_likely_state: Vec<usize>,
    pub level: f64,
}

#[derive(Serialize, Deserialize)]
struct SmoothingReportJson {
    m: usize,
    t_len: usize,
    level: f64,
    /// per-state rows of length t_len
    probs: Vec<Vec<f64>>,
    se: Vec<Vec<f64>>,
    ci_lower: Vec<Vec<f64>>,
    ci_upper: Vec<Vec<f64>>,
    /// 1-based most likely state per time point
    most_likely_state: Vec<usize>,
}

impl SmoothingReport {
    pub fn m(&self) -> usize {
        self.probs.nrows()
    }

    pub fn t_len(&self) -> usize {
        self.probs.ncols()
    }

    pub fn to_json(&self) -> Result<String> {
        let to_rows = |mat: &DMatrix<f64>| -> Vec<Vec<f64>> {
            (0..mat.nrows())
                .map(|i| (0..mat.ncols()).map(|t| mat[(i, t)]).collect())
                .collect()
        };
        let mirror = SmoothingReportJson {
            m: self.m(),
            t_len: self.t_len(),
            level: self.level,
            probs: to_rows(&self.probs),
            se: to_rows(&self.se),
            ci_lower: to_rows(&self.ci_lower),
            ci_upper: to_rows(&self.ci_upper),
            most_likely_state: self.most_likely_state.iter().map(|s| s + 1).collect(),
        };
        Ok(serde_json::to_string_pretty(&mirror)?)
    }

    /// CSV rows `(t, state, prob, se, lower, upper, most_likely)`, 1-based
    /// indices, one row per (t, state) cell.
    pub fn write_csv<W: std::io::Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["t", "state", "prob", "se", "lower", "upper", "most_likely"])?;
        for t in 0..self.t_len() {
            for i in 0..self.m() {
                w.write_record(&[
                    (t + 1).to_string(),
                    (i + 1).to_string(),
                    self.probs[(i, t)].to_string(),
                    self.se[(i, t)].to_string(),
                    self.ci_lower[(i, t)].to_string(),
                    self.ci_upper[(i, t)].to_string(),
                    (self.most_likely_state[t] + 1).to_string(),
                ])?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// Invert a symmetric positive definite matrix, retrying once with a 1e-8
/// diagonal jitter. Failure carries a conditioning diagnostic.
fn spd_inverse(h: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if let Some(chol) = Cholesky::new(h.clone()) {
        return Ok(chol.inverse());
    }
    let n = h.nrows();
    let mut jittered = h.clone();
    for i in 0..n {
        jittered[(i, i)] += 1e-8;
    }
    if let Some(chol) = Cholesky::new(jittered) {
        return Ok(chol.inverse());
    }
    let eigs = h.clone().symmetric_eigen().eigenvalues;
    let emin = eigs.iter().cloned().fold(f64::INFINITY, f64::min);
    let emax = eigs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    Err(HmmError::CovarianceUnavailable(format!(
        "Hessian is not positive definite after 1e-8 jitter \
         (eigenvalues in [{emin:.3e}, {emax:.3e}], condition ratio {:.3e})",
        emax / emin.abs().max(f64::MIN_POSITIVE)
    )))
}

/// Smoothing probabilities plus delta-method uncertainty for every cell:
/// `se = sqrt(J Sigma_w J')` with J the gradient of the cell probability with
/// respect to the working parameters and Sigma_w the inverse Hessian of the
/// negative log-likelihood.
pub fn smoothing_with_uncertainty(
    fit: &FitResult,
    obs: &ObservationSeries,
    level: f64,
) -> Result<SmoothingReport> {
    if !(0.0 < level && level < 1.0) {
        return Err(HmmError::InvalidArgument(format!(
            "confidence level must lie in (0,1), got {level}"
        )));
    }
    if !fit.converged {
        return Err(HmmError::InvalidArgument(
            "smoothing uncertainty requires a converged fit".into(),
        ));
    }
    let spec = fit.natural_hat.spec();
    obs.validate_family(spec.family())?;
    let probs = smoothing_probabilities(&fit.natural_hat, obs)?;
    let m = spec.m();
    let t_len = obs.len();
    let z = normal_quantile(0.5 + level / 2.0);

    let se = if m == 1 {
        // the probability is identically one, constant in the parameters
        DMatrix::zeros(1, t_len)
    } else {
        let hessian = fit.hessian_working.as_ref().ok_or_else(|| {
            HmmError::CovarianceUnavailable("fit carries no working-space Hessian".into())
        })?;
        let sigma_w = spd_inverse(hessian)?;
        let log_fact = log_factorial_table(obs, spec.family());
        let w = fit.working_hat.as_slice();
        let cells: Vec<(usize, usize)> = (0..t_len)
            .flat_map(|t| (0..m).map(move |i| (i, t)))
            .collect();
        let ses: Vec<f64> = cells
            .par_iter()
            .map(|&(i, t)| {
                let f = SmoothingCellFn {
                    obs,
                    spec,
                    log_fact: &log_fact,
                    state: i,
                    t,
                };
                match adcore::gradient(&f, w) {
                    Ok(g) => {
                        let gv = nalgebra::DVector::from_column_slice(&g);
                        let var = (gv.transpose() * &sigma_w * &gv)[(0, 0)];
                        var.max(0.0).sqrt()
                    }
                    Err(_) => f64::NAN,
                }
            })
            .collect();
        if ses.iter().any(|v| !v.is_finite()) {
            return Err(HmmError::NonFinite(
                "a smoothing-probability gradient was not finite".into(),
            ));
        }
        let mut mat = DMatrix::zeros(m, t_len);
        for (k, &(i, t)) in cells.iter().enumerate() {
            mat[(i, t)] = ses[k];
        }
        mat
    };

    let mut ci_lower = DMatrix::zeros(m, t_len);
    let mut ci_upper = DMatrix::zeros(m, t_len);
    let mut most_likely_state = Vec::with_capacity(t_len);
    for t in 0..t_len {
        let mut argmax = 0;
        for i in 0..m {
            ci_lower[(i, t)] = (probs[(i, t)] - z * se[(i, t)]).max(0.0).min(probs[(i, t)]);
            ci_upper[(i, t)] = (probs[(i, t)] + z * se[(i, t)]).min(1.0).max(probs[(i, t)]);
            if probs[(i, t)] > probs[(argmax, t)] {
                argmax = i;
            }
        }
        most_likely_state.push(argmax);
    }
    Ok(SmoothingReport {
        probs,
        se,
        ci_lower,
        ci_upper,
        most_likely_state,
        level,
    })
}

/// One natural-space coordinate (in reporting order) as a differentiable
/// function of the working parameters.
struct NaturalComponentFn {
    spec: EmissionSpec,
    index: usize,
}

impl DiffFunction for NaturalComponentFn {
    fn dim(&self) -> usize {
        self.spec.working_len()
    }

    fn eval<S: DiffScalar>(&self, w: &[S]) -> S {
        let nv = natural_values_from_working(w, &self.spec);
        let m = self.spec.m();
        let mut idx = self.index;
        if idx < m * m {
            return nv.gamma[idx];
        }
        idx -= m * m;
        if idx < nv.loc.len() {
            return nv.loc[idx];
        }
        idx -= nv.loc.len();
        if idx < nv.scale.len() {
            return nv.scale[idx];
        }
        idx -= nv.scale.len();
        nv.delta[idx]
    }
}

/// Number of reported natural coordinates for a spec.
fn natural_len(spec: &EmissionSpec) -> usize {
    spec.m() * spec.m() + spec.emission_len() + spec.m()
}

/// Delta-method covariance of the natural parameters:
/// `Sigma = G H^{-1} G'` with G the Jacobian of the working-to-natural map
/// and H the Hessian of the negative log-likelihood, both at the optimum.
pub fn covariance_natural(fit: &FitResult) -> Result<DMatrix<f64>> {
    let hessian = fit.hessian_working.as_ref().ok_or_else(|| {
        HmmError::CovarianceUnavailable("fit carries no working-space Hessian".into())
    })?;
    let sigma_w = spd_inverse(hessian)?;
    let spec = fit.natural_hat.spec();
    let rows = natural_len(&spec);
    let cols = spec.working_len();
    let mut jac = DMatrix::zeros(rows, cols);
    for r in 0..rows {
        let f = NaturalComponentFn { spec, index: r };
        let g = adcore::gradient(&f, fit.working_hat.as_slice())?;
        for c in 0..cols {
            jac[(r, c)] = g[c];
        }
    }
    Ok(&jac * sigma_w * jac.transpose())
}

/// Compute and attach the natural-parameter covariance, when possible.
pub fn with_covariance(mut fit: FitResult) -> FitResult {
    if fit.cov_natural.is_none() {
        fit.cov_natural = covariance_natural(&fit).ok();
    }
    fit
}

/// One row of the parameter report table.
#[derive(Clone, Debug, Serialize)]
pub struct ParamRow {
    pub param: String,
    pub estimate: f64,
    pub lower: f64,
    pub upper: f64,
}

/// Estimates with Wald intervals for every natural parameter, clipped to the
/// parameter's range ([0,1] for probabilities, [0,inf) for rates and standard
/// deviations, unbounded for means).
pub fn parameter_table(fit: &FitResult, level: f64) -> Result<Vec<ParamRow>> {
    let cov = match &fit.cov_natural {
        Some(c) => c.clone(),
        None => covariance_natural(fit)?,
    };
    let spec = fit.natural_hat.spec();
    let names = flat_param_names(&spec);
    let estimates = fit.natural_hat.flatten();
    let m = spec.m();
    let mut rows = Vec::with_capacity(names.len());
    for (k, (name, &est)) in names.iter().zip(estimates.iter()).enumerate() {
        let bounds = if k < m * m {
            Some((0.0, 1.0)) // transition probabilities
        } else if k >= names.len() - m {
            Some((0.0, 1.0)) // stationary probabilities
        } else {
            match spec.family() {
                EmissionFamily::Poisson => Some((0.0, f64::INFINITY)),
                EmissionFamily::Gaussian => {
                    // means unbounded, standard deviations nonnegative
                    if k < m * m + m {
                        None
                    } else {
                        Some((0.0, f64::INFINITY))
                    }
                }
            }
        };
        let se = cov[(k, k)].max(0.0).sqrt();
        let ci = wald_ci(est, se, level, bounds)?;
        rows.push(ParamRow {
            param: name.clone(),
            estimate: est,
            lower: ci.lower,
            upper: ci.upper,
        });
    }
    Ok(rows)
}

/// Percentile confidence intervals from a parametric bootstrap.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BootstrapReport {
    pub param_names: Vec<String>,
    pub median: Vec<f64>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub level: f64,
    pub replications: usize,
    pub failures: usize,
}

/// Parametric bootstrap: simulate `b` series of length `t_len` from the
/// fitted model, refit each with the same optimizer starting from the fitted
/// values, and report per-parameter medians with percentile intervals.
/// Refit failures are dropped and counted; more than 50% failures is an error.
pub fn parametric_bootstrap(
    fit: &FitResult,
    optcfg: &OptimizerConfig,
    t_len: usize,
    b: usize,
    seed: u64,
) -> Result<BootstrapReport> {
    if b < 2 {
        return Err(HmmError::InvalidArgument(
            "bootstrap needs at least 2 replications".into(),
        ));
    }
    if !fit.converged {
        return Err(HmmError::InvalidArgument(
            "bootstrap requires a converged fit".into(),
        ));
    }
    let spec = fit.natural_hat.spec();
    let truth = &fit.natural_hat;
    let estimates: Vec<Option<Vec<f64>>> = (0..b)
        .into_par_iter()
        .map(|rep| {
            let rep_seed = derive_seed(seed, rep as u64);
            let (series, _) = crate::studies::simulate(truth, &spec, t_len, rep_seed).ok()?;
            let refit = crate::optim::fit(&spec, &series, truth, optcfg).ok()?;
            refit.converged.then(|| refit.natural_hat.flatten())
        })
        .collect();

    let kept: Vec<&Vec<f64>> = estimates.iter().flatten().collect();
    let failures = b - kept.len();
    if failures * 2 > b {
        return Err(HmmError::BootstrapUnreliable(format!(
            "{failures} of {b} bootstrap refits failed"
        )));
    }
    let names = flat_param_names(&spec);
    let mut median = Vec::with_capacity(names.len());
    let mut lower = Vec::with_capacity(names.len());
    let mut upper = Vec::with_capacity(names.len());
    for k in 0..names.len() {
        let column: Vec<f64> = kept.iter().map(|v| v[k]).collect();
        median.push(quantile(&column, 0.5));
        lower.push(quantile(&column, 0.025));
        upper.push(quantile(&column, 0.975));
    }
    Ok(BootstrapReport {
        param_names: names,
        median,
        lower,
        upper,
        level: 0.95,
        replications: b,
        failures,
    })
}

/// Information criteria: `aic = 2 nll + 2k`, `bic = 2 nll + k ln T`.
pub fn aic_bic(nll: f64, k: usize, t_len: usize) -> (f64, f64) {
    let aic = 2.0 * nll + 2.0 * k as f64;
    let bic = 2.0 * nll + k as f64 * (t_len as f64).ln();
    (aic, bic)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::likelihood::brute_force_likelihood;
    use crate::params::EmissionParams;
    use crate::testutil::{random_natural, random_series};
    use approx::assert_abs_diff_eq;
    use nalgebra::DMatrix;
    use rand::rngs::StdRng;
    use rand::SeedableRng;

    #[test]
    fn normal_quantile_reference_values() {
        assert_abs_diff_eq!(normal_quantile(0.975), 1.959963984540054, epsilon = 1e-8);
        assert_abs_diff_eq!(normal_quantile(0.5), 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(normal_quantile(0.025), -1.959963984540054, epsilon = 1e-8);
        assert_abs_diff_eq!(normal_quantile(0.995), 2.5758293035489004, epsilon = 1e-8);
        assert_abs_diff_eq!(normal_quantile(1e-6), -4.753424308822899, epsilon = 1e-6);
    }

    #[test]
    fn wald_ci_clips_and_degenerates() {
        // raw lower bound below zero is clipped to the boundary
        let ci = wald_ci(0.34, 0.23, 0.95, Some((0.0, 1.0))).unwrap();
        assert_eq!(ci.lower, 0.0);
        assert!(ci.upper < 1.0 && ci.upper > 0.34);

        let ci = wald_ci(1.5, 0.0, 0.95, None).unwrap();
        assert_eq!((ci.lower, ci.upper), (1.5, 1.5));

        let ci = wald_ci(1.64, 0.278, 0.95, Some((0.0, f64::INFINITY))).unwrap();
        assert_abs_diff_eq!(ci.lower, 1.095, epsilon = 1e-3);
        assert_abs_diff_eq!(ci.upper, 2.185, epsilon = 1e-3);

        assert!(wald_ci(0.0, 1.0, 1.5, None).is_err());
        assert!(wald_ci(0.0, -1.0, 0.5, None).is_err());
    }

    #[test]
    fn aic_bic_formulas() {
        let (aic, bic) = aic_bic(0.0, 2, 7);
        assert_eq!(aic, 4.0);
        assert_abs_diff_eq!(bic, 2.0 * (7f64).ln(), epsilon = 1e-12);
        // BIC exceeds AIC exactly when ln T > 2
        let (aic8, bic8) = aic_bic(3.0, 2, 8);
        assert!(bic8 > aic8);
        let (aic7, bic7) = aic_bic(3.0, 2, 7);
        assert!(bic7 < aic7);
        // two-state Poisson report pair: AIC 345 with k=4 implies nll 168.5,
        // and the BIC implied by the same nll and T=87 reproduces ~355
        let implied_nll = (345.0 - 2.0 * 4.0) / 2.0;
        let (aic_chk, bic_chk) = aic_bic(implied_nll, 4, 87);
        assert_abs_diff_eq!(aic_chk, 345.0, epsilon = 1e-12);
        assert_abs_diff_eq!(bic_chk, 337.0 + 4.0 * (87f64).ln(), epsilon = 1e-12);
        assert!((bic_chk - 355.0).abs() < 0.2);
    }

    #[test]
    fn smoothing_columns_sum_to_one_and_match_brute_force() {
        let mut rng = StdRng::seed_from_u64(31);
        for k in 0..20 {
            let family = if k % 2 == 0 {
                EmissionFamily::Poisson
            } else {
                EmissionFamily::Gaussian
            };
            let m = 2 + k % 2;
            let spec = EmissionSpec::new(family, m).unwrap();
            let n = random_natural(&mut rng, &spec);
            let t_len = 4;
            let obs = ObservationSeries::new(random_series(&mut rng, family, t_len)).unwrap();
            let probs = smoothing_probabilities(&n, &obs).unwrap();
            for t in 0..t_len {
                let s: f64 = (0..m).map(|i| probs[(i, t)]).sum();
                assert_abs_diff_eq!(s, 1.0, epsilon = 1e-10);
            }
            // brute-force posterior over all m^T state paths
            let total = brute_force_likelihood(&n, &obs).unwrap();
            let mut post = DMatrix::<f64>::zeros(m, t_len);
            let density = |i: usize, t: usize| -> f64 {
                match n.emission() {
                    EmissionParams::Poisson { lambda } => {
                        let x = obs.values()[t];
                        (x * lambda[i].ln()
                            - lambda[i]
                            - statrs::function::gamma::ln_gamma(x + 1.0))
                        .exp()
                    }
                    EmissionParams::Gaussian { mu, sigma } => {
                        let z = (obs.values()[t] - mu[i]) / sigma[i];
                        (-0.5 * z * z).exp() / (sigma[i] * (2.0 * std::f64::consts::PI).sqrt())
                    }
                }
            };
            let paths = m.pow(t_len as u32);
            for code in 0..paths {
                let mut states = Vec::with_capacity(t_len);
                let mut c = code;
                for _ in 0..t_len {
                    states.push(c % m);
                    c /= m;
                }
                let mut p = n.delta()[states[0]] * density(states[0], 0);
                for t in 1..t_len {
                    p *= n.gamma()[(states[t - 1], states[t])] * density(states[t], t);
                }
                for (t, &s) in states.iter().enumerate() {
                    post[(s, t)] += p;
                }
            }
            post /= total;
            for t in 0..t_len {
                for i in 0..m {
                    assert_abs_diff_eq!(probs[(i, t)], post[(i, t)], epsilon = 1e-10);
                }
            }
        }
    }


    #[test]
    fn covariance_chain_rule_for_single_state_poisson() {
        let spec = EmissionSpec::new(EmissionFamily::Poisson, 1).unwrap();
        let obs = ObservationSeries::new(vec![2.0, 4.0, 3.0, 1.0, 2.0]).unwrap();
        let init = NaturalParams::new(
            DMatrix::from_row_slice(1, 1, &[1.0]),
            EmissionParams::Poisson { lambda: vec![1.0] },
        )
        .unwrap();
        let fit = crate::optim::fit(&spec, &obs, &init, &crate::optim::OptimizerConfig::default())
            .unwrap();
        assert!(fit.converged);
        let lambda_hat = match fit.natural_hat.emission() {
            EmissionParams::Poisson { lambda } => lambda[0],
            _ => unreachable!(),
        };
        let h = fit.hessian_working.as_ref().unwrap()[(0, 0)];
        let var_eta = 1.0 / h;
        let cov = covariance_natural(&fit).unwrap();
        // natural order: gamma_11, lambda_1, delta_1
        let var_lambda = cov[(1, 1)];
        assert_abs_diff_eq!(
            var_lambda,
            lambda_hat * lambda_hat * var_eta,
            epsilon = 1e-10 * var_lambda.abs().max(1e-10)
        );
        // gamma and delta are constants in a single-state model
        assert_abs_diff_eq!(cov[(0, 0)], 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(cov[(2, 2)], 0.0, epsilon = 1e-12);
    }

    #[test]
    fn covariance_diagonal_nonnegative_on_random_fits() {
        let mut rng = StdRng::seed_from_u64(77);
        let mut checked = 0;
        for k in 0..30 {
            let family = if k % 2 == 0 {
                EmissionFamily::Poisson
            } else {
                EmissionFamily::Gaussian
            };
            let spec = EmissionSpec::new(family, 2).unwrap();
            let truth = random_natural(&mut rng, &spec);
            let Ok((obs, path)) = crate::studies::simulate(&truth, &spec, 120, 1000 + k as u64)
            else {
                continue;
            };
            if !crate::studies::all_states_visited(&path, 2) {
                continue;
            }
            let Ok(fit) =
                crate::optim::fit(&spec, &obs, &truth, &crate::optim::OptimizerConfig::default())
            else {
                continue;
            };
            if !fit.converged {
                continue;
            }
            let Ok(cov) = covariance_natural(&fit) else {
                continue;
            };
            for d in 0..cov.nrows() {
                assert!(cov[(d, d)] >= -1e-10, "negative variance {}", cov[(d, d)]);
            }
            checked += 1;
        }
        assert!(checked >= 10, "only {checked} fits checked");
    }

    #[test]
    fn smoothing_se_matches_finite_difference_delta_method() {
        let truth = NaturalParams::new(
            DMatrix::from_row_slice(2, 2, &[0.9, 0.1, 0.2, 0.8]),
            EmissionParams::Poisson {
                lambda: vec![1.0, 6.0],
            },
        )
        .unwrap();
        let spec = truth.spec();
        let (obs, _) = crate::studies::simulate(&truth, &spec, 40, 3).unwrap();
        let fit =
            crate::optim::fit(&spec, &obs, &truth, &crate::optim::OptimizerConfig::default())
                .unwrap();
        assert!(fit.converged);
        let report = smoothing_with_uncertainty(&fit, &obs, 0.95).unwrap();
        let sigma_w = spd_inverse(fit.hessian_working.as_ref().unwrap()).unwrap();
        let w = fit.working_hat.as_slice();
        let h = 1e-5;
        let probs_at = |wv: &[f64]| -> DMatrix<f64> {
            let wp = WorkingParams::new(wv.to_vec(), &spec).unwrap();
            let n = crate::params::natural_from_working(&wp, &spec).unwrap();
            smoothing_probabilities(&n, &obs).unwrap()
        };
        for t in [0usize, 10, 25, 39] {
            for i in 0..2 {
                let mut jac = nalgebra::DVector::zeros(w.len());
                for k in 0..w.len() {
                    let mut wp = w.to_vec();
                    wp[k] += h;
                    let up = probs_at(&wp)[(i, t)];
                    wp[k] = w[k] - h;
                    let dn = probs_at(&wp)[(i, t)];
                    jac[k] = (up - dn) / (2.0 * h);
                }
                let se_fd = (jac.transpose() * &sigma_w * &jac)[(0, 0)].max(0.0).sqrt();
                assert!(
                    (report.se[(i, t)] - se_fd).abs() < 1e-4,
                    "cell ({i},{t}): ad {} vs fd {}",
                    report.se[(i, t)],
                    se_fd
                );
            }
        }
    }

    #[test]
    fn smoothing_report_single_state_is_degenerate() {
        let spec = EmissionSpec::new(EmissionFamily::Gaussian, 1).unwrap();
        let obs = ObservationSeries::new(vec![0.3, -0.2, 0.8]).unwrap();
        let init = NaturalParams::new(
            DMatrix::from_row_slice(1, 1, &[1.0]),
            EmissionParams::Gaussian {
                mu: vec![0.0],
                sigma: vec![1.0],
            },
        )
        .unwrap();
        let fit = crate::optim::fit(&spec, &obs, &init, &crate::optim::OptimizerConfig::default())
            .unwrap();
        let report = smoothing_with_uncertainty(&fit, &obs, 0.95).unwrap();
        for t in 0..3 {
            assert_eq!(report.probs[(0, t)], 1.0);
            assert_eq!(report.se[(0, t)], 0.0);
            assert_eq!(report.ci_lower[(0, t)], 1.0);
            assert_eq!(report.ci_upper[(0, t)], 1.0);
        }
    }

    #[test]
    fn ambiguous_points_can_carry_very_different_uncertainty() {
        // an oscillating stretch followed by a clean regime change, with an
        // ambiguous observation planted in each context
        let mut values = Vec::new();
        for k in 0..12 {
            values.push(if k % 2 == 0 { -2.0 } else { 2.0 });
        }
        values[6] = 0.0;
        values.extend(vec![-2.0; 10]);
        values.push(0.0);
        values.extend(vec![2.0; 10]);
        let obs = ObservationSeries::new(values).unwrap();
        let spec = EmissionSpec::new(EmissionFamily::Gaussian, 2).unwrap();
        let init = NaturalParams::new(
            DMatrix::from_row_slice(2, 2, &[0.7, 0.3, 0.3, 0.7]),
            EmissionParams::Gaussian {
                mu: vec![-2.0, 2.0],
                sigma: vec![0.8, 0.8],
            },
        )
        .unwrap();
        let fit = crate::optim::fit(&spec, &obs, &init, &crate::optim::OptimizerConfig::default())
            .unwrap();
        assert!(fit.converged);
        let report = smoothing_with_uncertainty(&fit, &obs, 0.95).unwrap();
        let mut ses = Vec::new();
        for t in 0..report.t_len() {
            for i in 0..2 {
                if (report.probs[(i, t)] - 0.5).abs() < 0.15 {
                    ses.push(report.se[(i, t)]);
                }
            }
        }
        assert!(ses.len() >= 2, "no ambiguous cells found");
        let max = ses.iter().cloned().fold(f64::MIN, f64::max);
        let min = ses.iter().cloned().fold(f64::MAX, f64::min);
        assert!(
            max / min > 2.0,
            "similar probabilities carry similar SEs: max {max}, min {min}"
        );
    }

    #[test]
    fn bootstrap_reports_percentiles_and_counts() {
        let truth = NaturalParams::new(
            DMatrix::from_row_slice(2, 2, &[0.95, 0.05, 0.15, 0.85]),
            EmissionParams::Poisson {
                lambda: vec![1.0, 7.0],
            },
        )
        .unwrap();
        let spec = truth.spec();
        let (obs, _) = crate::studies::simulate(&truth, &spec, 150, 21).unwrap();
        let optcfg = crate::optim::OptimizerConfig::default();
        let fit = crate::optim::fit(&spec, &obs, &truth, &optcfg).unwrap();
        assert!(fit.converged);
        let report = parametric_bootstrap(&fit, &optcfg, obs.len(), 40, 99).unwrap();
        assert_eq!(report.replications, 40);
        assert!(report.failures * 2 <= 40);
        for k in 0..report.param_names.len() {
            assert!(report.lower[k] <= report.median[k] + 1e-12);
            assert!(report.median[k] <= report.upper[k] + 1e-12);
        }
        // fitted rates are inside their own bootstrap intervals
        let lam = match fit.natural_hat.emission() {
            EmissionParams::Poisson { lambda } => lambda.clone(),
            _ => unreachable!(),
        };
        let idx1 = report.param_names.iter().position(|n| n == "lambda_1").unwrap();
        let idx2 = report.param_names.iter().position(|n| n == "lambda_2").unwrap();
        assert!(report.lower[idx1] <= lam[0] && lam[0] <= report.upper[idx1]);
        assert!(report.lower[idx2] <= lam[1] && lam[1] <= report.upper[idx2]);
        assert!(parametric_bootstrap(&fit, &optcfg, obs.len(), 1, 7).is_err());
    }

    #[test]
    fn fit_result_json_round_trip() {
        let truth = NaturalParams::new(
            DMatrix::from_row_slice(2, 2, &[0.9, 0.1, 0.2, 0.8]),
            EmissionParams::Poisson {
                lambda: vec![2.0, 9.0],
            },
        )
        .unwrap();
        let spec = truth.spec();
        let (obs, _) = crate::studies::simulate(&truth, &spec, 100, 8).unwrap();
        let fit = with_covariance(
            crate::optim::fit(&spec, &obs, &truth, &crate::optim::OptimizerConfig::default())
                .unwrap(),
        );
        let text = fit.to_json().unwrap();
        let back = FitResult::from_json(&text).unwrap();
        assert_eq!(back.nll, fit.nll);
        assert_eq!(back.working_hat.as_slice(), fit.working_hat.as_slice());
        assert_eq!(back.converged, fit.converged);
        assert_eq!(
            back.cov_natural.as_ref().unwrap().as_slice(),
            fit.cov_natural.as_ref().unwrap().as_slice()
        );
    }

    #[test]
    fn parameter_table_respects_bounds() {
        let truth = NaturalParams::new(
            DMatrix::from_row_slice(2, 2, &[0.95, 0.05, 0.15, 0.85]),
            EmissionParams::Poisson {
                lambda: vec![1.0, 7.0],
            },
        )
        .unwrap();
        let spec = truth.spec();
        let (obs, _) = crate::studies::simulate(&truth, &spec, 60, 13).unwrap();
        let fit =
            crate::optim::fit(&spec, &obs, &truth, &crate::optim::OptimizerConfig::default())
                .unwrap();
        let rows = parameter_table(&fit, 0.95).unwrap();
        assert_eq!(rows.len(), 4 + 2 + 2);
        for row in &rows {
            assert!(row.lower <= row.estimate && row.estimate <= row.upper);
            if row.param.starts_with("gamma") || row.param.starts_with("delta") {
                assert!(row.lower >= 0.0 && row.upper <= 1.0);
            }
            if row.param.starts_with("lambda") {
                assert!(row.lower >= 0.0);
            }
        }
    }

    #[test]
    fn single_state_probabilities_are_one() {
        let n = NaturalParams::new(
            DMatrix::from_row_slice(1, 1, &[1.0]),
            EmissionParams::Poisson { lambda: vec![2.0] },
        )
        .unwrap();
        let obs = ObservationSeries::new(vec![1.0, 2.0, 3.0]).unwrap();
        let probs = smoothing_probabilities(&n, &obs).unwrap();
        for t in 0..3 {
            assert_eq!(probs[(0, t)], 1.0);
        }
    }
}
