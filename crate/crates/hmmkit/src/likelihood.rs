//! Model likelihood: the scaled forward recursion (in log space, which yields
//! the negative log-likelihood directly), the forward/backward variable cache
//! used for smoothing, and an exhaustive enumeration oracle for small
//! instances.

use nalgebra::DMatrix;
use statrs::function::gamma::ln_gamma;

use crate::adcore::{self, DiffFunction, DiffScalar};
use crate::error::{HmmError, Result};
use crate::params::{
    EmissionFamily, EmissionParams, EmissionSpec, NaturalParams, WorkingParams,
};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// An observed time series. Poisson models additionally require nonnegative
/// integer values, checked when the series is paired with a family.
#[derive(Clone, Debug, PartialEq)]
pub struct ObservationSeries {
    values: Vec<f64>,
}

impl ObservationSeries {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(HmmError::InvalidArgument(
                "observation series must contain at least one value".into(),
            ));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(HmmError::Domain(format!(
                "observation {i} is not finite"
            )));
        }
        Ok(ObservationSeries { values })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Check the series lies in the support of the emission family.
    pub fn validate_family(&self, family: EmissionFamily) -> Result<()> {
        if family == EmissionFamily::Poisson {
            if let Some(i) = self
                .values
                .iter()
                .position(|&v| v < 0.0 || v.fract() != 0.0)
            {
                return Err(HmmError::Domain(format!(
                    "observation {i} = {} is not a nonnegative integer (Poisson support)",
                    self.values[i]
                )));
            }
        }
        Ok(())
    }

    /// Read a single-column CSV file. `has_header` skips the first row.
    pub fn from_csv(path: &std::path::Path, has_header: bool) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(has_header)
            .trim(csv::Trim::All)
            .from_path(path)?;
        let mut values = Vec::new();
        for (idx, record) in reader.records().enumerate() {
            let record = record?;
            let line = idx + 1 + usize::from(has_header);
            if record.len() != 1 {
                return Err(HmmError::InvalidArgument(format!(
                    "line {line}: expected a single column, found {} fields",
                    record.len()
                )));
            }
            let field = &record[0];
            if field.is_empty() {
                continue;
            }
            let v: f64 = field.parse().map_err(|_| {
                HmmError::InvalidArgument(format!(
                    "line {line}: cannot parse `{field}` as a number"
                ))
            })?;
            if !v.is_finite() {
                return Err(HmmError::Domain(format!(
                    "line {line}: non-finite value {v}"
                )));
            }
            values.push(v);
        }
        ObservationSeries::new(values)
    }
}

/// Per-state transition and initial log-probabilities plus emission
/// parameters, derived from a working vector. Log transition entries are
/// computed directly from the logits (shift by the row maximum, subtract the
/// log normalizer), which stays finite and cancellation-free even when a row
/// saturates.
struct LogModel<S> {
    m: usize,
    log_gamma: Vec<S>,
    log_delta: Vec<S>,
    emission: EmissionScratch<S>,
}

enum EmissionScratch<S> {
    /// log rate (the working parameter itself) and the rate.
    Poisson { log_rate: Vec<S>, rate: Vec<S> },
    /// mean, log sd (the working parameter itself), and 1/sd.
    Gaussian {
        mu: Vec<S>,
        log_sigma: Vec<S>,
        inv_sigma: Vec<S>,
    },
}

impl<S: DiffScalar> LogModel<S> {
    fn from_working(w: &[S], spec: &EmissionSpec) -> Self {
        let m = spec.m();
        let proto = w[0];
        let mut log_gamma = Vec::with_capacity(m * m);
        if m == 1 {
            log_gamma.push(proto.lift(0.0));
        } else {
            for i in 0..m {
                let row = &w[i * (m - 1)..(i + 1) * (m - 1)];
                let shift = row.iter().fold(0.0f64, |a, t| a.max(t.raw()));
                // denominator in [1, m] by construction
                let mut denom = proto.lift((-shift).exp());
                for t in row {
                    denom = denom + t.add_c(-shift).exp();
                }
                let log_denom = denom.ln();
                let mut k = 0;
                for j in 0..m {
                    if j == i {
                        log_gamma.push(proto.lift(-shift) - log_denom);
                    } else {
                        log_gamma.push(row[k].add_c(-shift) - log_denom);
                        k += 1;
                    }
                }
            }
        }
        let gamma_lin: Vec<S> = log_gamma.iter().map(|&lg| lg.exp()).collect();
        let delta = crate::params::stationary_values(&gamma_lin, m);
        let log_delta: Vec<S> = delta.iter().map(|&d| d.ln()).collect();
        let em = &w[m * (m - 1)..];
        let emission = match spec.family() {
            EmissionFamily::Poisson => EmissionScratch::Poisson {
                log_rate: em.to_vec(),
                rate: em.iter().map(|&e| e.exp()).collect(),
            },
            EmissionFamily::Gaussian => EmissionScratch::Gaussian {
                mu: em[..m].to_vec(),
                log_sigma: em[m..].to_vec(),
                inv_sigma: em[m..].iter().map(|&e| (-e).exp()).collect(),
            },
        };
        LogModel {
            m,
            log_gamma,
            log_delta,
            emission,
        }
    }

    /// Log-density of observation `x` under state `i`. `log_fact` carries the
    /// precomputed `ln Gamma(x+1)` for Poisson data.
    fn log_density(&self, i: usize, x: f64, log_fact: f64) -> S {
        match &self.emission {
            EmissionScratch::Poisson { log_rate, rate } => {
                (log_rate[i].mul_c(x) - rate[i]).add_c(-log_fact)
            }
            EmissionScratch::Gaussian {
                mu,
                log_sigma,
                inv_sigma,
            } => {
                let z = (-mu[i]).add_c(x) * inv_sigma[i];
                ((z * z).mul_c(-0.5) - log_sigma[i]).add_c(-0.5 * LN_2PI)
            }
        }
    }
}

/// Negative log-likelihood as a differentiable function of the working
/// parameters. Construction validates the observations against the family;
/// per-observation constants are precomputed once.
pub struct NllFunction<'a> {
    obs: &'a ObservationSeries,
    spec: EmissionSpec,
    log_fact: Vec<f64>,
}

/// Per-observation `ln Gamma(x+1)` terms (empty for Gaussian data).
pub(crate) fn log_factorial_table(obs: &ObservationSeries, family: EmissionFamily) -> Vec<f64> {
    match family {
        EmissionFamily::Poisson => obs.values().iter().map(|&x| ln_gamma(x + 1.0)).collect(),
        EmissionFamily::Gaussian => Vec::new(),
    }
}

impl<'a> NllFunction<'a> {
    pub fn new(obs: &'a ObservationSeries, spec: &EmissionSpec) -> Result<Self> {
        obs.validate_family(spec.family())?;
        let log_fact = log_factorial_table(obs, spec.family());
        Ok(NllFunction {
            obs,
            spec: *spec,
            log_fact,
        })
    }

    fn log_fact(&self, t: usize) -> f64 {
        if self.log_fact.is_empty() {
            0.0
        } else {
            self.log_fact[t]
        }
    }
}

impl DiffFunction for NllFunction<'_> {
    fn dim(&self) -> usize {
        self.spec.working_len()
    }

    /// Scaled forward pass: the running state vector is renormalized by its
    /// log-sum-exp at every step and the normalizers accumulate into the
    /// log-likelihood, so nothing ever under- or overflows.
    fn eval<S: DiffScalar>(&self, w: &[S]) -> S {
        let lm = LogModel::from_working(w, &self.spec);
        let m = lm.m;
        let xs = self.obs.values();
        let mut phi: Vec<S> = (0..m)
            .map(|i| lm.log_delta[i] + lm.log_density(i, xs[0], self.log_fact(0)))
            .collect();
        let mut ll = S::logsumexp(&phi);
        for v in phi.iter_mut() {
            *v = *v - ll;
        }
        let mut next: Vec<S> = phi.clone();
        let mut terms: Vec<S> = Vec::with_capacity(m);
        for (t, &x) in xs.iter().enumerate().skip(1) {
            for j in 0..m {
                terms.clear();
                for (i, &p) in phi.iter().enumerate() {
                    terms.push(p + lm.log_gamma[i * m + j]);
                }
                next[j] = S::logsumexp(&terms) + lm.log_density(j, x, self.log_fact(t));
            }
            let c = S::logsumexp(&next);
            for (p, &n) in phi.iter_mut().zip(next.iter()) {
                *p = n - c;
            }
            ll = ll + c;
        }
        -ll
    }
}

/// One smoothing probability `P(C_t = state | observations)` as a
/// differentiable function of the working parameters; the delta-method
/// Jacobian is assembled one such cell at a time.
pub(crate) struct SmoothingCellFn<'a> {
    pub obs: &'a ObservationSeries,
    pub spec: EmissionSpec,
    pub log_fact: &'a [f64],
    pub state: usize,
    pub t: usize,
}

impl SmoothingCellFn<'_> {
    fn log_fact(&self, t: usize) -> f64 {
        if self.log_fact.is_empty() {
            0.0
        } else {
            self.log_fact[t]
        }
    }
}

impl DiffFunction for SmoothingCellFn<'_> {
    fn dim(&self) -> usize {
        self.spec.working_len()
    }

    fn eval<S: DiffScalar>(&self, w: &[S]) -> S {
        let lm = LogModel::from_working(w, &self.spec);
        let m = lm.m;
        let xs = self.obs.values();
        let t_len = xs.len();
        // forward pass to t, renormalized each step (the shifts cancel in the
        // final softmax)
        let mut phi: Vec<S> = (0..m)
            .map(|i| lm.log_delta[i] + lm.log_density(i, xs[0], self.log_fact(0)))
            .collect();
        let mut terms: Vec<S> = Vec::with_capacity(m);
        let c = S::logsumexp(&phi);
        for v in phi.iter_mut() {
            *v = *v - c;
        }
        let mut next = phi.clone();
        for (step, &x) in xs.iter().enumerate().take(self.t + 1).skip(1) {
            for j in 0..m {
                terms.clear();
                for (i, &p) in phi.iter().enumerate() {
                    terms.push(p + lm.log_gamma[i * m + j]);
                }
                next[j] = S::logsumexp(&terms) + lm.log_density(j, x, self.log_fact(step));
            }
            let c = S::logsumexp(&next);
            for (p, &nv) in phi.iter_mut().zip(next.iter()) {
                *p = nv - c;
            }
        }
        // backward pass down to t, renormalized the same way
        let zero = w[0].lift(0.0);
        let mut beta: Vec<S> = vec![zero; m];
        let mut beta_next = beta.clone();
        for step in (self.t..t_len - 1).rev() {
            for i in 0..m {
                terms.clear();
                for j in 0..m {
                    terms.push(
                        lm.log_gamma[i * m + j]
                            + lm.log_density(j, xs[step + 1], self.log_fact(step + 1))
                            + beta[j],
                    );
                }
                beta_next[i] = S::logsumexp(&terms);
            }
            let c = S::logsumexp(&beta_next);
            for (b, &bn) in beta.iter_mut().zip(beta_next.iter()) {
                *b = bn - c;
            }
        }
        let col: Vec<S> = (0..m).map(|i| phi[i] + beta[i]).collect();
        let denom = S::logsumexp(&col);
        (col[self.state] - denom).exp()
    }
}

/// Negative log-likelihood of the working parameters given the data.
pub fn nll(w: &WorkingParams, obs: &ObservationSeries, spec: &EmissionSpec) -> Result<f64> {
    let f = NllFunction::new(obs, spec)?;
    adcore::value(&f, w.as_slice())
}

/// Negative log-likelihood at natural parameters.
pub fn nll_natural(n: &NaturalParams, obs: &ObservationSeries) -> Result<f64> {
    let spec = n.spec();
    let w = crate::params::working_from_natural(n, &spec)?;
    nll(&w, obs, &spec)
}

/// Log-space forward and backward variables for one model/data pair.
#[derive(Clone, Debug)]
pub struct ForwardBackwardCache {
    /// m x T matrix of log forward variables.
    pub log_alpha: DMatrix<f64>,
    /// m x T matrix of log backward variables (last column is zero).
    pub log_beta: DMatrix<f64>,
    pub log_likelihood: f64,
}

impl ForwardBackwardCache {
    /// Largest deviation over t of logsumexp_i(log_alpha + log_beta) from the
    /// log-likelihood; the defining consistency property of the two passes.
    pub fn max_consistency_gap(&self) -> f64 {
        let (m, t_len) = (self.log_alpha.nrows(), self.log_alpha.ncols());
        let mut gap = 0.0f64;
        let mut col = vec![0.0; m];
        for t in 0..t_len {
            for i in 0..m {
                col[i] = self.log_alpha[(i, t)] + self.log_beta[(i, t)];
            }
            gap = gap.max((f64::logsumexp(&col) - self.log_likelihood).abs());
        }
        gap
    }
}

fn log_density_table(n: &NaturalParams, obs: &ObservationSeries) -> DMatrix<f64> {
    let m = n.m();
    let xs = obs.values();
    let mut lp = DMatrix::zeros(m, xs.len());
    match n.emission() {
        EmissionParams::Poisson { lambda } => {
            let log_rate: Vec<f64> = lambda.iter().map(|l| l.ln()).collect();
            for (t, &x) in xs.iter().enumerate() {
                let lf = ln_gamma(x + 1.0);
                for i in 0..m {
                    lp[(i, t)] = x * log_rate[i] - lambda[i] - lf;
                }
            }
        }
        EmissionParams::Gaussian { mu, sigma } => {
            let log_sigma: Vec<f64> = sigma.iter().map(|s| s.ln()).collect();
            for (t, &x) in xs.iter().enumerate() {
                for i in 0..m {
                    let z = (x - mu[i]) / sigma[i];
                    lp[(i, t)] = -log_sigma[i] - 0.5 * LN_2PI - 0.5 * z * z;
                }
            }
        }
    }
    lp
}

/// Forward and backward passes over the series, kept in raw log space.
pub fn forward_backward(n: &NaturalParams, obs: &ObservationSeries) -> Result<ForwardBackwardCache> {
    obs.validate_family(n.emission().family())?;
    let m = n.m();
    let t_len = obs.len();
    let lp = log_density_table(n, obs);
    let log_gamma: DMatrix<f64> = n.gamma().map(|g| g.ln());
    let log_delta: Vec<f64> = n.delta().iter().map(|d| d.ln()).collect();

    let mut log_alpha = DMatrix::zeros(m, t_len);
    let mut terms = vec![0.0f64; m];
    for i in 0..m {
        log_alpha[(i, 0)] = log_delta[i] + lp[(i, 0)];
    }
    for t in 1..t_len {
        for j in 0..m {
            for i in 0..m {
                terms[i] = log_alpha[(i, t - 1)] + log_gamma[(i, j)];
            }
            log_alpha[(j, t)] = f64::logsumexp(&terms) + lp[(j, t)];
        }
    }

    let mut log_beta = DMatrix::zeros(m, t_len);
    for t in (0..t_len.saturating_sub(1)).rev() {
        for i in 0..m {
            for j in 0..m {
                terms[j] = log_gamma[(i, j)] + lp[(j, t + 1)] + log_beta[(j, t + 1)];
            }
            log_beta[(i, t)] = f64::logsumexp(&terms);
        }
    }

    for i in 0..m {
        terms[i] = log_alpha[(i, t_len - 1)];
    }
    let log_likelihood = f64::logsumexp(&terms);
    if log_likelihood.is_nan() {
        return Err(HmmError::NonFinite(
            "forward pass produced NaN log-likelihood".into(),
        ));
    }
    Ok(ForwardBackwardCache {
        log_alpha,
        log_beta,
        log_likelihood,
    })
}

/// Likelihood by exhaustive summation over all state sequences. Only for
/// instances with m^T at most 10^7.
pub fn brute_force_likelihood(n: &NaturalParams, obs: &ObservationSeries) -> Result<f64> {
    obs.validate_family(n.emission().family())?;
    let m = n.m();
    let t_len = obs.len();
    let paths = (m as f64).powi(t_len as i32);
    if paths > 1e7 {
        return Err(HmmError::TooLarge(format!(
            "{m}^{t_len} state sequences exceed the 10^7 enumeration cap"
        )));
    }
    let density = log_density_table(n, obs).map(f64::exp);
    let gamma = n.gamma();
    let delta = n.delta();

    fn descend(
        t: usize,
        state: usize,
        prob: f64,
        t_len: usize,
        m: usize,
        gamma: &DMatrix<f64>,
        density: &DMatrix<f64>,
    ) -> f64 {
        if t == t_len {
            return prob;
        }
        let mut total = 0.0;
        for next in 0..m {
            let p = prob * gamma[(state, next)] * density[(next, t)];
            if p > 0.0 {
                total += descend(t + 1, next, p, t_len, m, gamma, density);
            }
        }
        total
    }

    let mut total = 0.0;
    for first in 0..m {
        let p = delta[first] * density[(first, 0)];
        if p > 0.0 {
            total += descend(1, first, p, t_len, m, gamma, &density);
        }
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adcore::opcount;
    use crate::params::{working_from_natural, EmissionParams};
    use crate::testutil::{random_natural, random_series};
    use approx::assert_abs_diff_eq;
    use nalgebra::DMatrix;
    use rand::rngs::StdRng;
    use rand::SeedableRng;

    fn series(values: &[f64]) -> ObservationSeries {
        ObservationSeries::new(values.to_vec()).unwrap()
    }

    fn poisson_two_state() -> NaturalParams {
        NaturalParams::new(
            DMatrix::from_row_slice(2, 2, &[0.95, 0.05, 0.15, 0.85]),
            EmissionParams::Poisson {
                lambda: vec![1.0, 7.0],
            },
        )
        .unwrap()
    }

    #[test]
    fn single_state_poisson_at_zero() {
        let n = NaturalParams::new(
            DMatrix::from_row_slice(1, 1, &[1.0]),
            EmissionParams::Poisson { lambda: vec![1.0] },
        )
        .unwrap();
        let obs = series(&[0.0]);
        let v = nll_natural(&n, &obs).unwrap();
        assert_abs_diff_eq!(v, 1.0, epsilon = 1e-14);
    }

    #[test]
    fn single_state_gaussian_at_zero() {
        let n = NaturalParams::new(
            DMatrix::from_row_slice(1, 1, &[1.0]),
            EmissionParams::Gaussian {
                mu: vec![0.0],
                sigma: vec![1.0],
            },
        )
        .unwrap();
        let obs = series(&[0.0]);
        let v = nll_natural(&n, &obs).unwrap();
        assert_abs_diff_eq!(v, 0.5 * LN_2PI, epsilon = 1e-14);
    }

    #[test]
    fn matches_brute_force_on_fixed_series() {
        let n = poisson_two_state();
        let obs = series(&[0.0, 1.0, 0.0, 7.0, 9.0, 6.0, 0.0, 1.0]);
        let brute = brute_force_likelihood(&n, &obs).unwrap();
        let v = nll_natural(&n, &obs).unwrap();
        assert!(((-brute.ln()) - v).abs() / v.abs() < 1e-10);
    }

    #[test]
    fn brute_force_t1_is_mixture_density() {
        let n = poisson_two_state();
        let obs = series(&[3.0]);
        let expect: f64 = (0..2)
            .map(|i| {
                let lam: f64 = [1.0, 7.0][i];
                n.delta()[i] * (3.0 * lam.ln() - lam - ln_gamma(4.0)).exp()
            })
            .sum();
        assert_abs_diff_eq!(
            brute_force_likelihood(&n, &obs).unwrap(),
            expect,
            epsilon = 1e-15
        );
    }

    #[test]
    fn brute_force_matches_matrix_product() {
        // direct dense evaluation of delta P(x1) Gamma P(x2) Gamma P(x3) 1'
        let n = poisson_two_state();
        let obs = series(&[2.0, 0.0, 5.0]);
        let density = log_density_table(&n, &obs).map(f64::exp);
        let mut row = nalgebra::RowDVector::from_fn(2, |_, i| n.delta()[i] * density[(i, 0)]);
        for t in 1..3 {
            row = &row * n.gamma();
            for i in 0..2 {
                row[i] *= density[(i, t)];
            }
        }
        let direct: f64 = row.iter().sum();
        assert_abs_diff_eq!(
            brute_force_likelihood(&n, &obs).unwrap(),
            direct,
            epsilon = 1e-15
        );
    }

    #[test]
    fn brute_force_rejects_large_instances() {
        let n = poisson_two_state();
        let obs = series(&vec![1.0; 40]);
        assert!(matches!(
            brute_force_likelihood(&n, &obs),
            Err(HmmError::TooLarge(_))
        ));
    }

    #[test]
    fn scaled_forward_equals_brute_force_on_random_instances() {
        let mut rng = StdRng::seed_from_u64(7);
        for k in 0..200 {
            let family = if k % 2 == 0 {
                EmissionFamily::Poisson
            } else {
                EmissionFamily::Gaussian
            };
            let m = 1 + k % 3;
            let t_len = 1 + k % 8;
            let spec = EmissionSpec::new(family, m).unwrap();
            let n = random_natural(&mut rng, &spec);
            let obs = ObservationSeries::new(random_series(&mut rng, family, t_len)).unwrap();
            let brute = brute_force_likelihood(&n, &obs).unwrap();
            let v = nll_natural(&n, &obs).unwrap();
            let rel = ((-v).exp() - brute).abs() / brute;
            assert!(rel < 1e-10, "m={m} T={t_len} rel={rel}");
        }
    }

    #[test]
    fn nll_invariant_under_state_permutation() {
        let mut rng = StdRng::seed_from_u64(11);
        let spec = EmissionSpec::new(EmissionFamily::Gaussian, 3).unwrap();
        let n = random_natural(&mut rng, &spec);
        let obs = ObservationSeries::new(random_series(&mut rng, spec.family(), 25)).unwrap();
        let (sorted, _) = n.sort_states();
        let a = nll_natural(&n, &obs).unwrap();
        let b = nll_natural(&sorted, &obs).unwrap();
        assert_abs_diff_eq!(a, b, epsilon = 1e-12 * a.abs().max(1.0));
    }

    #[test]
    fn long_series_with_extreme_parameters_stays_finite() {
        let n = NaturalParams::new(
            DMatrix::from_row_slice(2, 2, &[0.999, 0.001, 0.001, 0.999]),
            EmissionParams::Poisson {
                lambda: vec![0.05, 80.0],
            },
        )
        .unwrap();
        let values: Vec<f64> = (0..100_000)
            .map(|t| if (t / 5000) % 2 == 0 { 0.0 } else { 95.0 })
            .collect();
        let obs = ObservationSeries::new(values).unwrap();
        let v = nll_natural(&n, &obs).unwrap();
        assert!(v.is_finite(), "nll = {v}");
    }

    #[test]
    fn forward_backward_consistency_and_duality() {
        let mut rng = StdRng::seed_from_u64(23);
        for _ in 0..20 {
            let spec = EmissionSpec::new(EmissionFamily::Gaussian, 3).unwrap();
            let n = random_natural(&mut rng, &spec);
            let obs = ObservationSeries::new(random_series(&mut rng, spec.family(), 20)).unwrap();
            let cache = forward_backward(&n, &obs).unwrap();
            assert!(cache.max_consistency_gap() < 1e-8);
            // last backward column is identically one (zero in log space)
            for i in 0..3 {
                assert_eq!(cache.log_beta[(i, 19)], 0.0);
            }
            // likelihood recovered from the backward pass
            let lp = log_density_table(&n, &obs);
            let back: Vec<f64> = (0..3)
                .map(|i| n.delta()[i].ln() + lp[(i, 0)] + cache.log_beta[(i, 0)])
                .collect();
            let ll_back = f64::logsumexp(&back);
            let rel = (ll_back - cache.log_likelihood).abs() / cache.log_likelihood.abs();
            assert!(rel < 1e-10);
        }
    }

    #[test]
    fn single_state_forward_backward_collapses_to_sums() {
        let n = NaturalParams::new(
            DMatrix::from_row_slice(1, 1, &[1.0]),
            EmissionParams::Gaussian {
                mu: vec![1.0],
                sigma: vec![2.0],
            },
        )
        .unwrap();
        let obs = series(&[0.5, 1.5, -3.0, 1.0]);
        let cache = forward_backward(&n, &obs).unwrap();
        let lp = log_density_table(&n, &obs);
        let mut prefix = 0.0;
        for t in 0..4 {
            prefix += lp[(0, t)];
            assert_abs_diff_eq!(cache.log_alpha[(0, t)], prefix, epsilon = 1e-12);
            let suffix: f64 = (t + 1..4).map(|s| lp[(0, s)]).sum();
            assert_abs_diff_eq!(cache.log_beta[(0, t)], suffix, epsilon = 1e-12);
        }
    }

    #[test]
    fn diff_function_value_equals_scalar_nll() {
        let n = poisson_two_state();
        let spec = n.spec();
        let obs = series(&[0.0, 1.0, 0.0, 7.0, 9.0, 6.0, 0.0, 1.0]);
        let w = working_from_natural(&n, &spec).unwrap();
        let f = NllFunction::new(&obs, &spec).unwrap();
        let via_engine = adcore::value(&f, w.as_slice()).unwrap();
        let via_module = nll(&w, &obs, &spec).unwrap();
        assert_eq!(via_engine, via_module);
    }

    #[test]
    fn gradient_work_bound_holds_on_the_likelihood() {
        let n = poisson_two_state();
        let spec = n.spec();
        let obs = ObservationSeries::new(
            (0..60).map(|t| if t % 7 == 0 { 6.0 } else { 1.0 }).collect(),
        )
        .unwrap();
        let w = working_from_natural(&n, &spec).unwrap();
        let f = NllFunction::new(&obs, &spec).unwrap();

        opcount::reset();
        let counted: Vec<opcount::Counted> =
            w.as_slice().iter().map(|&v| opcount::Counted(v)).collect();
        let _ = f.eval(&counted);
        let value_ops = opcount::current();

        opcount::reset();
        let _ = adcore::gradient(&f, w.as_slice()).unwrap();
        let gradient_ops = opcount::current();
        assert!(
            gradient_ops <= 6 * value_ops,
            "gradient_ops = {gradient_ops}, value_ops = {value_ops}"
        );
    }

    #[test]
    fn poisson_support_violation_is_a_domain_error() {
        let n = poisson_two_state();
        let obs = series(&[1.0, -2.0]);
        assert!(matches!(
            nll_natural(&n, &obs),
            Err(HmmError::Domain(_))
        ));
        let obs = series(&[1.0, 2.5]);
        assert!(matches!(nll_natural(&n, &obs), Err(HmmError::Domain(_))));
    }

    #[test]
    fn csv_ingestion() {
        use std::io::Write;
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.csv");
        let mut f = std::fs::File::create(&path).unwrap();
        writeln!(f, "count\n3\n0\n12").unwrap();
        let obs = ObservationSeries::from_csv(&path, true).unwrap();
        assert_eq!(obs.values(), &[3.0, 0.0, 12.0]);

        let path2 = dir.path().join("noheader.csv");
        let mut f = std::fs::File::create(&path2).unwrap();
        writeln!(f, "1.5\n-2.25").unwrap();
        let obs = ObservationSeries::from_csv(&path2, false).unwrap();
        assert_eq!(obs.values(), &[1.5, -2.25]);

        let bad = dir.path().join("bad.csv");
        let mut f = std::fs::File::create(&bad).unwrap();
        writeln!(f, "1\nxyz\n3").unwrap();
        let err = ObservationSeries::from_csv(&bad, false).unwrap_err();
        assert!(err.to_string().contains("line 2"), "{err}");
    }
}
