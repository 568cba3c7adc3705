//! Parameter representations for hidden Markov models.
//!
//! A model in "natural" space carries the row-stochastic transition matrix, the
//! emission parameters, and the stationary distribution used as the initial
//! distribution. Optimizers instead see a flat unconstrained "working" vector:
//! off-diagonal log-ratio parameters for the transition matrix (reference =
//! the diagonal entry of each row), log rates for Poisson, and means plus log
//! standard deviations for Gaussian emissions.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::adcore::DiffScalar;
use crate::error::{HmmError, Result};

/// Conditional distribution family of the observations.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmissionFamily {
    Poisson,
    Gaussian,
}

impl std::fmt::Display for EmissionFamily {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            EmissionFamily::Poisson => write!(f, "poisson"),
            EmissionFamily::Gaussian => write!(f, "gaussian"),
        }
    }
}

impl std::str::FromStr for EmissionFamily {
    type Err = HmmError;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "poisson" => Ok(EmissionFamily::Poisson),
            "gaussian" | "normal" => Ok(EmissionFamily::Gaussian),
            other => Err(HmmError::InvalidArgument(format!(
                "unknown emission family `{other}` (expected poisson or gaussian)"
            ))),
        }
    }
}

/// Emission family plus state count; fixed for a model's lifetime.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EmissionSpec {
    family: EmissionFamily,
    m: usize,
}

impl EmissionSpec {
    pub fn new(family: EmissionFamily, m: usize) -> Result<Self> {
        if m < 1 {
            return Err(HmmError::InvalidArgument(
                "state count m must be at least 1".into(),
            ));
        }
        Ok(EmissionSpec { family, m })
    }

    pub fn family(&self) -> EmissionFamily {
        self.family
    }

    pub fn m(&self) -> usize {
        self.m
    }

    /// Number of emission entries in the working vector.
    pub fn emission_len(&self) -> usize {
        match self.family {
            EmissionFamily::Poisson => self.m,
            EmissionFamily::Gaussian => 2 * self.m,
        }
    }

    /// Length of the working vector: m(m-1) transition entries plus emissions.
    pub fn working_len(&self) -> usize {
        self.m * (self.m - 1) + self.emission_len()
    }

    /// Number of free parameters, as counted by AIC/BIC.
    pub fn free_param_count(&self) -> usize {
        self.working_len()
    }
}

/// Emission parameters in natural (constrained) space.
#[derive(Clone, Debug, PartialEq)]
pub enum EmissionParams {
    Poisson { lambda: Vec<f64> },
    Gaussian { mu: Vec<f64>, sigma: Vec<f64> },
}

impl EmissionParams {
    pub fn m(&self) -> usize {
        match self {
            EmissionParams::Poisson { lambda } => lambda.len(),
            EmissionParams::Gaussian { mu, .. } => mu.len(),
        }
    }

    pub fn family(&self) -> EmissionFamily {
        match self {
            EmissionParams::Poisson { .. } => EmissionFamily::Poisson,
            EmissionParams::Gaussian { .. } => EmissionFamily::Gaussian,
        }
    }

    /// Location parameters that define the state ordering (rates or means).
    pub fn locations(&self) -> &[f64] {
        match self {
            EmissionParams::Poisson { lambda } => lambda,
            EmissionParams::Gaussian { mu, .. } => mu,
        }
    }

    fn validate(&self) -> Result<()> {
        match self {
            EmissionParams::Poisson { lambda } => {
                if lambda.iter().any(|&l| !(l > 0.0) || !l.is_finite()) {
                    return Err(HmmError::Domain(
                        "Poisson rates must be finite and strictly positive".into(),
                    ));
                }
            }
            EmissionParams::Gaussian { mu, sigma } => {
                if mu.len() != sigma.len() {
                    return Err(HmmError::Dimension(
                        "mu and sigma must have the same length".into(),
                    ));
                }
                if mu.iter().any(|v| !v.is_finite()) {
                    return Err(HmmError::Domain("Gaussian means must be finite".into()));
                }
                if sigma.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
                    return Err(HmmError::Domain(
                        "Gaussian standard deviations must be finite and strictly positive".into(),
                    ));
                }
            }
        }
        Ok(())
    }

    fn permuted(&self, perm: &[usize]) -> Self {
        let pick = |v: &[f64]| perm.iter().map(|&p| v[p]).collect::<Vec<_>>();
        match self {
            EmissionParams::Poisson { lambda } => EmissionParams::Poisson {
                lambda: pick(lambda),
            },
            EmissionParams::Gaussian { mu, sigma } => EmissionParams::Gaussian {
                mu: pick(mu),
                sigma: pick(sigma),
            },
        }
    }
}

/// Constrained model parameters: transition matrix, emissions, and the
/// stationary distribution (used as the initial distribution).
#[derive(Clone, Debug, PartialEq)]
pub struct NaturalParams {
    gamma: DMatrix<f64>,
    emission: EmissionParams,
    delta: DVector<f64>,
}

const ROW_SUM_TOL: f64 = 1e-12;
const DELTA_TOL: f64 = 1e-10;

impl NaturalParams {
    /// Build from a transition matrix and emissions; the stationary
    /// distribution is solved from the transition matrix.
    pub fn new(gamma: DMatrix<f64>, emission: EmissionParams) -> Result<Self> {
        let delta = stationary_distribution(&gamma)?;
        Self::with_delta(gamma, emission, delta)
    }

    /// Build with an explicit stationary vector (validated as a fixed point).
    pub fn with_delta(
        gamma: DMatrix<f64>,
        emission: EmissionParams,
        delta: DVector<f64>,
    ) -> Result<Self> {
        let m = emission.m();
        if gamma.nrows() != m || gamma.ncols() != m {
            return Err(HmmError::Dimension(format!(
                "transition matrix is {}x{}, expected {m}x{m}",
                gamma.nrows(),
                gamma.ncols()
            )));
        }
        if delta.len() != m {
            return Err(HmmError::Dimension(format!(
                "stationary vector has length {}, expected {m}",
                delta.len()
            )));
        }
        emission.validate()?;
        for i in 0..m {
            let mut row_sum = 0.0;
            for j in 0..m {
                let g = gamma[(i, j)];
                if !(0.0..=1.0).contains(&g) || !g.is_finite() {
                    return Err(HmmError::Domain(format!(
                        "transition probability ({i},{j}) = {g} outside [0,1]"
                    )));
                }
                row_sum += g;
            }
            if (row_sum - 1.0).abs() > ROW_SUM_TOL {
                return Err(HmmError::Domain(format!(
                    "transition row {i} sums to {row_sum}, not 1"
                )));
            }
        }
        let dsum: f64 = delta.iter().sum();
        if (dsum - 1.0).abs() > DELTA_TOL || delta.iter().any(|&d| d < -DELTA_TOL) {
            return Err(HmmError::Domain(
                "stationary vector must be a probability distribution".into(),
            ));
        }
        let fixed_point_gap = (delta.transpose() * &gamma - delta.transpose())
            .iter()
            .fold(0.0f64, |a, v| a.max(v.abs()));
        if fixed_point_gap > DELTA_TOL {
            return Err(HmmError::Domain(format!(
                "delta is not stationary for gamma (max |deltaG - delta| = {fixed_point_gap:.3e})"
            )));
        }
        Ok(NaturalParams {
            gamma,
            emission,
            delta,
        })
    }

    pub fn gamma(&self) -> &DMatrix<f64> {
        &self.gamma
    }

    pub fn emission(&self) -> &EmissionParams {
        &self.emission
    }

    pub fn delta(&self) -> &DVector<f64> {
        &self.delta
    }

    pub fn m(&self) -> usize {
        self.emission.m()
    }

    pub fn spec(&self) -> EmissionSpec {
        EmissionSpec {
            family: self.emission.family(),
            m: self.m(),
        }
    }

    /// Relabel states so emission locations (rates or means) are ascending,
    /// permuting rows/columns of the transition matrix and the stationary
    /// vector consistently. Returns the relabeled parameters and the applied
    /// permutation (`new index -> old index`).
    pub fn sort_states(&self) -> (Self, Vec<usize>) {
        let m = self.m();
        let mut perm: Vec<usize> = (0..m).collect();
        let loc = self.emission.locations();
        perm.sort_by(|&a, &b| loc[a].partial_cmp(&loc[b]).unwrap_or(std::cmp::Ordering::Equal));
        let mut gamma = DMatrix::zeros(m, m);
        let mut delta = DVector::zeros(m);
        for k in 0..m {
            delta[k] = self.delta[perm[k]];
            for l in 0..m {
                gamma[(k, l)] = self.gamma[(perm[k], perm[l])];
            }
        }
        let sorted = NaturalParams {
            gamma,
            emission: self.emission.permuted(&perm),
            delta,
        };
        (sorted, perm)
    }

    /// True if emission locations are nondecreasing.
    pub fn is_sorted(&self) -> bool {
        self.emission.locations().windows(2).all(|w| w[0] <= w[1])
    }

    /// Flat vector of natural parameters in reporting order: transition matrix
    /// row-major, then emission parameters, then the stationary vector.
    pub fn flatten(&self) -> Vec<f64> {
        let m = self.m();
        let mut out = Vec::with_capacity(m * m + self.spec().emission_len() + m);
        for i in 0..m {
            for j in 0..m {
                out.push(self.gamma[(i, j)]);
            }
        }
        match &self.emission {
            EmissionParams::Poisson { lambda } => out.extend_from_slice(lambda),
            EmissionParams::Gaussian { mu, sigma } => {
                out.extend_from_slice(mu);
                out.extend_from_slice(sigma);
            }
        }
        out.extend(self.delta.iter());
        out
    }

    /// Names matching [`Self::flatten`], e.g. `gamma_1_2`, `lambda_1`, `delta_2`.
    pub fn flat_names(&self) -> Vec<String> {
        flat_param_names(&self.spec())
    }

    pub fn to_json(&self) -> Result<String> {
        let m = self.m();
        let mut gamma = Vec::with_capacity(m * m);
        for i in 0..m {
            for j in 0..m {
                gamma.push(self.gamma[(i, j)]);
            }
        }
        let (lambda, mu, sigma) = match &self.emission {
            EmissionParams::Poisson { lambda } => (Some(lambda.clone()), None, None),
            EmissionParams::Gaussian { mu, sigma } => {
                (None, Some(mu.clone()), Some(sigma.clone()))
            }
        };
        let mirror = ModelJson {
            family: self.emission.family(),
            m,
            gamma,
            lambda,
            mu,
            sigma,
            delta: Some(self.delta.iter().copied().collect()),
        };
        Ok(serde_json::to_string_pretty(&mirror)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let mirror: ModelJson = serde_json::from_str(text)?;
        let m = mirror.m;
        if mirror.gamma.len() != m * m {
            return Err(HmmError::Dimension(format!(
                "gamma has {} entries, expected {}",
                mirror.gamma.len(),
                m * m
            )));
        }
        let gamma = DMatrix::from_row_slice(m, m, &mirror.gamma);
        let emission = match mirror.family {
            EmissionFamily::Poisson => {
                let lambda = mirror.lambda.ok_or_else(|| {
                    HmmError::InvalidArgument("poisson model requires a `lambda` field".into())
                })?;
                if lambda.len() != m {
                    return Err(HmmError::Dimension("lambda length differs from m".into()));
                }
                EmissionParams::Poisson { lambda }
            }
            EmissionFamily::Gaussian => {
                let mu = mirror.mu.ok_or_else(|| {
                    HmmError::InvalidArgument("gaussian model requires a `mu` field".into())
                })?;
                let sigma = mirror.sigma.ok_or_else(|| {
                    HmmError::InvalidArgument("gaussian model requires a `sigma` field".into())
                })?;
                if mu.len() != m || sigma.len() != m {
                    return Err(HmmError::Dimension("mu/sigma length differs from m".into()));
                }
                EmissionParams::Gaussian { mu, sigma }
            }
        };
        match mirror.delta {
            Some(delta) if delta.len() == m => {
                Self::with_delta(gamma, emission, DVector::from_vec(delta))
            }
            Some(_) => Err(HmmError::Dimension("delta length differs from m".into())),
            None => Self::new(gamma, emission),
        }
    }
}

/// Parameter names in the order produced by [`NaturalParams::flatten`].
pub fn flat_param_names(spec: &EmissionSpec) -> Vec<String> {
    let m = spec.m();
    let mut names = Vec::new();
    for i in 1..=m {
        for j in 1..=m {
            names.push(format!("gamma_{i}_{j}"));
        }
    }
    match spec.family() {
        EmissionFamily::Poisson => {
            for i in 1..=m {
                names.push(format!("lambda_{i}"));
            }
        }
        EmissionFamily::Gaussian => {
            for i in 1..=m {
                names.push(format!("mu_{i}"));
            }
            for i in 1..=m {
                names.push(format!("sigma_{i}"));
            }
        }
    }
    for i in 1..=m {
        names.push(format!("delta_{i}"));
    }
    names
}

#[derive(Serialize, Deserialize)]
struct ModelJson {
    family: EmissionFamily,
    m: usize,
    gamma: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    lambda: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    mu: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    sigma: Option<Vec<f64>>,
    #[serde(default)]
    delta: Option<Vec<f64>>,
}

/// Flat unconstrained parameter vector fed to optimizers: the m(m-1)
/// off-diagonal transition entries row-major, then the emission block.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct WorkingParams(Vec<f64>);

impl WorkingParams {
    pub fn new(values: Vec<f64>, spec: &EmissionSpec) -> Result<Self> {
        if values.len() != spec.working_len() {
            return Err(HmmError::Dimension(format!(
                "working vector has length {}, expected {}",
                values.len(),
                spec.working_len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(HmmError::Domain(format!(
                "working parameter {i} is not finite"
            )));
        }
        Ok(WorkingParams(values))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }
}

/// Natural-space values computed generically from a working vector; the
/// transition matrix is row-major, `scale` is empty for Poisson models.
pub(crate) struct NaturalValues<S> {
    pub gamma: Vec<S>,
    pub loc: Vec<S>,
    pub scale: Vec<S>,
    pub delta: Vec<S>,
}

/// Transition matrix from working parameters, row-major. Exponentials are
/// shifted by the row maximum so any finite input yields a valid row.
pub(crate) fn gamma_from_working_values<S: DiffScalar>(w: &[S], m: usize) -> Vec<S> {
    debug_assert!(w.len() >= m * (m - 1));
    let proto = w.first().copied();
    let mut gamma: Vec<S> = Vec::with_capacity(m * m);
    if m == 1 {
        let one = proto.expect("working vector is never empty").lift(1.0);
        return vec![one];
    }
    let proto = proto.unwrap();
    for i in 0..m {
        let row = &w[i * (m - 1)..(i + 1) * (m - 1)];
        let shift = row.iter().fold(0.0f64, |a, t| a.max(t.raw()));
        let shifted: Vec<S> = row.iter().map(|t| t.add_c(-shift).exp()).collect();
        let mut denom = proto.lift((-shift).exp());
        for &e in &shifted {
            denom = denom + e;
        }
        let offdiag: Vec<S> = shifted.iter().map(|&e| e / denom).collect();
        // diagonal = 1 - sum of off-diagonals
        let mut diag = proto.lift(1.0);
        for &g in &offdiag {
            diag = diag - g;
        }
        let mut k = 0;
        for j in 0..m {
            if j == i {
                gamma.push(diag);
            } else {
                gamma.push(offdiag[k]);
                k += 1;
            }
        }
    }
    gamma
}

/// Solve a dense linear system by Gaussian elimination with partial pivoting,
/// generically over plain and recorded scalars. A singular system surfaces as
/// non-finite output (division by a zero pivot), which callers detect.
pub(crate) fn solve_dense<S: DiffScalar>(mut a: Vec<S>, mut b: Vec<S>, n: usize) -> Vec<S> {
    debug_assert_eq!(a.len(), n * n);
    debug_assert_eq!(b.len(), n);
    for col in 0..n {
        let mut piv = col;
        let mut best = a[col * n + col].raw().abs();
        for r in col + 1..n {
            let v = a[r * n + col].raw().abs();
            if v > best {
                best = v;
                piv = r;
            }
        }
        if piv != col {
            for c in 0..n {
                a.swap(col * n + c, piv * n + c);
            }
            b.swap(col, piv);
        }
        let d = a[col * n + col];
        for r in col + 1..n {
            let factor = a[r * n + col] / d;
            for c in col + 1..n {
                a[r * n + c] = a[r * n + c] - factor * a[col * n + c];
            }
            b[r] = b[r] - factor * b[col];
        }
    }
    let mut x = b.clone();
    for r in (0..n).rev() {
        let mut s = x[r];
        for c in r + 1..n {
            s = s - a[r * n + c] * x[c];
        }
        x[r] = s / a[r * n + r];
    }
    x
}

/// Stationary distribution of a row-major transition matrix, as the solution
/// of `(I - Gamma + U)' delta' = 1` with `U` the all-ones matrix.
pub(crate) fn stationary_values<S: DiffScalar>(gamma: &[S], m: usize) -> Vec<S> {
    let proto = gamma[0];
    let mut a = Vec::with_capacity(m * m);
    for j in 0..m {
        for i in 0..m {
            // transposed entry: (I - Gamma + U)[i, j]
            let ident = if i == j { 1.0 } else { 0.0 };
            a.push((-gamma[i * m + j]).add_c(ident + 1.0));
        }
    }
    let b = vec![proto.lift(1.0); m];
    solve_dense(a, b, m)
}

/// All natural-space values from a working vector, generically.
pub(crate) fn natural_values_from_working<S: DiffScalar>(
    w: &[S],
    spec: &EmissionSpec,
) -> NaturalValues<S> {
    let m = spec.m();
    let gamma = gamma_from_working_values(w, m);
    let em = &w[m * (m - 1)..];
    let (loc, scale) = match spec.family() {
        EmissionFamily::Poisson => (em.iter().map(|&e| e.exp()).collect(), Vec::new()),
        EmissionFamily::Gaussian => (
            em[..m].to_vec(),
            em[m..].iter().map(|&e| e.exp()).collect(),
        ),
    };
    let delta = stationary_values(&gamma, m);
    NaturalValues {
        gamma,
        loc,
        scale,
        delta,
    }
}

/// Map a working vector to natural parameters. The stationary distribution is
/// recomputed from the resulting transition matrix.
pub fn natural_from_working(w: &WorkingParams, spec: &EmissionSpec) -> Result<NaturalParams> {
    if w.len() != spec.working_len() {
        return Err(HmmError::Dimension(format!(
            "working vector has length {}, expected {}",
            w.len(),
            spec.working_len()
        )));
    }
    let m = spec.m();
    let values = natural_values_from_working::<f64>(w.as_slice(), spec);
    let mut gamma = DMatrix::from_row_slice(m, m, &values.gamma);
    // guard the diagonal against rounding just below zero in extreme rows
    for i in 0..m {
        if gamma[(i, i)] < 0.0 {
            gamma[(i, i)] = 0.0;
        }
    }
    if gamma.iter().any(|v| !v.is_finite()) {
        return Err(HmmError::NonFinite(
            "transition matrix from working parameters is not finite".into(),
        ));
    }
    let emission = match spec.family() {
        EmissionFamily::Poisson => EmissionParams::Poisson { lambda: values.loc },
        EmissionFamily::Gaussian => EmissionParams::Gaussian {
            mu: values.loc,
            sigma: values.scale,
        },
    };
    if emission
        .locations()
        .iter()
        .any(|v| !v.is_finite())
        || matches!(&emission, EmissionParams::Gaussian { sigma, .. } if sigma.iter().any(|v| !v.is_finite()))
    {
        return Err(HmmError::NonFinite(
            "emission parameters from working parameters overflowed".into(),
        ));
    }
    let delta = stationary_distribution(&gamma)?;
    NaturalParams::with_delta(gamma, emission, delta)
}

/// Map natural parameters to the working vector. Requires strictly positive
/// transition probabilities (the log-ratio map is undefined at zero entries).
pub fn working_from_natural(n: &NaturalParams, spec: &EmissionSpec) -> Result<WorkingParams> {
    if n.spec() != *spec {
        return Err(HmmError::Dimension(format!(
            "model is {}-state {}, expected {}-state {}",
            n.m(),
            n.emission().family(),
            spec.m(),
            spec.family()
        )));
    }
    let m = spec.m();
    let mut w = Vec::with_capacity(spec.working_len());
    for i in 0..m {
        let diag = n.gamma()[(i, i)];
        if diag <= 0.0 {
            return Err(HmmError::Domain(format!(
                "transition row {i} has zero diagonal entry; the working map is undefined"
            )));
        }
        for j in 0..m {
            if j != i {
                w.push((n.gamma()[(i, j)] / diag).ln());
            }
        }
    }
    match n.emission() {
        EmissionParams::Poisson { lambda } => w.extend(lambda.iter().map(|l| l.ln())),
        EmissionParams::Gaussian { mu, sigma } => {
            w.extend_from_slice(mu);
            w.extend(sigma.iter().map(|s| s.ln()));
        }
    }
    if let Some(i) = w.iter().position(|v| !v.is_finite()) {
        return Err(HmmError::Domain(format!(
            "working parameter {i} is not finite (a transition probability of zero \
             has no finite working representation)"
        )));
    }
    Ok(WorkingParams(w))
}

/// Stationary distribution of a row-stochastic matrix, by dense linear solve
/// of `(I - Gamma + U)' delta' = 1`.
pub fn stationary_distribution(gamma: &DMatrix<f64>) -> Result<DVector<f64>> {
    let m = gamma.nrows();
    if gamma.ncols() != m || m == 0 {
        return Err(HmmError::Dimension(format!(
            "transition matrix is {}x{}",
            gamma.nrows(),
            gamma.ncols()
        )));
    }
    for i in 0..m {
        let row_sum: f64 = (0..m).map(|j| gamma[(i, j)]).sum();
        if (row_sum - 1.0).abs() > 1e-8 || (0..m).any(|j| gamma[(i, j)] < -1e-14) {
            return Err(HmmError::Domain(format!(
                "matrix is not row-stochastic (row {i} sums to {row_sum})"
            )));
        }
    }
    let flat: Vec<f64> = (0..m)
        .flat_map(|i| (0..m).map(move |j| gamma[(i, j)]))
        .collect();
    let mut delta = DVector::from_vec(stationary_values(&flat, m));
    if delta.iter().any(|v| !v.is_finite()) {
        return Err(HmmError::Numerical(
            "stationary system is singular (chain may be reducible)".into(),
        ));
    }
    for d in delta.iter_mut() {
        if *d < 0.0 && *d > -1e-12 {
            *d = 0.0;
        }
    }
    let sum: f64 = delta.iter().sum();
    delta /= sum;
    let gap = (delta.transpose() * gamma - delta.transpose())
        .iter()
        .fold(0.0f64, |a, v| a.max(v.abs()));
    if !(gap < DELTA_TOL) || delta.iter().any(|&d| d < 0.0) {
        return Err(HmmError::Numerical(format!(
            "stationary solve did not produce a fixed point (max |deltaG - delta| = {gap:.3e}); \
             the chain may be reducible"
        )));
    }
    Ok(delta)
}
