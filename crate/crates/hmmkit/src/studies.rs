//! Simulation-study harness: speed/iteration benchmarking, estimation
//! accuracy, robustness to poor initial values over structured init grids, and
//! the hybrid-versus-direct-Newton convergence comparison.
//!
//! Every replication derives its own RNG seed from the study seed and its
//! index, so results are reproducible bit-for-bit (durations aside) no matter
//! how the work pool schedules them.

use std::time::Instant;

use nalgebra::DMatrix;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adcore::DiffFunction;
use crate::error::{HmmError, Result};
use crate::inference::FitResult;
use crate::likelihood::{NllFunction, ObservationSeries};
use crate::optim::{
    fit, Algorithm, OptimStatus, OptimizerConfig, Problem, SimplexState,
};
use crate::params::{
    flat_param_names, natural_from_working, working_from_natural, EmissionFamily, EmissionParams,
    EmissionSpec, NaturalParams, WorkingParams,
};
use crate::stats::{derive_seed, median, quantile};
use rand::SeedableRng;

/// Which experiment family a study runs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StudyDesign {
    Speed,
    Accuracy,
    Robustness,
    Hybrid,
}

/// Study configuration. For the robustness and hybrid designs `replications`
/// caps the number of initial-value candidates drawn from the grid.
#[derive(Clone, Debug)]
pub struct StudyConfig {
    pub design: StudyDesign,
    pub spec: EmissionSpec,
    pub truth: NaturalParams,
    pub t_len: usize,
    pub replications: usize,
    pub optimizers: Vec<OptimizerConfig>,
    pub seed: u64,
    pub nll_margin: f64,
}

#[derive(Serialize, Deserialize)]
struct StudyConfigJson {
    design: StudyDesign,
    spec: EmissionSpec,
    truth: serde_json::Value,
    #[serde(rename = "T")]
    t_len: usize,
    replications: usize,
    optimizers: Vec<OptimizerConfig>,
    seed: u64,
    #[serde(default = "default_margin")]
    nll_margin: f64,
}

fn default_margin() -> f64 {
    0.05
}

impl StudyConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let mirror: StudyConfigJson = serde_json::from_str(text)?;
        let truth = NaturalParams::from_json(&mirror.truth.to_string())?;
        let cfg = StudyConfig {
            design: mirror.design,
            spec: mirror.spec,
            truth,
            t_len: mirror.t_len,
            replications: mirror.replications,
            optimizers: mirror.optimizers,
            seed: mirror.seed,
            nll_margin: mirror.nll_margin,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> Result<String> {
        let mirror = StudyConfigJson {
            design: self.design,
            spec: self.spec,
            truth: serde_json::from_str(&self.truth.to_json()?)?,
            t_len: self.t_len,
            replications: self.replications,
            optimizers: self.optimizers.clone(),
            seed: self.seed,
            nll_margin: self.nll_margin,
        };
        Ok(serde_json::to_string_pretty(&mirror)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.replications < 1 {
            return Err(HmmError::InvalidArgument(
                "replications must be at least 1".into(),
            ));
        }
        if !(self.nll_margin > 0.0 && self.nll_margin < 1.0) {
            return Err(HmmError::InvalidArgument(format!(
                "nll_margin must lie in (0,1), got {}",
                self.nll_margin
            )));
        }
        if self.t_len < 1 {
            return Err(HmmError::InvalidArgument("T must be at least 1".into()));
        }
        if self.optimizers.is_empty() {
            return Err(HmmError::InvalidArgument(
                "at least one optimizer is required".into(),
            ));
        }
        for o in &self.optimizers {
            o.validate()?;
        }
        if self.truth.spec() != self.spec {
            return Err(HmmError::Dimension(
                "truth parameters do not match the spec".into(),
            ));
        }
        if self.design == StudyDesign::Hybrid {
            if self.optimizers.len() != 1 || self.optimizers[0].algorithm != Algorithm::NewtonType
            {
                return Err(HmmError::InvalidArgument(
                    "the hybrid design expects exactly one newton optimizer config".into(),
                ));
            }
        }
        Ok(())
    }
}

/// One (replication, optimizer) run.
#[derive(Clone, Debug, Serialize)]
pub struct StudyRecord {
    pub replication: usize,
    pub optimizer: String,
    pub duration_ns: u64,
    pub iterations: u64,
    pub status: OptimStatus,
    pub nll: f64,
    /// natural parameters at the final point, states sorted ascending
    pub estimates: Vec<f64>,
    /// whether the run reached the reference optimum; only defined for
    /// converged runs in designs that establish a reference
    pub found_global: Option<bool>,
}

/// Write the record table as CSV; estimate columns are named after the
/// natural parameters.
pub fn write_records_csv<W: std::io::Write>(
    records: &[StudyRecord],
    spec: &EmissionSpec,
    out: W,
) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec![
        "replication".to_string(),
        "optimizer".to_string(),
        "duration_ns".to_string(),
        "iterations".to_string(),
        "status".to_string(),
        "nll".to_string(),
        "found_global".to_string(),
    ];
    header.extend(flat_param_names(spec));
    w.write_record(&header)?;
    for r in records {
        let mut row = vec![
            r.replication.to_string(),
            r.optimizer.clone(),
            r.duration_ns.to_string(),
            r.iterations.to_string(),
            r.status.to_string(),
            r.nll.to_string(),
            r.found_global.map(|b| b.to_string()).unwrap_or_default(),
        ];
        row.extend(r.estimates.iter().map(|v| v.to_string()));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Simulate a series of length `t_len`: the initial state from the stationary
/// distribution, transitions along the chain, observations from the state's
/// emission. Returns the observations and the hidden path (0-based).
pub fn simulate(
    n: &NaturalParams,
    spec: &EmissionSpec,
    t_len: usize,
    seed: u64,
) -> Result<(ObservationSeries, Vec<usize>)> {
    if n.spec() != *spec {
        return Err(HmmError::Dimension(
            "model parameters do not match the spec".into(),
        ));
    }
    if t_len < 1 {
        return Err(HmmError::InvalidArgument("T must be at least 1".into()));
    }
    let m = n.m();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pick = |weights: &[f64], u: f64| -> usize {
        let mut acc = 0.0;
        for (i, &w) in weights.iter().enumerate() {
            acc += w;
            if u < acc {
                return i;
            }
        }
        weights.len() - 1
    };
    let delta: Vec<f64> = n.delta().iter().copied().collect();
    let rows: Vec<Vec<f64>> = (0..m)
        .map(|i| (0..m).map(|j| n.gamma()[(i, j)]).collect())
        .collect();

    enum Sampler {
        Pois(Poisson<f64>),
        Norm(Normal<f64>),
    }
    let samplers: Vec<Sampler> = match n.emission() {
        EmissionParams::Poisson { lambda } => lambda
            .iter()
            .map(|&l| {
                Poisson::new(l).map(Sampler::Pois).map_err(|e| {
                    HmmError::InvalidArgument(format!("invalid Poisson rate {l}: {e}"))
                })
            })
            .collect::<Result<_>>()?,
        EmissionParams::Gaussian { mu, sigma } => mu
            .iter()
            .zip(sigma)
            .map(|(&m0, &s0)| {
                Normal::new(m0, s0).map(Sampler::Norm).map_err(|e| {
                    HmmError::InvalidArgument(format!("invalid Gaussian ({m0},{s0}): {e}"))
                })
            })
            .collect::<Result<_>>()?,
    };

    let mut path = Vec::with_capacity(t_len);
    let mut values = Vec::with_capacity(t_len);
    let mut state = pick(&delta, rng.random::<f64>());
    for _ in 0..t_len {
        path.push(state);
        let x = match &samplers[state] {
            Sampler::Pois(d) => d.sample(&mut rng),
            Sampler::Norm(d) => d.sample(&mut rng),
        };
        values.push(x);
        state = pick(&rows[state], rng.random::<f64>());
    }
    Ok((ObservationSeries::new(values)?, path))
}

/// True iff every state 0..m-1 appears in the path.
pub fn all_states_visited(path: &[usize], m: usize) -> bool {
    let mut seen = vec![false; m];
    for &s in path {
        if s < m {
            seen[s] = true;
        }
    }
    seen.iter().all(|&b| b)
}

/// Redraw until the simulated hidden path visits every state.
pub fn simulate_until_visited(
    n: &NaturalParams,
    spec: &EmissionSpec,
    t_len: usize,
    seed: u64,
) -> Result<(ObservationSeries, Vec<usize>)> {
    for attempt in 0..10_000u64 {
        let (obs, path) = simulate(n, spec, t_len, derive_seed(seed, attempt))?;
        if all_states_visited(&path, n.m()) {
            return Ok((obs, path));
        }
    }
    Err(HmmError::StudyDegenerate(
        "no simulated path visited every state in 10000 attempts".into(),
    ))
}

/// Initial-value grid for one observed series: data-driven emission candidates
/// crossed with a 0.1-step grid of transition rows. Candidates are indexable
/// without materializing the full Cartesian product.
pub struct InitGrid {
    spec: EmissionSpec,
    emission: EmissionCandidates,
    /// per-row off-diagonal options (same list for every row)
    row_options: Vec<Vec<f64>>,
}

enum EmissionCandidates {
    /// ascending rate combinations
    Poisson(Vec<Vec<f64>>),
    /// ascending mean combinations x sd tuples (with repetition)
    Gaussian {
        mu_combos: Vec<Vec<f64>>,
        sigma_points: Vec<f64>,
    },
}

fn arithmetic_grid(from: f64, to: f64, step: f64) -> Vec<f64> {
    let mut v = Vec::new();
    let mut k = 0u32;
    loop {
        let x = from + step * k as f64;
        if x > to + 1e-9 {
            break;
        }
        v.push(x);
        k += 1;
    }
    v
}

fn ascending_combinations(points: &[f64], m: usize) -> Vec<Vec<f64>> {
    fn rec(points: &[f64], m: usize, start: usize, cur: &mut Vec<f64>, out: &mut Vec<Vec<f64>>) {
        if cur.len() == m {
            out.push(cur.clone());
            return;
        }
        let remaining = m - cur.len();
        for i in start..=points.len().saturating_sub(remaining) {
            cur.push(points[i]);
            rec(points, m, i + 1, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    rec(points, m, 0, &mut Vec::new(), &mut out);
    out
}

/// Off-diagonal tuples for one transition row: every entry from {0.1,...,0.9}
/// with the diagonal remainder at least 0.1.
fn gamma_row_options(m: usize) -> Vec<Vec<f64>> {
    let grid: Vec<f64> = (1..=9).map(|k| k as f64 / 10.0).collect();
    fn rec(grid: &[f64], left: usize, sum: f64, cur: &mut Vec<f64>, out: &mut Vec<Vec<f64>>) {
        if left == 0 {
            out.push(cur.clone());
            return;
        }
        for &g in grid {
            if sum + g <= 0.9 + 1e-9 {
                cur.push(g);
                rec(grid, left - 1, sum + g, cur, out);
                cur.pop();
            }
        }
    }
    let mut out = Vec::new();
    rec(&grid, m - 1, 0.0, &mut Vec::new(), &mut out);
    out
}

/// Build the initial-value grid for a series.
pub fn build_init_grid(obs: &ObservationSeries, spec: &EmissionSpec) -> Result<InitGrid> {
    if obs.len() < 2 {
        return Err(HmmError::InvalidArgument(
            "the init grid needs at least two observations".into(),
        ));
    }
    let xs = obs.values();
    let x_min = xs.iter().cloned().fold(f64::INFINITY, f64::min);
    let x_max = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if x_max <= x_min {
        return Err(HmmError::DegenerateData(
            "constant series admits no initial-value grid".into(),
        ));
    }
    let m = spec.m();
    let emission = match spec.family() {
        EmissionFamily::Poisson => {
            let start = 0.5f64.max(x_min);
            let points = arithmetic_grid(start, x_max, 0.5);
            if points.len() < m {
                return Err(HmmError::DegenerateData(format!(
                    "only {} rate candidates in [{start}, {x_max}] for {m} states",
                    points.len()
                )));
            }
            EmissionCandidates::Poisson(ascending_combinations(&points, m))
        }
        EmissionFamily::Gaussian => {
            let points = arithmetic_grid(x_min, x_max, 0.5);
            if points.len() < m {
                return Err(HmmError::DegenerateData(format!(
                    "only {} mean candidates in [{x_min}, {x_max}] for {m} states",
                    points.len()
                )));
            }
            let mean = xs.iter().sum::<f64>() / xs.len() as f64;
            let lo = ((x_max - x_min).powi(2) / (2.0 * xs.len() as f64)).sqrt();
            let hi = ((x_max - mean) * (mean - x_min)).sqrt().max(lo);
            let sigma_points: Vec<f64> = (0..10)
                .map(|k| lo + (hi - lo) * k as f64 / 9.0)
                .collect();
            EmissionCandidates::Gaussian {
                mu_combos: ascending_combinations(&points, m),
                sigma_points,
            }
        }
    };
    Ok(InitGrid {
        spec: *spec,
        emission,
        row_options: gamma_row_options(m),
    })
}

impl InitGrid {
    fn emission_count(&self) -> u64 {
        match &self.emission {
            EmissionCandidates::Poisson(combos) => combos.len() as u64,
            EmissionCandidates::Gaussian {
                mu_combos,
                sigma_points,
            } => mu_combos.len() as u64 * (sigma_points.len() as u64).pow(self.spec.m() as u32),
        }
    }

    fn gamma_count(&self) -> u64 {
        (self.row_options.len() as u64).pow(self.spec.m() as u32)
    }

    /// Total number of candidates.
    pub fn len(&self) -> u64 {
        self.emission_count() * self.gamma_count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Decode candidate `k` (row-major over emission x transition blocks).
    pub fn candidate(&self, k: u64) -> Result<NaturalParams> {
        if k >= self.len() {
            return Err(HmmError::InvalidArgument(format!(
                "candidate index {k} out of range {}",
                self.len()
            )));
        }
        let m = self.spec.m();
        let gamma_count = self.gamma_count();
        let e_idx = k / gamma_count;
        let mut g_idx = k % gamma_count;

        let mut gamma = DMatrix::zeros(m, m);
        let base = self.row_options.len() as u64;
        for i in 0..m {
            let opt = &self.row_options[(g_idx % base) as usize];
            g_idx /= base;
            let mut kk = 0;
            let mut diag = 1.0;
            for j in 0..m {
                if j != i {
                    gamma[(i, j)] = opt[kk];
                    diag -= opt[kk];
                    kk += 1;
                }
            }
            gamma[(i, i)] = diag;
        }

        let emission = match &self.emission {
            EmissionCandidates::Poisson(combos) => EmissionParams::Poisson {
                lambda: combos[e_idx as usize].clone(),
            },
            EmissionCandidates::Gaussian {
                mu_combos,
                sigma_points,
            } => {
                let sigma_block = (sigma_points.len() as u64).pow(m as u32);
                let mu = mu_combos[(e_idx / sigma_block) as usize].clone();
                let mut s_idx = e_idx % sigma_block;
                let mut sigma = Vec::with_capacity(m);
                for _ in 0..m {
                    sigma.push(sigma_points[(s_idx % sigma_points.len() as u64) as usize]);
                    s_idx /= sigma_points.len() as u64;
                }
                EmissionParams::Gaussian { mu, sigma }
            }
        };
        NaturalParams::new(gamma, emission)
    }

    /// Uniformly sample up to `count` distinct candidates (all of them when
    /// the grid is smaller).
    pub fn sample(&self, count: usize, seed: u64) -> Result<Vec<NaturalParams>> {
        let total = self.len();
        if (count as u64) >= total {
            return (0..total).map(|k| self.candidate(k)).collect();
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut chosen = std::collections::BTreeSet::new();
        while chosen.len() < count {
            chosen.insert(rng.random_range(0..total));
        }
        chosen.into_iter().map(|k| self.candidate(k)).collect()
    }
}

/// Median and central 95% quantiles of one metric.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct QuantileTriple {
    pub median: f64,
    pub q025: f64,
    pub q975: f64,
}

fn triple(values: &[f64]) -> QuantileTriple {
    QuantileTriple {
        median: median(values),
        q025: quantile(values, 0.025),
        q975: quantile(values, 0.975),
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct SpeedOptimizerSummary {
    pub optimizer: String,
    pub duration_ns: QuantileTriple,
    pub iterations: QuantileTriple,
}

#[derive(Clone, Debug, Serialize)]
pub struct SpeedSummary {
    pub replications_kept: usize,
    pub replications_discarded: usize,
    pub per_optimizer: Vec<SpeedOptimizerSummary>,
}

#[derive(Clone, Debug, Serialize)]
pub struct ParamQuantiles {
    pub param: String,
    pub median: f64,
    pub q025: f64,
    pub q975: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct AccuracyOptimizerSummary {
    pub optimizer: String,
    pub converged: usize,
    pub nll: QuantileTriple,
    pub params: Vec<ParamQuantiles>,
}

#[derive(Clone, Debug, Serialize)]
pub struct AccuracySummary {
    pub replications: usize,
    pub per_optimizer: Vec<AccuracyOptimizerSummary>,
}

#[derive(Clone, Debug, Serialize)]
pub struct RobustnessOptimizerSummary {
    pub optimizer: String,
    pub inits: usize,
    pub failures: usize,
    pub converged: usize,
    pub found_global: usize,
    pub failures_pct: f64,
    pub global_max_found_pct: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct RobustnessSummary {
    pub reference_nll: f64,
    pub inits: usize,
    pub per_optimizer: Vec<RobustnessOptimizerSummary>,
}

#[derive(Clone, Debug, Serialize)]
pub struct HybridBudgetRow {
    pub nm_budget: u64,
    /// inits whose hybrid run first converged at this budget
    pub hybrid_first_converged: usize,
    /// among those, how many the direct Newton run solved
    pub direct_converged_on_those: usize,
}

#[derive(Clone, Debug, Serialize)]
pub struct HybridSummary {
    pub inits: usize,
    pub hybrid_failures: usize,
    pub direct_failures: usize,
    pub hybrid_failure_pct: f64,
    pub direct_failure_pct: f64,
    pub escalation: Vec<HybridBudgetRow>,
}

#[derive(Clone, Debug, Serialize)]
#[serde(tag = "design", rename_all = "lowercase")]
pub enum StudySummary {
    Speed(SpeedSummary),
    Accuracy(AccuracySummary),
    Robustness(RobustnessSummary),
    Hybrid(HybridSummary),
}

pub struct StudyOutput {
    pub records: Vec<StudyRecord>,
    pub summary: StudySummary,
}

fn timed_fit(
    spec: &EmissionSpec,
    obs: &ObservationSeries,
    init: &NaturalParams,
    optcfg: &OptimizerConfig,
    replication: usize,
) -> Result<(StudyRecord, FitResult)> {
    let start = Instant::now();
    let res = fit(spec, obs, init, optcfg)?;
    let duration_ns = start.elapsed().as_nanos().min(u64::MAX as u128) as u64;
    // records always report in ascending-state order, even for failed runs
    // whose final point had no sorted working representation
    let (sorted, _) = res.natural_hat.sort_states();
    let record = StudyRecord {
        replication,
        optimizer: optcfg.id(),
        duration_ns,
        iterations: res.iterations,
        status: res.status,
        nll: res.nll,
        estimates: sorted.flatten(),
        found_global: None,
    };
    Ok((record, res))
}

/// Reference optimum: the median final nll over all optimizers started at the
/// true values.
fn reference_nll(cfg: &StudyConfig, obs: &ObservationSeries) -> Result<f64> {
    let mut nlls = Vec::new();
    for optcfg in &cfg.optimizers {
        let res = fit(&cfg.spec, obs, &cfg.truth, optcfg)?;
        if res.converged && res.nll.is_finite() {
            nlls.push(res.nll);
        }
    }
    if nlls.is_empty() {
        return Err(HmmError::StudyDegenerate(
            "no optimizer converged from the true values".into(),
        ));
    }
    Ok(median(&nlls))
}

fn within_margin(nll: f64, reference: f64, margin: f64) -> bool {
    (nll - reference).abs() <= margin * reference.abs()
}

/// Speed design: per replication, simulate (redrawing until every state is
/// visited), fit every optimizer from the true values, and time each fit.
/// Replications where any optimizer fails are discarded from the summary so
/// all optimizers are compared on identical samples.
pub fn run_speed_study(cfg: &StudyConfig) -> Result<StudyOutput> {
    if cfg.design != StudyDesign::Speed {
        return Err(HmmError::InvalidArgument("config design is not speed".into()));
    }
    cfg.validate()?;
    let per_rep: Vec<Result<Vec<StudyRecord>>> = (0..cfg.replications)
        .into_par_iter()
        .map(|rep| {
            let (obs, _) = simulate_until_visited(
                &cfg.truth,
                &cfg.spec,
                cfg.t_len,
                derive_seed(cfg.seed, rep as u64),
            )?;
            cfg.optimizers
                .iter()
                .map(|optcfg| timed_fit(&cfg.spec, &obs, &cfg.truth, optcfg, rep).map(|(r, _)| r))
                .collect()
        })
        .collect();

    let mut records = Vec::new();
    let mut kept = 0usize;
    let mut discarded = 0usize;
    let mut kept_records: Vec<&StudyRecord> = Vec::new();
    let per_rep: Vec<Vec<StudyRecord>> = per_rep.into_iter().collect::<Result<_>>()?;
    for rep_records in &per_rep {
        if rep_records.iter().all(|r| r.status == OptimStatus::Converged) {
            kept += 1;
            kept_records.extend(rep_records.iter());
        } else {
            discarded += 1;
        }
    }
    if kept == 0 {
        return Err(HmmError::StudyDegenerate(
            "every replication had at least one optimizer failure".into(),
        ));
    }
    let per_optimizer = cfg
        .optimizers
        .iter()
        .map(|optcfg| {
            let id = optcfg.id();
            let durs: Vec<f64> = kept_records
                .iter()
                .filter(|r| r.optimizer == id)
                .map(|r| r.duration_ns as f64)
                .collect();
            let iters: Vec<f64> = kept_records
                .iter()
                .filter(|r| r.optimizer == id)
                .map(|r| r.iterations as f64)
                .collect();
            SpeedOptimizerSummary {
                optimizer: id,
                duration_ns: triple(&durs),
                iterations: triple(&iters),
            }
        })
        .collect();
    for rep_records in per_rep {
        records.extend(rep_records);
    }
    Ok(StudyOutput {
        records,
        summary: StudySummary::Speed(SpeedSummary {
            replications_kept: kept,
            replications_discarded: discarded,
            per_optimizer,
        }),
    })
}

/// Accuracy design: same sampling scheme as the speed design; summaries are
/// per-parameter medians and central 95% intervals over converged
/// replications, per optimizer.
pub fn run_accuracy_study(cfg: &StudyConfig) -> Result<StudyOutput> {
    if cfg.design != StudyDesign::Accuracy {
        return Err(HmmError::InvalidArgument(
            "config design is not accuracy".into(),
        ));
    }
    cfg.validate()?;
    let per_rep: Vec<Vec<StudyRecord>> = (0..cfg.replications)
        .into_par_iter()
        .map(|rep| {
            let (obs, _) = simulate_until_visited(
                &cfg.truth,
                &cfg.spec,
                cfg.t_len,
                derive_seed(cfg.seed, rep as u64),
            )?;
            cfg.optimizers
                .iter()
                .map(|optcfg| timed_fit(&cfg.spec, &obs, &cfg.truth, optcfg, rep).map(|(r, _)| r))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;

    let records: Vec<StudyRecord> = per_rep.into_iter().flatten().collect();
    let names = flat_param_names(&cfg.spec);
    let per_optimizer = cfg
        .optimizers
        .iter()
        .map(|optcfg| {
            let id = optcfg.id();
            let conv: Vec<&StudyRecord> = records
                .iter()
                .filter(|r| r.optimizer == id && r.status == OptimStatus::Converged)
                .collect();
            let nlls: Vec<f64> = conv.iter().map(|r| r.nll).collect();
            let params = names
                .iter()
                .enumerate()
                .map(|(k, name)| {
                    let col: Vec<f64> = conv.iter().map(|r| r.estimates[k]).collect();
                    let t = if col.is_empty() {
                        QuantileTriple {
                            median: f64::NAN,
                            q025: f64::NAN,
                            q975: f64::NAN,
                        }
                    } else {
                        triple(&col)
                    };
                    ParamQuantiles {
                        param: name.clone(),
                        median: t.median,
                        q025: t.q025,
                        q975: t.q975,
                    }
                })
                .collect();
            AccuracyOptimizerSummary {
                optimizer: id,
                converged: conv.len(),
                nll: if nlls.is_empty() {
                    QuantileTriple {
                        median: f64::NAN,
                        q025: f64::NAN,
                        q975: f64::NAN,
                    }
                } else {
                    triple(&nlls)
                },
                params,
            }
        })
        .collect();
    Ok(StudyOutput {
        summary: StudySummary::Accuracy(AccuracySummary {
            replications: cfg.replications,
            per_optimizer,
        }),
        records,
    })
}

/// Robustness design: one simulated dataset, a grid of initial values
/// (subsampled to `replications`), and per-optimizer failure and
/// global-optimum-found percentages against the reference nll.
pub fn run_robustness_study(cfg: &StudyConfig) -> Result<StudyOutput> {
    if cfg.design != StudyDesign::Robustness {
        return Err(HmmError::InvalidArgument(
            "config design is not robustness".into(),
        ));
    }
    cfg.validate()?;
    let (obs, _) =
        simulate_until_visited(&cfg.truth, &cfg.spec, cfg.t_len, derive_seed(cfg.seed, 0))?;
    let reference = reference_nll(cfg, &obs)?;
    let grid = build_init_grid(&obs, &cfg.spec)?;
    let inits = grid.sample(cfg.replications, derive_seed(cfg.seed, 1))?;

    let records: Vec<StudyRecord> = inits
        .par_iter()
        .enumerate()
        .map(|(idx, init)| {
            cfg.optimizers
                .iter()
                .map(|optcfg| {
                    let (mut record, _) = timed_fit(&cfg.spec, &obs, init, optcfg, idx)?;
                    if record.status == OptimStatus::Converged {
                        record.found_global =
                            Some(within_margin(record.nll, reference, cfg.nll_margin));
                    }
                    Ok(record)
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .flatten()
        .collect();

    let per_optimizer = cfg
        .optimizers
        .iter()
        .map(|optcfg| {
            let id = optcfg.id();
            let mine: Vec<&StudyRecord> = records.iter().filter(|r| r.optimizer == id).collect();
            let failures = mine
                .iter()
                .filter(|r| r.status != OptimStatus::Converged)
                .count();
            let converged = mine.len() - failures;
            let found = mine
                .iter()
                .filter(|r| r.found_global == Some(true))
                .count();
            RobustnessOptimizerSummary {
                optimizer: id,
                inits: mine.len(),
                failures,
                converged,
                found_global: found,
                failures_pct: 100.0 * failures as f64 / mine.len().max(1) as f64,
                global_max_found_pct: 100.0 * found as f64 / converged.max(1) as f64,
            }
        })
        .collect();
    Ok(StudyOutput {
        summary: StudySummary::Robustness(RobustnessSummary {
            reference_nll: reference,
            inits: inits.len(),
            per_optimizer,
        }),
        records,
    })
}

/// Escalation budgets 1, 10, 20, ..., 10000.
pub fn escalation_budgets() -> Vec<u64> {
    std::iter::once(1u64)
        .chain((1..=1000).map(|k| 10 * k))
        .collect()
}

/// Hybrid design: for each sampled poor init, run direct Newton, and run the
/// hybrid scheme escalating the Nelder-Mead budget (one shared trajectory,
/// checkpointed at each budget) until the Newton finisher converges or the
/// budget ladder is exhausted.
pub fn run_hybrid_study(cfg: &StudyConfig) -> Result<StudyOutput> {
    if cfg.design != StudyDesign::Hybrid {
        return Err(HmmError::InvalidArgument(
            "config design is not hybrid".into(),
        ));
    }
    cfg.validate()?;
    let newton_cfg = &cfg.optimizers[0];
    let (obs, _) =
        simulate_until_visited(&cfg.truth, &cfg.spec, cfg.t_len, derive_seed(cfg.seed, 0))?;
    let reference = reference_nll(cfg, &obs)?;
    let grid = build_init_grid(&obs, &cfg.spec)?;
    let inits = grid.sample(cfg.replications, derive_seed(cfg.seed, 1))?;
    let budgets = escalation_budgets();

    struct InitOutcome {
        records: Vec<StudyRecord>,
        hybrid_budget: Option<u64>,
        direct_converged: bool,
    }

    let outcomes: Vec<InitOutcome> = inits
        .par_iter()
        .enumerate()
        .map(|(idx, init)| -> Result<InitOutcome> {
            let (mut direct_rec, _) = timed_fit(&cfg.spec, &obs, init, newton_cfg, idx)?;
            if direct_rec.status == OptimStatus::Converged {
                direct_rec.found_global =
                    Some(within_margin(direct_rec.nll, reference, cfg.nll_margin));
            }
            let direct_converged = direct_rec.status == OptimStatus::Converged;

            // hybrid escalation: one Nelder-Mead trajectory, checkpointed
            let start = Instant::now();
            let nllfn = NllFunction::new(&obs, &cfg.spec)?;
            let value_fn = |x: &[f64]| nllfn.eval(x);
            let w0 = working_from_natural(init, &cfg.spec)?;
            let prob = Problem::new(&value_fn, None, None);
            let mut state = SimplexState::init(&prob, w0.as_slice());
            let mut hybrid_budget = None;
            let mut hybrid_fit: Option<FitResult> = None;
            let mut done = 0u64;
            if let Some(simplex) = state.as_mut() {
                for &budget in &budgets {
                    for _ in done..budget {
                        simplex.step(&prob);
                    }
                    done = budget;
                    let (best, _) = simplex.best();
                    let Ok(w_best) = WorkingParams::new(best.to_vec(), &cfg.spec) else {
                        continue;
                    };
                    let Ok(best_natural) = natural_from_working(&w_best, &cfg.spec) else {
                        continue;
                    };
                    let res = fit(&cfg.spec, &obs, &best_natural, newton_cfg)?;
                    if res.converged {
                        hybrid_budget = Some(budget);
                        hybrid_fit = Some(res);
                        break;
                    }
                }
            }
            let duration_ns = start.elapsed().as_nanos().min(u64::MAX as u128) as u64;
            let hybrid_rec = match (&hybrid_fit, hybrid_budget) {
                (Some(res), Some(budget)) => StudyRecord {
                    replication: idx,
                    optimizer: "hybrid".into(),
                    duration_ns,
                    iterations: budget + res.iterations,
                    status: OptimStatus::Converged,
                    nll: res.nll,
                    estimates: res.natural_hat.sort_states().0.flatten(),
                    found_global: Some(within_margin(res.nll, reference, cfg.nll_margin)),
                },
                _ => StudyRecord {
                    replication: idx,
                    optimizer: "hybrid".into(),
                    duration_ns,
                    iterations: done,
                    status: OptimStatus::MaxIterations,
                    nll: f64::INFINITY,
                    estimates: init.flatten(),
                    found_global: None,
                },
            };
            Ok(InitOutcome {
                records: vec![direct_rec, hybrid_rec],
                hybrid_budget,
                direct_converged,
            })
        })
        .collect::<Result<_>>()?;

    let mut records = Vec::new();
    let mut escalation: Vec<HybridBudgetRow> = budgets
        .iter()
        .map(|&b| HybridBudgetRow {
            nm_budget: b,
            hybrid_first_converged: 0,
            direct_converged_on_those: 0,
        })
        .collect();
    let mut hybrid_failures = 0usize;
    let mut direct_failures = 0usize;
    for oc in &outcomes {
        match oc.hybrid_budget {
            Some(b) => {
                let row = escalation
                    .iter_mut()
                    .find(|r| r.nm_budget == b)
                    .expect("budget from the ladder");
                row.hybrid_first_converged += 1;
                if oc.direct_converged {
                    row.direct_converged_on_those += 1;
                }
            }
            None => hybrid_failures += 1,
        }
        if !oc.direct_converged {
            direct_failures += 1;
        }
    }
    for oc in outcomes {
        records.extend(oc.records);
    }
    let n = inits.len();
    escalation.retain(|r| r.hybrid_first_converged > 0);
    Ok(StudyOutput {
        records,
        summary: StudySummary::Hybrid(HybridSummary {
            inits: n,
            hybrid_failures,
            direct_failures,
            hybrid_failure_pct: 100.0 * hybrid_failures as f64 / n.max(1) as f64,
            direct_failure_pct: 100.0 * direct_failures as f64 / n.max(1) as f64,
            escalation,
        }),
    })
}

/// Dispatch on the configured design.
pub fn run_study(cfg: &StudyConfig) -> Result<StudyOutput> {
    match cfg.design {
        StudyDesign::Speed => run_speed_study(cfg),
        StudyDesign::Accuracy => run_accuracy_study(cfg),
        StudyDesign::Robustness => run_robustness_study(cfg),
        StudyDesign::Hybrid => run_hybrid_study(cfg),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use nalgebra::DVector;

    fn poisson_truth() -> NaturalParams {
        NaturalParams::new(
            DMatrix::from_row_slice(2, 2, &[0.95, 0.05, 0.15, 0.85]),
            EmissionParams::Poisson {
                lambda: vec![1.0, 7.0],
            },
        )
        .unwrap()
    }

    #[test]
    fn simulate_single_state_path_is_constant() {
        let n = NaturalParams::new(
            DMatrix::from_row_slice(1, 1, &[1.0]),
            EmissionParams::Poisson { lambda: vec![3.0] },
        )
        .unwrap();
        let (_, path) = simulate(&n, &n.spec(), 50, 1).unwrap();
        assert!(path.iter().all(|&s| s == 0));
    }

    #[test]
    fn simulate_near_absorbing_chain_stays_put() {
        let eps = 1e-12;
        let n = NaturalParams::with_delta(
            DMatrix::from_row_slice(2, 2, &[1.0 - eps, eps, eps, 1.0 - eps]),
            EmissionParams::Poisson {
                lambda: vec![1.0, 9.0],
            },
            DVector::from_vec(vec![1.0, 0.0]),
        )
        .unwrap();
        let mut constant = 0usize;
        for seed in 0..1000u64 {
            let (_, path) = simulate(&n, &n.spec(), 10, seed).unwrap();
            if path.iter().all(|&s| s == 0) {
                constant += 1;
            }
        }
        assert!(constant >= 999, "constant paths: {constant}/1000");
    }

    #[test]
    fn simulate_transition_frequencies_match_matrix() {
        let n = poisson_truth();
        let (_, path) = simulate(&n, &n.spec(), 100_000, 42).unwrap();
        let mut counts = [[0usize; 2]; 2];
        for w in path.windows(2) {
            counts[w[0]][w[1]] += 1;
        }
        for i in 0..2 {
            let total: usize = counts[i].iter().sum();
            for j in 0..2 {
                let freq = counts[i][j] as f64 / total as f64;
                assert!(
                    (freq - n.gamma()[(i, j)]).abs() < 0.01,
                    "empirical {freq} vs {}",
                    n.gamma()[(i, j)]
                );
            }
        }
    }

    #[test]
    fn simulate_is_deterministic_given_seed() {
        let n = poisson_truth();
        let (a, pa) = simulate(&n, &n.spec(), 100, 7).unwrap();
        let (b, pb) = simulate(&n, &n.spec(), 100, 7).unwrap();
        assert_eq!(a.values(), b.values());
        assert_eq!(pa, pb);
    }

    #[test]
    fn visited_predicate() {
        assert!(!all_states_visited(&[0, 0, 0], 2));
        assert!(all_states_visited(&[0, 1], 2));
        assert!(all_states_visited(&[1, 0, 1], 2));
    }

    #[test]
    fn rejection_rate_is_low_for_well_visited_chain() {
        let n = poisson_truth();
        let mut rejected = 0usize;
        for seed in 0..10_000u64 {
            let (_, path) = simulate(&n, &n.spec(), 200, seed).unwrap();
            if !all_states_visited(&path, 2) {
                rejected += 1;
            }
        }
        assert!(rejected < 100, "rejected {rejected}/10000");
    }

    #[test]
    fn poisson_grid_counts_match_hand_enumeration() {
        let obs = ObservationSeries::new(vec![0.0, 1.0, 2.0, 1.0]).unwrap();
        let spec = EmissionSpec::new(EmissionFamily::Poisson, 2).unwrap();
        let grid = build_init_grid(&obs, &spec).unwrap();
        // rate candidates {0.5, 1.0, 1.5, 2.0} -> C(4,2) = 6 ordered pairs
        assert_eq!(grid.emission_count(), 6);
        // 9 off-diagonal choices per row -> 81 transition matrices
        assert_eq!(grid.gamma_count(), 81);
        assert_eq!(grid.len(), 486);
        for k in 0..grid.len() {
            let cand = grid.candidate(k).unwrap();
            let lam = match cand.emission() {
                EmissionParams::Poisson { lambda } => lambda.clone(),
                _ => unreachable!(),
            };
            assert!(lam[0] < lam[1]);
        }
    }

    #[test]
    fn gaussian_sigma_bounds_match_inequalities() {
        let mut values = vec![0.0; 25];
        values.extend(vec![10.0; 25]);
        let obs = ObservationSeries::new(values).unwrap();
        let spec = EmissionSpec::new(EmissionFamily::Gaussian, 2).unwrap();
        let grid = build_init_grid(&obs, &spec).unwrap();
        match &grid.emission {
            EmissionCandidates::Gaussian { sigma_points, .. } => {
                assert_abs_diff_eq!(sigma_points[0], 1.0, epsilon = 1e-12);
                assert_abs_diff_eq!(sigma_points[9], 5.0, epsilon = 1e-12);
                assert_eq!(sigma_points.len(), 10);
            }
            _ => unreachable!(),
        }
    }

    #[test]
    fn grid_sampling_is_deterministic_and_valid() {
        let obs = ObservationSeries::new((0..40).map(|k| (k % 9) as f64).collect()).unwrap();
        let spec = EmissionSpec::new(EmissionFamily::Poisson, 2).unwrap();
        let grid = build_init_grid(&obs, &spec).unwrap();
        let a = grid.sample(25, 3).unwrap();
        let b = grid.sample(25, 3).unwrap();
        assert_eq!(a.len(), 25);
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.flatten(), y.flatten());
        }
    }

    #[test]
    fn degenerate_data_is_rejected() {
        let obs = ObservationSeries::new(vec![3.0; 10]).unwrap();
        let spec = EmissionSpec::new(EmissionFamily::Poisson, 2).unwrap();
        assert!(matches!(
            build_init_grid(&obs, &spec),
            Err(HmmError::DegenerateData(_))
        ));
    }

    fn small_speed_config() -> StudyConfig {
        StudyConfig {
            design: StudyDesign::Speed,
            spec: EmissionSpec::new(EmissionFamily::Poisson, 2).unwrap(),
            truth: poisson_truth(),
            t_len: 100,
            replications: 5,
            optimizers: vec![
                OptimizerConfig::default(),
                OptimizerConfig::with_algorithm(Algorithm::Bfgs),
            ],
            seed: 11,
            nll_margin: 0.05,
        }
    }

    #[test]
    fn speed_study_bookkeeping() {
        let cfg = small_speed_config();
        let out = run_speed_study(&cfg).unwrap();
        assert_eq!(out.records.len(), 10);
        let StudySummary::Speed(s) = &out.summary else {
            unreachable!()
        };
        assert_eq!(s.replications_kept + s.replications_discarded, 5);
        assert_eq!(s.per_optimizer.len(), 2);
        for o in &s.per_optimizer {
            assert!(o.duration_ns.q025 <= o.duration_ns.median);
            assert!(o.duration_ns.median <= o.duration_ns.q975);
            assert!(o.iterations.q025 <= o.iterations.median);
            assert!(o.iterations.median <= o.iterations.q975);
        }
    }

    #[test]
    fn study_records_are_reproducible_except_durations() {
        let cfg = small_speed_config();
        let a = run_speed_study(&cfg).unwrap();
        let b = run_speed_study(&cfg).unwrap();
        assert_eq!(a.records.len(), b.records.len());
        for (x, y) in a.records.iter().zip(&b.records) {
            assert_eq!(x.replication, y.replication);
            assert_eq!(x.optimizer, y.optimizer);
            assert_eq!(x.iterations, y.iterations);
            assert_eq!(x.status, y.status);
            assert_eq!(x.nll, y.nll);
            assert_eq!(x.estimates, y.estimates);
        }
    }

    #[test]
    fn robustness_study_partitions_inits() {
        let cfg = StudyConfig {
            design: StudyDesign::Robustness,
            replications: 30,
            ..small_speed_config()
        };
        let out = run_robustness_study(&cfg).unwrap();
        let StudySummary::Robustness(s) = &out.summary else {
            unreachable!()
        };
        assert!(s.reference_nll.is_finite());
        for o in &s.per_optimizer {
            assert_eq!(o.inits, s.inits);
            assert_eq!(o.failures + o.converged, o.inits);
            assert!(o.found_global <= o.converged);
            assert!((0.0..=100.0).contains(&o.failures_pct));
            assert!((0.0..=100.0).contains(&o.global_max_found_pct));
        }
        // estimates in every record are sorted by rate
        for r in &out.records {
            let lam1 = r.estimates[4];
            let lam2 = r.estimates[5];
            assert!(lam1 <= lam2, "unsorted estimates in record");
        }
    }

    #[test]
    fn accuracy_study_summarizes_converged_runs() {
        let cfg = StudyConfig {
            design: StudyDesign::Accuracy,
            replications: 8,
            ..small_speed_config()
        };
        let out = run_accuracy_study(&cfg).unwrap();
        let StudySummary::Accuracy(s) = &out.summary else {
            unreachable!()
        };
        for o in &s.per_optimizer {
            assert!(o.converged <= 8);
            assert!(o.nll.q025 <= o.nll.q975);
            assert_eq!(o.params.len(), 4 + 2 + 2);
        }
    }

    #[test]
    fn hybrid_study_counts_partition() {
        let truth = NaturalParams::new(
            DMatrix::from_row_slice(2, 2, &[0.9, 0.1, 0.2, 0.8]),
            EmissionParams::Gaussian {
                mu: vec![-2.0, 2.0],
                sigma: vec![1.0, 1.5],
            },
        )
        .unwrap();
        let cfg = StudyConfig {
            design: StudyDesign::Hybrid,
            spec: truth.spec(),
            truth,
            t_len: 60,
            replications: 10,
            optimizers: vec![OptimizerConfig {
                max_iterations: 500,
                ..OptimizerConfig::default()
            }],
            seed: 5,
            nll_margin: 0.05,
        };
        let out = run_hybrid_study(&cfg).unwrap();
        let StudySummary::Hybrid(s) = &out.summary else {
            unreachable!()
        };
        let first_converged: usize = s.escalation.iter().map(|r| r.hybrid_first_converged).sum();
        assert_eq!(first_converged + s.hybrid_failures, s.inits);
        assert_eq!(s.inits, 10);
        // paired consistency: when both direct newton and the hybrid converge
        // from the same init, they agree on the optimum within the margin
        for idx in 0..10 {
            let mine: Vec<&StudyRecord> = out
                .records
                .iter()
                .filter(|r| r.replication == idx)
                .collect();
            let direct = mine.iter().find(|r| r.optimizer != "hybrid").unwrap();
            let hyb = mine.iter().find(|r| r.optimizer == "hybrid").unwrap();
            if direct.status == OptimStatus::Converged && hyb.status == OptimStatus::Converged {
                assert!(
                    (direct.nll - hyb.nll).abs() <= 0.05 * direct.nll.abs(),
                    "direct {} vs hybrid {}",
                    direct.nll,
                    hyb.nll
                );
            }
        }
    }

    #[test]
    fn study_config_json_round_trip() {
        let cfg = small_speed_config();
        let text = cfg.to_json().unwrap();
        let v: serde_json::Value = serde_json::from_str(&text).unwrap();
        assert_eq!(v["design"], "speed");
        assert_eq!(v["T"], 100);
        let back = StudyConfig::from_json(&text).unwrap();
        assert_eq!(back.replications, cfg.replications);
        assert_eq!(back.truth.flatten(), cfg.truth.flatten());
        // margin defaults when omitted
        let mut v2 = v.clone();
        v2.as_object_mut().unwrap().remove("nll_margin");
        let back2 = StudyConfig::from_json(&v2.to_string()).unwrap();
        assert_abs_diff_eq!(back2.nll_margin, 0.05, epsilon = 1e-15);
    }
}
