//! EM-DPO: expectation-maximisation over latent annotator types with a
//! weighted multi-item DPO M-step.
//!
//! The E-step computes per-annotator posteriors over types in log space,
//! the mixture-weight M-step is the column mean of those posteriors, and
//! the policy M-step maximises each type's posterior-weighted multi-item
//! preference log-likelihood over a score table (see [`solver`]).

mod design;
pub mod solver;

use std::fmt::Write as _;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Exp1;
use serde::{Deserialize, Serialize};

pub use design::{CompiledRecord, Design};
pub use solver::{SolveReport, SolverConfig};

use crate::error::{Error, Result};
use crate::exec;
use crate::kmeans::kmeans;
use crate::policy::{ScoreEnsemble, ScoreTable, DEFAULT_KAPPA};
use crate::rewards::log_sum_exp;

/// Column weight below which a type counts as empty in the M-step.
pub const EMPTY_CLUSTER_WEIGHT: f64 = 1e-12;

/// Posterior type probabilities, one row per annotator.
#[derive(Clone, Debug, PartialEq)]
pub struct Responsibilities {
    gamma: Vec<Vec<f64>>,
}

impl Responsibilities {
    pub fn new(gamma: Vec<Vec<f64>>) -> Result<Self> {
        let k = gamma.first().map_or(0, |r| r.len());
        if k == 0 {
            return Err(Error::Input("responsibilities need at least one row and column".into()));
        }
        for (i, row) in gamma.iter().enumerate() {
            if row.len() != k {
                return Err(Error::DimensionMismatch { expected: k, got: row.len() });
            }
            if row.iter().any(|&g| !(g >= 0.0)) {
                return Err(Error::Input(format!("row {i} has a negative or NaN entry")));
            }
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > 1e-10 {
                return Err(Error::Input(format!("row {i} sums to {s}")));
            }
        }
        Ok(Responsibilities { gamma })
    }

    pub fn n(&self) -> usize {
        self.gamma.len()
    }

    pub fn k(&self) -> usize {
        self.gamma[0].len()
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.gamma
    }

    pub fn column(&self, k: usize) -> Vec<f64> {
        self.gamma.iter().map(|r| r[k]).collect()
    }

    /// New column `j` is old column `perm[j]`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        Responsibilities { gamma: self.gamma.iter().map(|r| perm.iter().map(|&j| r[j]).collect()).collect() }
    }

    pub fn column_means(&self) -> Vec<f64> {
        let n = self.n() as f64;
        (0..self.k()).map(|k| self.gamma.iter().map(|r| r[k]).sum::<f64>() / n).collect()
    }

    /// Hard assignment per annotator (first maximum).
    pub fn argmax(&self) -> Vec<usize> {
        self.gamma.iter().map(|r| r.iter().enumerate().fold(0, |b, (j, &v)| if v > r[b] { j } else { b })).collect()
    }

    pub fn to_csv(&self, annotator_ids: &[u64]) -> String {
        let mut out = String::from("annotator");
        for k in 1..=self.k() {
            write!(out, ",gamma_{k}").unwrap();
        }
        out.push('\n');
        for (id, row) in annotator_ids.iter().zip(&self.gamma) {
            write!(out, "{id}").unwrap();
            for g in row {
                write!(out, ",{g}").unwrap();
            }
            out.push('\n');
        }
        out
    }
}

/// Per-annotator log-likelihood of its records under each table.
fn annotator_logliks(design: &Design, ensemble: &ScoreEnsemble) -> Result<Vec<Vec<f64>>> {
    for t in ensemble.tables() {
        design.check_shape(t.all_scores())?;
    }
    Ok(exec::map_range(design.n(), |i| {
        ensemble
            .tables()
            .iter()
            .map(|t| design.annotator_records(i).iter().map(|r| t.log_pref(r.prompt, &r.items)).sum())
            .collect()
    }))
}

/// Posteriors and per-annotator log marginal likelihoods.
fn posterior(design: &Design, ensemble: &ScoreEnsemble) -> Result<(Responsibilities, Vec<f64>)> {
    let ll = annotator_logliks(design, ensemble)?;
    let log_eta: Vec<f64> = ensemble.eta().iter().map(|e| e.ln()).collect();
    let mut gamma = Vec::with_capacity(ll.len());
    let mut marginals = Vec::with_capacity(ll.len());
    for (i, row) in ll.iter().enumerate() {
        let joint: Vec<f64> = row.iter().zip(&log_eta).map(|(l, e)| l + e).collect();
        let z = log_sum_exp(&joint);
        if !z.is_finite() {
            return Err(Error::Numerical(format!("annotator {i} has zero likelihood under every type")));
        }
        gamma.push(joint.iter().map(|j| (j - z).exp()).collect::<Vec<f64>>());
        marginals.push(z);
    }
    // exact renormalisation so rows sum to one to rounding
    for row in gamma.iter_mut() {
        let s: f64 = row.iter().sum();
        row.iter_mut().for_each(|g| *g /= s);
    }
    Ok((Responsibilities { gamma }, marginals))
}

/// E-step: posterior over types for every annotator.
pub fn e_step(design: &Design, ensemble: &ScoreEnsemble) -> Result<Responsibilities> {
    Ok(posterior(design, ensemble)?.0)
}

/// Observed-data log-likelihood `sum_i w_i log sum_k eta_k prod_j P_k(V_ij)`.
pub fn mixture_loglik(design: &Design, ensemble: &ScoreEnsemble) -> Result<f64> {
    let (_, marginals) = posterior(design, ensemble)?;
    Ok(marginals.iter().zip(design.weights()).map(|(m, w)| w * m).sum())
}

/// Closed-form mixture-weight update: column means of `gamma`.
pub fn m_step_eta(gamma: &Responsibilities) -> Vec<f64> {
    gamma.column_means()
}

fn weighted_eta(design: &Design, gamma: &Responsibilities) -> Vec<f64> {
    let total = design.total_weight();
    let mut eta: Vec<f64> = (0..gamma.k())
        .map(|k| gamma.rows().iter().zip(design.weights()).map(|(r, w)| w * r[k]).sum::<f64>() / total)
        .collect();
    let s: f64 = eta.iter().sum();
    eta.iter_mut().for_each(|e| *e /= s);
    eta
}

fn record_weights(design: &Design, gamma: &Responsibilities, k: usize) -> Vec<f64> {
    design.owner.iter().map(|&i| design.weights()[i] * gamma.rows()[i][k]).collect()
}

#[derive(Clone, Debug)]
pub struct MStep {
    pub tables: Vec<ScoreTable>,
    pub reports: Vec<SolveReport>,
    /// Types whose total posterior weight was below [`EMPTY_CLUSTER_WEIGHT`];
    /// their tables are returned unchanged.
    pub empty: Vec<bool>,
}

/// Policy M-step: for each type, the gauge-fixed maximiser of the
/// `gamma[., k]`-weighted multi-item log-likelihood.
pub fn m_step_policy(
    design: &Design,
    gamma: &Responsibilities,
    kappa: f64,
    solver: &SolverConfig,
    init: Option<&[ScoreTable]>,
) -> Result<MStep> {
    if gamma.n() != design.n() {
        return Err(Error::DimensionMismatch { expected: design.n(), got: gamma.n() });
    }
    if let Some(init) = init {
        if init.len() != gamma.k() {
            return Err(Error::DimensionMismatch { expected: gamma.k(), got: init.len() });
        }
    }
    if !(kappa > 0.0) {
        return Err(Error::Config(format!("kappa must be positive, got {kappa}")));
    }
    let zero = ScoreTable::zeros_shaped(&design.n_responses, kappa);
    let results = exec::map_range(gamma.k(), |k| {
        let start = init.map_or_else(|| zero.clone(), |t| t[k].clone().with_kappa(kappa));
        let rw = record_weights(design, gamma, k);
        let total: f64 = rw.iter().sum();
        if total <= EMPTY_CLUSTER_WEIGHT {
            log::warn!("type {k} has total posterior weight {total:e}; keeping its table");
            let report = SolveReport { iterations: 0, grad_norm: 0.0, converged: true };
            return (start, report, true);
        }
        let (table, report) = solver::weighted_ascent(design, &rw, &start, solver, solver.max_iters);
        (table, report, false)
    });
    let mut out = MStep { tables: Vec::new(), reports: Vec::new(), empty: Vec::new() };
    for (table, report, empty) in results {
        if !report.converged {
            return Err(Error::Convergence { iterations: report.iterations, grad_norm: report.grad_norm });
        }
        out.tables.push(table);
        out.reports.push(report);
        out.empty.push(empty);
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmConfig {
    pub k: usize,
    pub max_iters: usize,
    /// Stop when the objective improves by less than this.
    pub tol: f64,
    pub kappa: f64,
    pub solver: SolverConfig,
}

impl Default for EmConfig {
    fn default() -> Self {
        EmConfig { k: 2, max_iters: 5, tol: 1e-8, kappa: DEFAULT_KAPPA, solver: SolverConfig::default() }
    }
}

/// Starting point for [`run_em`].
#[derive(Clone, Debug)]
pub enum EmInit {
    /// Warm-start tables from an M-step on these responsibilities; mixture
    /// weights start uniform.
    Responsibilities(Responsibilities),
    /// Start directly from an ensemble.
    Ensemble(ScoreEnsemble),
    /// K copies of the reference policy with uniform weights.
    Reference,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TraceRow {
    pub iteration: usize,
    pub loglik: f64,
    /// Log-likelihood minus the ridge penalty; the quantity EM ascends.
    pub objective: f64,
    pub eta: Vec<f64>,
    /// Unweighted column means of the E-step responsibilities that fed this
    /// M-step (empty for the initial row).
    pub gamma_means: Vec<f64>,
    pub grad_norms: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct EmState {
    pub ensemble: ScoreEnsemble,
    pub gamma: Responsibilities,
    pub loglik: f64,
    pub objective: f64,
    pub iteration: usize,
    pub converged: bool,
    pub trace: Vec<TraceRow>,
}

fn penalty(ensemble: &ScoreEnsemble, ridge: f64) -> f64 {
    if ridge == 0.0 {
        return 0.0;
    }
    0.5 * ridge * ensemble.tables().iter().flat_map(|t| t.all_scores().iter().flatten()).map(|s| s * s).sum::<f64>()
}

/// Alternates E-step and M-steps from `init` until the objective gains
/// less than `tol` or `max_iters` iterations have run.
pub fn run_em(design: &Design, cfg: &EmConfig, init: EmInit) -> Result<EmState> {
    if cfg.k == 0 {
        return Err(Error::Config("K must be >= 1".into()));
    }
    if !(cfg.kappa > 0.0) {
        return Err(Error::Config(format!("kappa must be positive, got {}", cfg.kappa)));
    }
    if cfg.max_iters == 0 {
        return Err(Error::Config("max_iters must be >= 1".into()));
    }
    let uniform = vec![1.0 / cfg.k as f64; cfg.k];
    let (mut ensemble, mut gamma, init_norms) = match init {
        EmInit::Responsibilities(g) => {
            if g.k() != cfg.k {
                return Err(Error::DimensionMismatch { expected: cfg.k, got: g.k() });
            }
            let m = m_step_policy(design, &g, cfg.kappa, &cfg.solver, None)?;
            let norms = m.reports.iter().map(|r| r.grad_norm).collect();
            (ScoreEnsemble::new(m.tables, uniform)?, g, norms)
        }
        EmInit::Ensemble(e) => {
            if e.k() != cfg.k {
                return Err(Error::DimensionMismatch { expected: cfg.k, got: e.k() });
            }
            let g = e_step(design, &e)?;
            (e, g, vec![0.0; cfg.k])
        }
        EmInit::Reference => {
            let zero = ScoreTable::zeros_shaped(&design.n_responses, cfg.kappa);
            let e = ScoreEnsemble::new(vec![zero; cfg.k], uniform)?;
            let g = e_step(design, &e)?;
            (e, g, vec![0.0; cfg.k])
        }
    };
    let mut loglik = mixture_loglik(design, &ensemble)?;
    let mut objective = loglik - penalty(&ensemble, cfg.solver.ridge);
    let mut trace = vec![TraceRow {
        iteration: 0,
        loglik,
        objective,
        eta: ensemble.eta().to_vec(),
        gamma_means: Vec::new(),
        grad_norms: init_norms,
    }];
    let mut converged = false;
    let mut iteration = 0;
    for t in 1..=cfg.max_iters {
        iteration = t;
        gamma = e_step(design, &ensemble)?;
        let eta = weighted_eta(design, &gamma);
        let m = m_step_policy(design, &gamma, cfg.kappa, &cfg.solver, Some(ensemble.tables()))?;
        ensemble = ScoreEnsemble::new(m.tables, eta)?;
        let new_loglik = mixture_loglik(design, &ensemble)?;
        let new_objective = new_loglik - penalty(&ensemble, cfg.solver.ridge);
        trace.push(TraceRow {
            iteration: t,
            loglik: new_loglik,
            objective: new_objective,
            eta: ensemble.eta().to_vec(),
            gamma_means: gamma.column_means(),
            grad_norms: m.reports.iter().map(|r| r.grad_norm).collect(),
        });
        let gain = new_objective - objective;
        loglik = new_loglik;
        objective = new_objective;
        if gain < cfg.tol {
            converged = true;
            break;
        }
    }
    Ok(EmState { ensemble, gamma, loglik, objective, iteration, converged, trace })
}

/// Trace as CSV: `iteration,loglik,eta_1..eta_K,grad_norm_1..grad_norm_K`.
pub fn trace_csv(trace: &[TraceRow]) -> String {
    let k = trace.first().map_or(0, |r| r.eta.len());
    let mut out = String::from("iteration,loglik");
    for j in 1..=k {
        write!(out, ",eta_{j}").unwrap();
    }
    for j in 1..=k {
        write!(out, ",grad_norm_{j}").unwrap();
    }
    out.push('\n');
    for r in trace {
        write!(out, "{},{}", r.iteration, r.loglik).unwrap();
        for e in &r.eta {
            write!(out, ",{e}").unwrap();
        }
        for g in &r.grad_norms {
            write!(out, ",{g}").unwrap();
        }
        out.push('\n');
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitStrategy {
    /// Seeded k-means on each annotator's mean winner feature vector,
    /// softened to 0.9 on the assigned type.
    KmeansWinnerFeatures,
    /// Rows drawn from Dirichlet(1, ..., 1).
    RandomDirichlet,
    /// One-hot ground-truth labels (oracle baseline).
    FromTrueLabels,
}

impl FromStr for InitStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "kmeans_winner_features" => Ok(InitStrategy::KmeansWinnerFeatures),
            "random_dirichlet" => Ok(InitStrategy::RandomDirichlet),
            "from_true_labels" => Ok(InitStrategy::FromTrueLabels),
            other => Err(Error::Config(format!(
                "unknown init strategy '{other}' (expected kmeans_winner_features, random_dirichlet or from_true_labels)"
            ))),
        }
    }
}

pub const KMEANS_ITERS: usize = 50;

pub fn init_responsibilities(design: &Design, k: usize, strategy: InitStrategy, seed: u64) -> Result<Responsibilities> {
    if k == 0 {
        return Err(Error::Config("K must be >= 1".into()));
    }
    let n = design.n();
    let rows = match strategy {
        InitStrategy::KmeansWinnerFeatures => {
            if k == 1 {
                vec![vec![1.0]; n]
            } else {
                let km = kmeans(design.mean_winner_features(), k, KMEANS_ITERS, seed)?;
                let rest = 0.1 / (k - 1) as f64;
                km.assignments.iter().map(|&a| (0..k).map(|j| if j == a { 0.9 } else { rest }).collect()).collect()
            }
        }
        InitStrategy::RandomDirichlet => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..n)
                .map(|_| {
                    let mut row: Vec<f64> = (0..k).map(|_| rng.sample::<f64, _>(Exp1)).collect();
                    let s: f64 = row.iter().sum();
                    row.iter_mut().for_each(|x| *x /= s);
                    row
                })
                .collect()
        }
        InitStrategy::FromTrueLabels => design
            .true_types()
            .iter()
            .enumerate()
            .map(|(i, t)| match t {
                Some(z) if *z < k => Ok((0..k).map(|j| if j == *z { 1.0 } else { 0.0 }).collect()),
                Some(z) => Err(Error::Config(format!("annotator {i} has true type {z} >= K = {k}"))),
                None => Err(Error::Config(format!("annotator {i} has no true type"))),
            })
            .collect::<Result<Vec<_>>>()?,
    };
    Responsibilities::new(rows)
}

#[derive(Clone, Debug)]
pub struct RestartRun {
    pub best: usize,
    pub runs: Vec<EmState>,
}

impl RestartRun {
    pub fn best(&self) -> &EmState {
        &self.runs[self.best]
    }
}

/// Seed of restart `r`.
pub fn restart_seed(seed: u64, r: usize) -> u64 {
    seed.wrapping_add((r as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

/// `restarts` independent EM runs, best final objective selected (first on
/// ties).
pub fn run_em_restarts(
    design: &Design,
    cfg: &EmConfig,
    strategy: InitStrategy,
    restarts: usize,
    seed: u64,
) -> Result<RestartRun> {
    if restarts == 0 {
        return Err(Error::Config("restarts must be >= 1".into()));
    }
    let runs = exec::map_range(restarts, |r| {
        let g = init_responsibilities(design, cfg.k, strategy, restart_seed(seed, r))?;
        run_em(design, cfg, EmInit::Responsibilities(g))
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let mut best = 0;
    for (r, s) in runs.iter().enumerate() {
        if s.objective > runs[best].objective {
            best = r;
        }
    }
    Ok(RestartRun { best, runs })
}
