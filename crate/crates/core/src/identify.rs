//! Identifiability checks: binary comparisons cannot tell a symmetric
//! mixture `{theta, -theta}` from a population of coin flippers, ternary
//! comparisons can, and a single linear type is recoverable from enough
//! diverse binary logits.

use itertools::Itertools;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::emdpo::{init_responsibilities, mixture_loglik, run_em, Design, EmConfig, EmInit, InitStrategy};
use crate::error::{Error, Result};
use crate::exec;
use crate::policy::{optimal_table_for_type, ScoreEnsemble};
use crate::rewards::{Catalog, ChoiceModel, Population};
use crate::simulate::{make_adversarial_pair, simulate_dataset, subsets};

/// Rows of feature differences `psi(x, y1) - psi(x, y2)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ComparisonDesign {
    rows: Vec<Vec<f64>>,
}

impl ComparisonDesign {
    pub fn new(rows: Vec<Vec<f64>>) -> Result<Self> {
        let d = rows.first().map_or(0, |r| r.len());
        if d == 0 {
            return Err(Error::Input("comparison design needs at least one non-empty row".into()));
        }
        if let Some(r) = rows.iter().find(|r| r.len() != d) {
            return Err(Error::DimensionMismatch { expected: d, got: r.len() });
        }
        if rows.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Input("comparison design has a non-finite entry".into()));
        }
        Ok(ComparisonDesign { rows })
    }

    /// Every unordered response pair of every prompt.
    pub fn all_pairs(catalog: &Catalog) -> Result<Self> {
        let mut rows = Vec::new();
        for p in 0..catalog.n_prompts() {
            for (a, b) in (0..catalog.n_responses(p)).tuple_combinations() {
                rows.push(catalog.features(p, a).iter().zip(catalog.features(p, b)).map(|(x, y)| x - y).collect());
            }
        }
        Self::new(rows)
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    pub fn m(&self) -> usize {
        self.rows.len()
    }

    pub fn d(&self) -> usize {
        self.rows[0].len()
    }

    fn matrix(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.m(), self.d(), |i, j| self.rows[i][j])
    }

    /// Noiseless binary logits `U theta`.
    pub fn logits(&self, theta: &[f64]) -> Result<Vec<f64>> {
        if theta.len() != self.d() {
            return Err(Error::DimensionMismatch { expected: self.d(), got: theta.len() });
        }
        Ok(self.rows.iter().map(|r| crate::rewards::dot(r, theta)).collect())
    }
}

/// Largest `|P(y1 > y2) - 1/2|` over every binary pair in the catalog.
pub fn binary_deviation(catalog: &Catalog, model: &dyn ChoiceModel) -> f64 {
    (0..catalog.n_prompts())
        .flat_map(|p| (0..catalog.n_responses(p)).tuple_combinations().map(move |(a, b)| (p, a, b)))
        .map(|(p, a, b)| (model.choice_distribution(catalog, p, &[a, b])[0] - 0.5).abs())
        .fold(0.0, f64::max)
}

/// [`binary_deviation`] of the adversarial pair built from `theta`; a zero
/// `theta` is the single null type.
pub fn verify_binary_flatness(catalog: &Catalog, theta: &[f64]) -> Result<f64> {
    if theta.len() != catalog.d() {
        return Err(Error::DimensionMismatch { expected: catalog.d(), got: theta.len() });
    }
    if theta.iter().all(|&v| v == 0.0) {
        return Ok(binary_deviation(catalog, &Population::point_mass(theta.to_vec())));
    }
    Ok(binary_deviation(catalog, &make_adversarial_pair(theta)?))
}

/// Expected per-record log-likelihood of `model` when records come from
/// `truth`, prompts and `set_size`-subsets uniform.
pub fn expected_loglik(
    catalog: &Catalog,
    truth: &dyn ChoiceModel,
    model: &dyn ChoiceModel,
    set_size: usize,
) -> Result<f64> {
    if set_size < 2 || set_size > catalog.min_responses() {
        return Err(Error::Config(format!("set_size {set_size} is not in [2, {}]", catalog.min_responses())));
    }
    let per_prompt = exec::map_range(catalog.n_prompts(), |p| {
        let sets = subsets(catalog.n_responses(p), set_size);
        let total: f64 = sets
            .iter()
            .map(|set| {
                let pt = truth.choice_distribution(catalog, p, set);
                let pm = model.choice_distribution(catalog, p, set);
                pt.iter().zip(&pm).filter(|(t, _)| **t > 0.0).map(|(t, m)| t * m.ln()).sum::<f64>()
            })
            .sum();
        total / sets.len() as f64
    });
    Ok(per_prompt.iter().sum::<f64>() / catalog.n_prompts() as f64)
}

/// Spread (max - min) of [`expected_loglik`] across `candidates`.
pub fn binary_likelihood_flatness(
    catalog: &Catalog,
    truth: &dyn ChoiceModel,
    candidates: &[&dyn ChoiceModel],
    set_size: usize,
) -> Result<f64> {
    if candidates.is_empty() {
        return Err(Error::Input("need at least one candidate model".into()));
    }
    let vals =
        candidates.iter().map(|m| expected_loglik(catalog, truth, *m, set_size)).collect::<Result<Vec<f64>>>()?;
    let hi = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lo = vals.iter().cloned().fold(f64::INFINITY, f64::min);
    Ok(hi - lo)
}

/// Least-squares `theta` with `U theta = logits`; errors when `U` has rank
/// below `d`.
pub fn recover_theta_from_binary(design: &ComparisonDesign, logits: &[f64]) -> Result<Vec<f64>> {
    if logits.len() != design.m() {
        return Err(Error::DimensionMismatch { expected: design.m(), got: logits.len() });
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::Input("non-finite logit".into()));
    }
    let u = design.matrix();
    let svd = u.svd(true, true);
    let smax = svd.singular_values.max();
    let tol = design.m().max(design.d()) as f64 * smax * f64::EPSILON;
    let rank = svd.rank(tol);
    if rank < design.d() {
        return Err(Error::RankDeficient { rank, dim: design.d() });
    }
    let x = svd.solve(&DVector::from_column_slice(logits), tol).map_err(|e| Error::Numerical(e.to_string()))?;
    Ok(x.iter().cloned().collect())
}

/// `log(p / (1 - p))`.
pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Pairwise score differences of every table, concatenated in
/// (prompt, a < b) order.
fn margins_of(scores: &[Vec<f64>]) -> Vec<f64> {
    scores.iter().flat_map(|row| (0..row.len()).tuple_combinations().map(move |(a, b)| row[a] - row[b])).collect()
}

/// Permutation `perm` (fitted type `perm[j]` matched to true type `j`)
/// minimising the summed absolute margin distance; ties keep the first in
/// lexicographic order.
pub fn best_matching(truth: &[Vec<f64>], fitted: &[Vec<f64>]) -> Vec<usize> {
    let k = truth.len();
    let cost = |j: usize, f: usize| truth[j].iter().zip(&fitted[f]).map(|(a, b)| (a - b).abs()).sum::<f64>();
    let mut best = (0..k).collect::<Vec<_>>();
    let mut best_cost = f64::INFINITY;
    for perm in (0..k).permutations(k) {
        let c: f64 = perm.iter().enumerate().map(|(j, &f)| cost(j, f)).sum();
        if c < best_cost {
            best_cost = c;
            best = perm;
        }
    }
    best
}

pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
    if va == 0.0 || vb == 0.0 {
        return 0.0;
    }
    cov / (va.sqrt() * vb.sqrt())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RecoveryConfig {
    pub em: EmConfig,
    pub init: InitStrategy,
    pub restarts: usize,
    pub choice_set_size: usize,
}

impl Default for RecoveryConfig {
    fn default() -> Self {
        RecoveryConfig {
            em: EmConfig { k: 2, max_iters: 200, ..EmConfig::default() },
            init: InitStrategy::RandomDirichlet,
            restarts: 3,
            choice_set_size: 3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecoveryReport {
    /// `|eta_fit - eta_true|` per true type, after matching.
    pub eta_error: Vec<f64>,
    pub margin_correlation: f64,
    pub loglik_true: f64,
    pub loglik_fit: f64,
    /// Fitted type matched to each true type.
    pub permutation: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct Recovery {
    pub report: RecoveryReport,
    pub fitted: ScoreEnsemble,
    pub truth: ScoreEnsemble,
}

/// Simulates `n` single-record annotators from `population`, fits EM with
/// the best of `restarts` initialisations, and compares against the truth.
pub fn recovery_experiment(
    catalog: &Catalog,
    population: &Population,
    n: usize,
    seed: u64,
    cfg: &RecoveryConfig,
) -> Result<Recovery> {
    if cfg.em.k != population.k() {
        return Err(Error::Config(format!("EM K = {} but the population has {} types", cfg.em.k, population.k())));
    }
    if cfg.restarts == 0 {
        return Err(Error::Config("restarts must be >= 1".into()));
    }
    let data = simulate_dataset(catalog, population, n, 1, cfg.choice_set_size, seed)?;
    let design = Design::from_dataset(catalog, &data)?;
    let mut best = None::<crate::emdpo::EmState>;
    for r in 0..cfg.restarts {
        let g = init_responsibilities(&design, cfg.em.k, cfg.init, crate::emdpo::restart_seed(seed, r))?;
        let s = run_em(&design, &cfg.em, EmInit::Responsibilities(g))?;
        if best.as_ref().is_none_or(|b| s.objective > b.objective) {
            best = Some(s);
        }
    }
    let fit = best.expect("restarts >= 1");
    let truth = ScoreEnsemble::new(
        population
            .types()
            .iter()
            .map(|t| optimal_table_for_type(catalog, &t.theta, cfg.em.kappa))
            .collect::<Result<Vec<_>>>()?,
        population.etas(),
    )?;
    let true_margins: Vec<Vec<f64>> = truth.tables().iter().map(|t| margins_of(t.all_scores())).collect();
    let fit_margins: Vec<Vec<f64>> = fit.ensemble.tables().iter().map(|t| margins_of(t.all_scores())).collect();
    let perm = best_matching(&true_margins, &fit_margins);
    let a: Vec<f64> = true_margins.iter().flatten().cloned().collect();
    let b: Vec<f64> = perm.iter().flat_map(|&f| fit_margins[f].iter().cloned()).collect();
    let report = RecoveryReport {
        eta_error: perm.iter().enumerate().map(|(j, &f)| (fit.ensemble.eta()[f] - truth.eta()[j]).abs()).collect(),
        margin_correlation: pearson(&a, &b),
        loglik_true: mixture_loglik(&design, &truth)?,
        loglik_fit: fit.loglik,
        permutation: perm,
    };
    Ok(Recovery { report, fitted: fit.ensemble, truth })
}

/// [`recovery_experiment`] on the adversarial pair `{theta, -theta}`.
pub fn ternary_recovery_experiment(
    catalog: &Catalog,
    theta: &[f64],
    n: usize,
    seed: u64,
    cfg: &RecoveryConfig,
) -> Result<Recovery> {
    recovery_experiment(catalog, &make_adversarial_pair(theta)?, n, seed, cfg)
}
