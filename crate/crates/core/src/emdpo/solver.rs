//! Damped Newton ascent for the weighted multi-item preference
//! log-likelihood over a tabular score table.
//!
//! The objective separates across prompts, and on each prompt it is
//! concave in the scores (a sum of log-softmax terms) with a flat
//! direction along the constant vector. Iterates are re-centred after each
//! step so they stay in the mean-zero gauge.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::design::{CompiledRecord, Design};
use crate::policy::ScoreTable;
use crate::rewards::log_sum_exp;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverConfig {
    /// Fixed Gaussian penalty `ridge / 2 * ||s||^2` per table; 0 is plain
    /// maximum likelihood.
    pub ridge: f64,
    /// Stop once the full gradient norm is at most this.
    pub grad_tol: f64,
    pub max_iters: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig { ridge: 0.0, grad_tol: 1e-8, max_iters: 500 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SolveReport {
    pub iterations: usize,
    pub grad_norm: f64,
    pub converged: bool,
}

/// Compensated (Neumaier) sum so objective values at nearby points compare
/// reliably in the line search.
#[derive(Default)]
struct Sum {
    sum: f64,
    comp: f64,
}

impl Sum {
    fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.comp += (self.sum - t) + x;
        } else {
            self.comp += (x - t) + self.sum;
        }
        self.sum = t;
    }

    fn value(&self) -> f64 {
        self.sum + self.comp
    }
}

fn prompt_objective(records: &[CompiledRecord], idx: &[usize], rw: &[f64], s: &[f64], ridge: f64) -> f64 {
    let mut f = Sum::default();
    let mut vals = Vec::with_capacity(4);
    for &j in idx {
        let w = rw[j];
        if w == 0.0 {
            continue;
        }
        vals.clear();
        vals.extend(records[j].items.iter().map(|&r| s[r]));
        f.add(w * (vals[0] - log_sum_exp(&vals)));
    }
    if ridge != 0.0 {
        f.add(-0.5 * ridge * s.iter().map(|x| x * x).sum::<f64>());
    }
    f.value()
}

fn prompt_derivatives(
    records: &[CompiledRecord],
    idx: &[usize],
    rw: &[f64],
    s: &[f64],
    ridge: f64,
) -> (DVector<f64>, DMatrix<f64>) {
    let n = s.len();
    let mut g = DVector::zeros(n);
    let mut h = DMatrix::zeros(n, n);
    let mut p = Vec::with_capacity(4);
    for &j in idx {
        let w = rw[j];
        if w == 0.0 {
            continue;
        }
        let items = &records[j].items;
        p.clear();
        p.extend(items.iter().map(|&r| s[r]));
        crate::rewards::softmax_in_place(&mut p);
        for (a, &ra) in items.iter().enumerate() {
            g[ra] += w * (if a == 0 { 1.0 } else { 0.0 } - p[a]);
            h[(ra, ra)] += w * p[a];
            for (b, &rb) in items.iter().enumerate() {
                h[(ra, rb)] -= w * p[a] * p[b];
            }
        }
    }
    for y in 0..n {
        g[y] -= ridge * s[y];
        h[(y, y)] += ridge;
    }
    (g, h)
}

/// Solves `H d = g` on the mean-zero subspace. `H` is singular along the
/// constant vector, so that direction is pinned with a rank-one term and
/// rounding drift in `g` along it is projected out first.
fn newton_direction(g: &DVector<f64>, h: &DMatrix<f64>) -> DVector<f64> {
    let n = h.nrows();
    let gc = g.add_scalar(-g.mean());
    let scale = 1.0 + (0..n).map(|i| h[(i, i)]).fold(0.0, f64::max);
    let mut pinned = h.clone();
    pinned.add_scalar_mut(scale / n as f64);
    let mut damping = 1e-12 * scale;
    loop {
        let mut m = pinned.clone();
        for i in 0..n {
            m[(i, i)] += damping;
        }
        if let Some(ch) = m.cholesky() {
            let d = ch.solve(&gc);
            return d.add_scalar(-d.mean());
        }
        damping *= 100.0;
        if damping > 1e6 * scale {
            return gc / scale;
        }
    }
}

fn center(s: &mut [f64]) {
    let mean = s.iter().sum::<f64>() / s.len() as f64;
    s.iter_mut().for_each(|x| *x -= mean);
}

fn ascend_prompt(
    records: &[CompiledRecord],
    idx: &[usize],
    rw: &[f64],
    s: &mut [f64],
    ridge: f64,
    tol: f64,
    max_iters: usize,
) -> (usize, f64) {
    center(s);
    let mut f = prompt_objective(records, idx, rw, s, ridge);
    let mut trial = vec![0.0; s.len()];
    for it in 0..max_iters {
        let (g, h) = prompt_derivatives(records, idx, rw, s, ridge);
        let gnorm = g.norm();
        if gnorm <= tol {
            return (it, gnorm);
        }
        let d = newton_direction(&g, &h);
        let slope = g.dot(&d);
        // slack for objective values that only differ by rounding
        let slack = 8.0 * f64::EPSILON * (1.0 + f.abs());
        let mut t = 1.0;
        let mut accepted = false;
        for _ in 0..60 {
            for (y, tr) in trial.iter_mut().enumerate() {
                *tr = s[y] + t * d[y];
            }
            center(&mut trial);
            let f_new = prompt_objective(records, idx, rw, &trial, ridge);
            let armijo = f_new.is_finite() && f_new >= f + 1e-4 * t * slope - slack;
            // near the optimum the objective change drops below rounding;
            // fall back to the gradient norm for the full Newton step
            let flat = !armijo
                && t == 1.0
                && slope <= slack
                && f_new.is_finite()
                && prompt_derivatives(records, idx, rw, &trial, ridge).0.norm() < gnorm;
            if armijo || flat {
                s.copy_from_slice(&trial);
                f = f_new;
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        if !accepted {
            return (it + 1, gnorm);
        }
    }
    let (g, _) = prompt_derivatives(records, idx, rw, s, ridge);
    (max_iters, g.norm())
}

/// Maximises `sum_j rw[j] log P(record j | s) - ridge/2 ||s||^2` starting
/// from `init`, with at most `max_iters` Newton steps per prompt.
pub(crate) fn weighted_ascent(
    design: &Design,
    rw: &[f64],
    init: &ScoreTable,
    cfg: &SolverConfig,
    max_iters: usize,
) -> (ScoreTable, SolveReport) {
    let mut table = init.clone();
    let n_prompts = design.n_prompts();
    let per_prompt_tol = cfg.grad_tol / (n_prompts as f64).sqrt();
    let mut iterations = 0;
    let mut sq = 0.0;
    for (p, scores) in table.scores_mut().iter_mut().enumerate() {
        let (it, g) =
            ascend_prompt(&design.records, &design.by_prompt[p], rw, scores, cfg.ridge, per_prompt_tol, max_iters);
        iterations = iterations.max(it);
        sq += g * g;
    }
    let grad_norm = sq.sqrt();
    (table, SolveReport { iterations, grad_norm, converged: grad_norm <= cfg.grad_tol })
}

/// Value of the penalised weighted objective.
pub fn weighted_objective(design: &Design, rw: &[f64], table: &ScoreTable, ridge: f64) -> f64 {
    (0..design.n_prompts())
        .map(|p| prompt_objective(&design.records, &design.by_prompt[p], rw, table.scores(p), ridge))
        .sum()
}

/// Full gradient norm of the penalised weighted objective.
pub fn weighted_gradient_norm(design: &Design, rw: &[f64], table: &ScoreTable, ridge: f64) -> f64 {
    (0..design.n_prompts())
        .map(|p| {
            let (g, _) = prompt_derivatives(&design.records, &design.by_prompt[p], rw, table.scores(p), ridge);
            g.norm_squared()
        })
        .sum::<f64>()
        .sqrt()
}
