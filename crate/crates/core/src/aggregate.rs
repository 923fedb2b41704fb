//! Min-max regret aggregation of an ensemble of per-type policies.
//!
//! Regret of a policy for type `k` is the shortfall in expected implicit
//! reward `s_k` relative to type `k`'s own optimal policy. Three
//! aggregators are provided: a zero-sum game over mixtures of the ensemble
//! solved by optimistic Hedge (`mmra_ae`), an annotator-reweighting loop
//! around weighted DPO (`mmra_lw`), and direct gradient descent on the
//! worst-case regret over tabular policies (`mmra_original`).

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::emdpo::solver::{weighted_ascent, SolverConfig};
use crate::emdpo::{Design, Responsibilities};
use crate::error::{Error, Result};
use crate::exec;
use crate::policy::{check_simplex, kl_of_dist, PolicyDist, ReferencePolicy, ScoreEnsemble, ScoreTable};
use crate::rewards::{log_sum_exp, softmax_in_place};

fn check_prompt_weights(ensemble: &ScoreEnsemble, prompt_weights: &[f64]) -> Result<()> {
    let n = ensemble.table(0).all_scores().len();
    if prompt_weights.len() != n {
        return Err(Error::DimensionMismatch { expected: n, got: prompt_weights.len() });
    }
    check_simplex(prompt_weights, 1e-9)
}

/// `sum_p w_p sum_y pi(y|p) s(p, y)`.
fn expected_score(dist: &PolicyDist, table: &ScoreTable, prompt_weights: &[f64]) -> f64 {
    prompt_weights
        .iter()
        .enumerate()
        .map(|(p, w)| w * dist.0[p].iter().zip(table.scores(p)).map(|(q, s)| q * s).sum::<f64>())
        .sum()
}

/// Regret of `dist` for type `k`: expected `s_k` under type `k`'s optimal
/// policy minus expected `s_k` under `dist`.
pub fn regret_of_policy(
    dist: &PolicyDist,
    ensemble: &ScoreEnsemble,
    reference: &ReferencePolicy,
    prompt_weights: &[f64],
    k: usize,
) -> Result<f64> {
    check_prompt_weights(ensemble, prompt_weights)?;
    if k >= ensemble.k() {
        return Err(Error::Input(format!("type {k} out of range for K = {}", ensemble.k())));
    }
    let table = ensemble.table(k);
    let own = table.policy(reference);
    Ok(expected_score(&own, table, prompt_weights) - expected_score(dist, table, prompt_weights))
}

/// Regrets of `dist` for every type.
pub fn regret_vector(
    dist: &PolicyDist,
    ensemble: &ScoreEnsemble,
    reference: &ReferencePolicy,
    prompt_weights: &[f64],
) -> Result<Vec<f64>> {
    check_prompt_weights(ensemble, prompt_weights)?;
    exec::map_range(ensemble.k(), |k| regret_of_policy(dist, ensemble, reference, prompt_weights, k))
        .into_iter()
        .collect()
}

/// Equal weights over the ensemble.
pub fn uniform_mixture(ensemble: &ScoreEnsemble) -> Vec<f64> {
    vec![1.0 / ensemble.k() as f64; ensemble.k()]
}

/// `L[z][z']` for `z` in `0..=K` (row 0 is the null type) and `z'` in `0..K`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiscrepancyMatrix {
    pub l: Vec<Vec<f64>>,
}

/// `R[k][k'] = L[k][k] - L[k][k']`, with `L[k][k]` read as `L[k][k-1]`
/// under the null-row offset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegretMatrix {
    pub r: Vec<Vec<f64>>,
}

impl RegretMatrix {
    pub fn new(r: Vec<Vec<f64>>) -> Result<Self> {
        let k = r.first().map_or(0, |row| row.len());
        if k == 0 || r.len() < 2 {
            return Err(Error::Input("regret matrix needs at least two rows and one column".into()));
        }
        if r.iter().any(|row| row.len() != k) {
            return Err(Error::Input("regret matrix rows differ in length".into()));
        }
        if r.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Input("regret matrix has a non-finite entry".into()));
        }
        Ok(RegretMatrix { r })
    }

    pub fn rows(&self) -> usize {
        self.r.len()
    }

    pub fn cols(&self) -> usize {
        self.r[0].len()
    }

    /// `R w`.
    pub fn apply(&self, w: &[f64]) -> Vec<f64> {
        self.r.iter().map(|row| row.iter().zip(w).map(|(a, b)| a * b).sum()).collect()
    }

    /// `R^T p`.
    pub fn apply_t(&self, p: &[f64]) -> Vec<f64> {
        (0..self.cols()).map(|j| self.r.iter().zip(p).map(|(row, q)| row[j] * q).sum()).collect()
    }

    /// Worst row of `R w`.
    pub fn value(&self, w: &[f64]) -> f64 {
        self.apply(w).into_iter().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn max_abs(&self) -> f64 {
        self.r.iter().flatten().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// CSV with a header row; rows are labelled `z0..zK`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("row");
        for j in 1..=self.cols() {
            write!(out, ",z{j}").unwrap();
        }
        out.push('\n');
        for (i, row) in self.r.iter().enumerate() {
            write!(out, "z{i}").unwrap();
            for v in row {
                write!(out, ",{v}").unwrap();
            }
            out.push('\n');
        }
        out
    }
}

/// `log(pi_z(y|p) / pi_ref(y|p))` for every response of prompt `p`.
fn log_ratio(table: &ScoreTable, reference: &ReferencePolicy, p: usize) -> Vec<f64> {
    let kappa = table.kappa();
    let logits: Vec<f64> = table.scores(p).iter().zip(reference.probs(p)).map(|(s, r)| r.ln() + s / kappa).collect();
    let z = log_sum_exp(&logits);
    table.scores(p).iter().map(|s| s / kappa - z).collect()
}

pub fn discrepancy_matrix(
    ensemble: &ScoreEnsemble,
    reference: &ReferencePolicy,
    prompt_weights: &[f64],
) -> Result<DiscrepancyMatrix> {
    check_prompt_weights(ensemble, prompt_weights)?;
    let k = ensemble.k();
    let policies = ensemble.policies(reference);
    let cells = exec::map_range(k * k, |idx| {
        let (z, zp) = (idx / k, idx % k);
        let table = ensemble.table(z);
        prompt_weights
            .iter()
            .enumerate()
            .map(|(p, w)| {
                w * policies[zp].0[p].iter().zip(log_ratio(table, reference, p)).map(|(q, lr)| q * lr).sum::<f64>()
            })
            .sum::<f64>()
    });
    let mut l = vec![vec![0.0; k]];
    l.extend(cells.chunks(k).map(|c| c.to_vec()));
    Ok(DiscrepancyMatrix { l })
}

pub fn regret_matrix(l: &DiscrepancyMatrix) -> Result<RegretMatrix> {
    let k = l.l.first().map_or(0, |r| r.len());
    if l.l.len() != k + 1 || l.l.iter().any(|r| r.len() != k) {
        return Err(Error::Input("discrepancy matrix must be (K+1) x K".into()));
    }
    let mut r = vec![vec![0.0; k]];
    for z in 1..=k {
        let own = l.l[z][z - 1];
        r.push(l.l[z].iter().map(|v| own - v).collect());
    }
    RegretMatrix::new(r)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GameTraceRow {
    pub iteration: usize,
    /// Running averages up to this iteration.
    pub w: Vec<f64>,
    pub p: Vec<f64>,
    pub gap: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GameSolution {
    pub w: Vec<f64>,
    pub p: Vec<f64>,
    /// `max_k (R w)_k` at the averaged `w`.
    pub value: f64,
    pub trace: Vec<GameTraceRow>,
}

impl GameSolution {
    /// Duality gap of the averaged iterates after the last iteration.
    pub fn gap(&self) -> f64 {
        self.trace.last().map_or(0.0, |r| r.gap)
    }

    pub fn trace_csv(&self) -> String {
        let mut out = String::from("iteration");
        for j in 1..=self.w.len() {
            write!(out, ",w_{j}").unwrap();
        }
        for j in 0..self.p.len() {
            write!(out, ",p_{j}").unwrap();
        }
        out.push_str(",gap\n");
        for r in &self.trace {
            write!(out, "{}", r.iteration).unwrap();
            for v in r.w.iter().chain(&r.p) {
                write!(out, ",{v}").unwrap();
            }
            writeln!(out, ",{}", r.gap).unwrap();
        }
        out
    }
}

/// Default optimistic Hedge step: `0.05 / max|R|`.
pub fn default_game_step(r: &RegretMatrix) -> f64 {
    let m = r.max_abs();
    if m > 0.0 {
        0.05 / m
    } else {
        1.0
    }
}

fn normalize_log(lw: &[f64]) -> Vec<f64> {
    let mut v = lw.to_vec();
    softmax_in_place(&mut v);
    v
}

/// Optimistic Hedge for the minimising mixture player against optimistic
/// Hedge for the maximising adversary over rows; returns the averaged
/// iterates.
pub fn mmra_ae(r: &RegretMatrix, iters: usize, step: Option<f64>) -> Result<GameSolution> {
    if r.r.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::Input("regret matrix has a non-finite entry".into()));
    }
    if iters < 2 {
        return Err(Error::Config(format!("MWU iterations must be >= 2, got {iters}")));
    }
    let eta = step.unwrap_or_else(|| default_game_step(r));
    if !(eta > 0.0) || !eta.is_finite() {
        return Err(Error::Config(format!("MWU step must be positive, got {eta}")));
    }
    let (nr, nc) = (r.rows(), r.cols());
    let mut lw = vec![0.0; nc];
    let mut lp = vec![0.0; nr];
    let mut w_prev = vec![1.0 / nc as f64; nc];
    let mut w_prev2 = w_prev.clone();
    let mut p_prev = vec![1.0 / nr as f64; nr];
    let mut p_prev2 = p_prev.clone();
    let mut w_sum = vec![0.0; nc];
    let mut p_sum = vec![0.0; nr];
    let mut trace = Vec::with_capacity(iters);
    for t in 1..=iters {
        let g1 = r.apply_t(&p_prev);
        let g2 = r.apply_t(&p_prev2);
        let h1 = r.apply(&w_prev);
        let h2 = r.apply(&w_prev2);
        for j in 0..nc {
            lw[j] -= eta * (2.0 * g1[j] - g2[j]);
        }
        for i in 0..nr {
            lp[i] += eta * (2.0 * h1[i] - h2[i]);
        }
        let w = normalize_log(&lw);
        let p = normalize_log(&lp);
        w_sum.iter_mut().zip(&w).for_each(|(s, v)| *s += v);
        p_sum.iter_mut().zip(&p).for_each(|(s, v)| *s += v);
        let w_avg: Vec<f64> = w_sum.iter().map(|s| s / t as f64).collect();
        let p_avg: Vec<f64> = p_sum.iter().map(|s| s / t as f64).collect();
        let upper = r.value(&w_avg);
        let lower = r.apply_t(&p_avg).into_iter().fold(f64::INFINITY, f64::min);
        trace.push(GameTraceRow { iteration: t, w: w_avg, p: p_avg, gap: upper - lower });
        w_prev2 = std::mem::replace(&mut w_prev, w);
        p_prev2 = std::mem::replace(&mut p_prev, p);
    }
    let last = trace.last().expect("iters >= 2");
    let w = renormalize(&last.w);
    let p = renormalize(&last.p);
    Ok(GameSolution { value: r.value(&w), w, p, trace })
}

fn renormalize(v: &[f64]) -> Vec<f64> {
    let s: f64 = v.iter().sum();
    v.iter().map(|x| x / s).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LwConfig {
    pub iters: usize,
    /// MWU learning rate on the regret vector.
    pub step: f64,
    /// Newton steps per weighted DPO call.
    pub inner_steps: usize,
    /// Use `max(R_k, 0)` in the weight update.
    pub clamp: bool,
    pub solver: SolverConfig,
}

impl Default for LwConfig {
    fn default() -> Self {
        LwConfig { iters: 20, step: 0.01, inner_steps: 50, clamp: false, solver: SolverConfig::default() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LwTraceRow {
    pub iteration: usize,
    /// Type weights used for this iteration's DPO step.
    pub w: Vec<f64>,
    /// Regrets of the resulting policy.
    pub regrets: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct LwResult {
    pub table: ScoreTable,
    pub w: Vec<f64>,
    pub trace: Vec<LwTraceRow>,
}

/// Regrets of a score table's policy for every type.
pub fn table_regrets(
    table: &ScoreTable,
    ensemble: &ScoreEnsemble,
    reference: &ReferencePolicy,
    prompt_weights: &[f64],
) -> Result<Vec<f64>> {
    regret_vector(&table.policy(reference), ensemble, reference, prompt_weights)
}

/// Alternates weighted DPO with per-annotator weights
/// `gamma_i = sum_k w_k gamma_ik` and a multiplicative-weights update of
/// `w` on the exact regret vector. Returns the iterate with the lowest
/// max regret (first on ties) and the weights that produced it; with a
/// small KL coefficient the iterates can oscillate between groups.
pub fn mmra_lw(
    design: &Design,
    ensemble: &ScoreEnsemble,
    gamma: &Responsibilities,
    reference: &ReferencePolicy,
    prompt_weights: &[f64],
    cfg: &LwConfig,
) -> Result<LwResult> {
    if gamma.n() != design.n() {
        return Err(Error::DimensionMismatch { expected: design.n(), got: gamma.n() });
    }
    if gamma.k() != ensemble.k() {
        return Err(Error::DimensionMismatch { expected: ensemble.k(), got: gamma.k() });
    }
    if cfg.iters == 0 {
        return Err(Error::Config("MMRA-LW needs at least one iteration".into()));
    }
    if !(cfg.step >= 0.0) || !cfg.step.is_finite() {
        return Err(Error::Config(format!("MWU step must be non-negative, got {}", cfg.step)));
    }
    check_prompt_weights(ensemble, prompt_weights)?;
    let k = ensemble.k();
    let mut lw = vec![0.0; k];
    let mut w = vec![1.0 / k as f64; k];
    let mut table = ScoreTable::zeros_shaped(&design.n_responses, ensemble.kappa());
    let mut trace: Vec<LwTraceRow> = Vec::with_capacity(cfg.iters);
    let mut best: Option<(f64, ScoreTable, Vec<f64>)> = None;
    for t in 1..=cfg.iters {
        let annotator_w: Vec<f64> =
            gamma.rows().iter().map(|row| row.iter().zip(&w).map(|(g, v)| g * v).sum()).collect();
        let rw: Vec<f64> = design.owner.iter().map(|&i| design.weights()[i] * annotator_w[i]).collect();
        table = weighted_ascent(design, &rw, &table, &cfg.solver, cfg.inner_steps).0;
        let regrets = table_regrets(&table, ensemble, reference, prompt_weights)?;
        let worst = regrets.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if best.as_ref().is_none_or(|b| worst < b.0) {
            best = Some((worst, table.clone(), w.clone()));
        }
        trace.push(LwTraceRow { iteration: t, w: w.clone(), regrets: regrets.clone() });
        for (l, r) in lw.iter_mut().zip(&regrets) {
            *l += cfg.step * if cfg.clamp { r.max(0.0) } else { *r };
        }
        w = normalize_log(&lw);
    }
    let (_, table, w) = best.expect("iters >= 1");
    Ok(LwResult { table, w, trace })
}

pub fn lw_trace_csv(trace: &[LwTraceRow]) -> String {
    let k = trace.first().map_or(0, |r| r.w.len());
    let mut out = String::from("iteration");
    for j in 1..=k {
        write!(out, ",w_{j}").unwrap();
    }
    for j in 1..=k {
        write!(out, ",regret_{j}").unwrap();
    }
    out.push('\n');
    for r in trace {
        write!(out, "{}", r.iteration).unwrap();
        for v in r.w.iter().chain(&r.regrets) {
            write!(out, ",{v}").unwrap();
        }
        out.push('\n');
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OriginalConfig {
    pub iters: usize,
    /// Gradient step on the policy logits; `None` picks a step from the
    /// loss curvature.
    pub policy_step: Option<f64>,
    pub mwu_step: f64,
    /// KL coefficient of the regularised loss and of the output table.
    pub kappa: f64,
    /// Optimistic (extrapolated) GD and MWU updates instead of plain ones.
    pub optimistic: bool,
}

impl Default for OriginalConfig {
    fn default() -> Self {
        OriginalConfig {
            iters: 2000,
            policy_step: None,
            mwu_step: 0.01,
            kappa: crate::policy::DEFAULT_KAPPA,
            optimistic: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct OriginalTraceRow {
    pub iteration: usize,
    pub w: Vec<f64>,
    pub regrets: Vec<f64>,
    pub loss: f64,
}

#[derive(Clone, Debug)]
pub struct OriginalResult {
    pub table: ScoreTable,
    pub w: Vec<f64>,
    pub trace: Vec<OriginalTraceRow>,
}

/// Curvature-based default step for [`mmra_original`].
pub fn default_policy_step(ensemble: &ScoreEnsemble, prompt_weights: &[f64], kappa: f64) -> f64 {
    let spread = ensemble
        .tables()
        .iter()
        .flat_map(|t| t.all_scores().iter())
        .map(|row| {
            let hi = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lo = row.iter().cloned().fold(f64::INFINITY, f64::min);
            hi - lo
        })
        .fold(0.0, f64::max);
    let wmax = prompt_weights.iter().cloned().fold(0.0, f64::max);
    1.0 / (wmax * (kappa + spread + spread * spread))
}

/// Gradient descent on the policy logits `u = log(pi / pi_ref)` against
/// `sum_k w_k (max(R_k, 0) + kappa KL(pi || pi_ref))`, with
/// multiplicative weights on `max(R_k, 0)`.
pub fn mmra_original(
    ensemble: &ScoreEnsemble,
    reference: &ReferencePolicy,
    prompt_weights: &[f64],
    cfg: &OriginalConfig,
) -> Result<OriginalResult> {
    check_prompt_weights(ensemble, prompt_weights)?;
    if cfg.iters == 0 {
        return Err(Error::Config("MMRA-Original needs at least one iteration".into()));
    }
    if !(cfg.kappa > 0.0) || !cfg.kappa.is_finite() {
        return Err(Error::Config(format!("kappa must be positive, got {}", cfg.kappa)));
    }
    let lr = cfg.policy_step.unwrap_or_else(|| default_policy_step(ensemble, prompt_weights, cfg.kappa));
    if !(lr > 0.0) || !lr.is_finite() {
        return Err(Error::Config(format!("policy step must be positive, got {lr}")));
    }
    let k = ensemble.k();
    let n_prompts = prompt_weights.len();
    let targets: Vec<f64> = ensemble
        .tables()
        .iter()
        .zip(ensemble.policies(reference))
        .map(|(t, pol)| expected_score(&pol, t, prompt_weights))
        .collect();
    let mut u: Vec<Vec<f64>> = ensemble.table(0).all_scores().iter().map(|row| vec![0.0; row.len()]).collect();
    let mut lw = vec![0.0; k];
    let mut w = vec![1.0 / k as f64; k];
    let mut trace = Vec::with_capacity(cfg.iters);
    let mut initial = None;
    let mut prev_grad: Vec<Vec<f64>> = u.clone();
    let mut prev_pos = vec![0.0; k];
    let dist_of = |u: &[Vec<f64>]| {
        PolicyDist(
            (0..n_prompts)
                .map(|p| {
                    let mut v: Vec<f64> = u[p].iter().zip(reference.probs(p)).map(|(x, r)| r.ln() + x).collect();
                    softmax_in_place(&mut v);
                    v
                })
                .collect(),
        )
    };
    for t in 1..=cfg.iters {
        let dist = dist_of(&u);
        let regrets: Vec<f64> =
            (0..k).map(|j| targets[j] - expected_score(&dist, ensemble.table(j), prompt_weights)).collect();
        let kl = kl_of_dist(&dist, reference, cfg.kappa, prompt_weights);
        let loss: f64 = w.iter().zip(&regrets).map(|(wk, r)| wk * (r.max(0.0) + kl)).sum();
        if !loss.is_finite() {
            return Err(Error::Numerical("MMRA-Original loss is not finite".into()));
        }
        let init = *initial.get_or_insert(loss);
        if loss > 10.0 * init && loss > 1e-12 {
            return Err(Error::StepSize { initial: init, current: loss });
        }
        trace.push(OriginalTraceRow { iteration: t, w: w.clone(), regrets: regrets.clone(), loss });
        for p in 0..n_prompts {
            let pi = &dist.0[p];
            let eu: f64 = pi.iter().zip(&u[p]).map(|(q, x)| q * x).sum();
            let mut grad: Vec<f64> = pi.iter().zip(&u[p]).map(|(q, x)| cfg.kappa * q * (x - eu)).collect();
            for j in 0..k {
                if regrets[j] <= 0.0 {
                    continue;
                }
                let s = ensemble.table(j).scores(p);
                let es: f64 = pi.iter().zip(s).map(|(q, v)| q * v).sum();
                for (g, (q, v)) in grad.iter_mut().zip(pi.iter().zip(s)) {
                    *g -= w[j] * q * (v - es);
                }
            }
            for ((x, g), gp) in u[p].iter_mut().zip(&grad).zip(prev_grad[p].iter_mut()) {
                let d = if cfg.optimistic && t > 1 { 2.0 * g - *gp } else { *g };
                *x -= lr * prompt_weights[p] * d;
                *gp = *g;
            }
        }
        for ((l, r), rp) in lw.iter_mut().zip(&regrets).zip(prev_pos.iter_mut()) {
            let pos = r.max(0.0);
            let d = if cfg.optimistic && t > 1 { 2.0 * pos - *rp } else { pos };
            *l += cfg.mwu_step * d;
            *rp = pos;
        }
        w = normalize_log(&lw);
    }
    let mut scores: Vec<Vec<f64>> = u.iter().map(|row| row.iter().map(|x| cfg.kappa * x).collect()).collect();
    for row in scores.iter_mut() {
        let m = row.iter().sum::<f64>() / row.len() as f64;
        row.iter_mut().for_each(|x| *x -= m);
    }
    let table =
        ScoreTable::zeros_shaped(&scores.iter().map(|r| r.len()).collect::<Vec<_>>(), cfg.kappa).with_scores(scores)?;
    Ok(OriginalResult { table, w, trace })
}

pub fn original_trace_csv(trace: &[OriginalTraceRow]) -> String {
    let k = trace.first().map_or(0, |r| r.w.len());
    let mut out = String::from("iteration");
    for j in 1..=k {
        write!(out, ",w_{j}").unwrap();
    }
    for j in 1..=k {
        write!(out, ",regret_{j}").unwrap();
    }
    out.push_str(",loss\n");
    for r in trace {
        write!(out, "{}", r.iteration).unwrap();
        for v in r.w.iter().chain(&r.regrets) {
            write!(out, ",{v}").unwrap();
        }
        writeln!(out, ",{}", r.loss).unwrap();
    }
    out
}

#[cfg(test)]
mod tests;
