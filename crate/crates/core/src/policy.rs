//! Tabular policies represented by implicit-reward scores
//! `s(x, y) = kappa * log(pi(y|x) / pi_ref(y|x))`, kept in the per-prompt
//! mean-zero gauge.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rewards::{log_sum_exp, softmax_in_place, Catalog, ChoiceModel};

/// KL coefficient used by the default presets.
pub const DEFAULT_KAPPA: f64 = 0.1;

/// Tolerance for the per-prompt mean-zero gauge.
pub const GAUGE_TOL: f64 = 1e-9;

/// Per-prompt distributions over responses, aligned with catalog order.
#[derive(Clone, Debug, PartialEq)]
pub struct PolicyDist(pub Vec<Vec<f64>>);

impl PolicyDist {
    pub fn prompt(&self, p: usize) -> &[f64] {
        &self.0[p]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReferencePolicy {
    probs: Vec<Vec<f64>>,
}

impl ReferencePolicy {
    pub fn uniform(catalog: &Catalog) -> Self {
        ReferencePolicy {
            probs: (0..catalog.n_prompts())
                .map(|p| {
                    let n = catalog.n_responses(p);
                    vec![1.0 / n as f64; n]
                })
                .collect(),
        }
    }

    pub fn new(catalog: &Catalog, probs: Vec<Vec<f64>>) -> Result<Self> {
        check_shape(catalog, &probs)?;
        for (p, v) in probs.iter().enumerate() {
            if v.iter().any(|&x| !(x > 0.0) || !x.is_finite()) {
                return Err(Error::Input(format!("reference policy for prompt {p} is not strictly positive")));
            }
            let s: f64 = v.iter().sum();
            if (s - 1.0).abs() > 1e-12 {
                return Err(Error::Input(format!("reference policy for prompt {p} sums to {s}")));
            }
        }
        Ok(ReferencePolicy { probs })
    }

    pub fn probs(&self, p: usize) -> &[f64] {
        &self.probs[p]
    }
}

fn check_shape(catalog: &Catalog, rows: &[Vec<f64>]) -> Result<()> {
    if rows.len() != catalog.n_prompts() {
        return Err(Error::DimensionMismatch { expected: catalog.n_prompts(), got: rows.len() });
    }
    for (p, r) in rows.iter().enumerate() {
        if r.len() != catalog.n_responses(p) {
            return Err(Error::DimensionMismatch { expected: catalog.n_responses(p), got: r.len() });
        }
    }
    Ok(())
}

fn center(v: &mut [f64]) {
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    for x in v.iter_mut() {
        *x -= mean;
    }
}

/// Uniform distribution over the catalog's prompts.
pub fn uniform_prompt_weights(catalog: &Catalog) -> Vec<f64> {
    vec![1.0 / catalog.n_prompts() as f64; catalog.n_prompts()]
}

/// Score table for one policy.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreTable {
    scores: Vec<Vec<f64>>,
    kappa: f64,
}

impl ScoreTable {
    pub fn zeros(catalog: &Catalog, kappa: f64) -> Self {
        assert!(kappa > 0.0, "kappa must be positive");
        ScoreTable { scores: (0..catalog.n_prompts()).map(|p| vec![0.0; catalog.n_responses(p)]).collect(), kappa }
    }

    pub(crate) fn zeros_shaped(n_responses: &[usize], kappa: f64) -> Self {
        ScoreTable { scores: n_responses.iter().map(|&n| vec![0.0; n]).collect(), kappa }
    }

    /// Replaces the scores, keeping the shape; scores are not re-centred.
    pub(crate) fn with_scores(mut self, scores: Vec<Vec<f64>>) -> Result<Self> {
        if scores.len() != self.scores.len() || scores.iter().zip(&self.scores).any(|(a, b)| a.len() != b.len()) {
            return Err(Error::Input("score table shape changed".into()));
        }
        if scores.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("non-finite score".into()));
        }
        self.scores = scores;
        Ok(self)
    }

    /// Builds a table from raw scores, shifting each prompt to mean zero.
    pub fn new(catalog: &Catalog, mut scores: Vec<Vec<f64>>, kappa: f64) -> Result<Self> {
        check_shape(catalog, &scores)?;
        if !(kappa > 0.0) || !kappa.is_finite() {
            return Err(Error::Input(format!("kappa must be positive and finite, got {kappa}")));
        }
        if scores.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("non-finite score".into()));
        }
        scores.iter_mut().for_each(|v| center(v));
        Ok(ScoreTable { scores, kappa })
    }

    pub fn kappa(&self) -> f64 {
        self.kappa
    }

    pub fn with_kappa(mut self, kappa: f64) -> Self {
        assert!(kappa > 0.0, "kappa must be positive");
        self.kappa = kappa;
        self
    }

    pub fn scores(&self, p: usize) -> &[f64] {
        &self.scores[p]
    }

    pub fn all_scores(&self) -> &[Vec<f64>] {
        &self.scores
    }

    pub fn score(&self, p: usize, r: usize) -> f64 {
        self.scores[p][r]
    }

    pub(crate) fn scores_mut(&mut self) -> &mut [Vec<f64>] {
        &mut self.scores
    }

    pub fn canonicalize(&mut self) {
        self.scores.iter_mut().for_each(|v| center(v));
    }

    pub fn is_canonical(&self, tol: f64) -> bool {
        self.scores.iter().all(|v| (v.iter().sum::<f64>() / v.len() as f64).abs() <= tol)
    }

    /// `pi(.|x) ∝ pi_ref(.|x) exp(s(x, .) / kappa)` for every prompt.
    pub fn policy(&self, reference: &ReferencePolicy) -> PolicyDist {
        PolicyDist(
            (0..self.scores.len())
                .map(|p| {
                    let mut v: Vec<f64> =
                        self.scores[p].iter().zip(reference.probs(p)).map(|(s, r)| r.ln() + s / self.kappa).collect();
                    softmax_in_place(&mut v);
                    v
                })
                .collect(),
        )
    }

    /// Log-probability of the first item of `set` winning under the score
    /// softmax restricted to `set`.
    pub fn log_pref(&self, p: usize, set: &[usize]) -> f64 {
        let s = &self.scores[p];
        let vals: Vec<f64> = set.iter().map(|&r| s[r]).collect();
        vals[0] - log_sum_exp(&vals)
    }

    pub fn to_map(&self, catalog: &Catalog) -> BTreeMap<u32, BTreeMap<u32, f64>> {
        (0..catalog.n_prompts())
            .map(|p| {
                (
                    catalog.prompt_id(p),
                    (0..catalog.n_responses(p)).map(|r| (catalog.response_id(p, r), self.scores[p][r])).collect(),
                )
            })
            .collect()
    }

    pub fn from_map(catalog: &Catalog, map: &BTreeMap<u32, BTreeMap<u32, f64>>, kappa: f64) -> Result<Self> {
        if map.len() != catalog.n_prompts() {
            return Err(Error::Input(format!(
                "table covers {} prompts, catalog has {}",
                map.len(),
                catalog.n_prompts()
            )));
        }
        let mut scores = Vec::with_capacity(catalog.n_prompts());
        for p in 0..catalog.n_prompts() {
            let pid = catalog.prompt_id(p);
            let row = map.get(&pid).ok_or(Error::UnknownPrompt(pid))?;
            if row.len() != catalog.n_responses(p) {
                return Err(Error::Input(format!("table row for prompt {pid} has {} responses", row.len())));
            }
            let mut v = Vec::with_capacity(row.len());
            for r in 0..catalog.n_responses(p) {
                let rid = catalog.response_id(p, r);
                v.push(*row.get(&rid).ok_or(Error::UnknownResponse { prompt: pid, response: rid })?);
            }
            scores.push(v);
        }
        let table = ScoreTable { scores, kappa };
        if !table.is_canonical(GAUGE_TOL) {
            return Err(Error::Input("score table is not in the mean-zero gauge".into()));
        }
        if table.scores.iter().flatten().any(|v| !v.is_finite()) || !(kappa > 0.0) {
            return Err(Error::Input("non-finite score or non-positive kappa".into()));
        }
        Ok(table)
    }
}

impl ChoiceModel for ScoreTable {
    fn choice_distribution(&self, _catalog: &Catalog, prompt: usize, set: &[usize]) -> Vec<f64> {
        let mut v: Vec<f64> = set.iter().map(|&r| self.scores[prompt][r]).collect();
        softmax_in_place(&mut v);
        v
    }
}

/// K per-type tables sharing a KL coefficient, with mixture weights.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreEnsemble {
    tables: Vec<ScoreTable>,
    eta: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct EnsembleDoc {
    kappa: f64,
    eta: Vec<f64>,
    tables: Vec<BTreeMap<u32, BTreeMap<u32, f64>>>,
}

impl ScoreEnsemble {
    pub fn new(tables: Vec<ScoreTable>, eta: Vec<f64>) -> Result<Self> {
        if tables.is_empty() {
            return Err(Error::Input("ensemble needs at least one table".into()));
        }
        if tables.len() != eta.len() {
            return Err(Error::DimensionMismatch { expected: tables.len(), got: eta.len() });
        }
        let kappa = tables[0].kappa;
        if tables.iter().any(|t| t.kappa != kappa) {
            return Err(Error::Input("ensemble tables must share kappa".into()));
        }
        check_simplex(&eta, 1e-12)?;
        Ok(ScoreEnsemble { tables, eta })
    }

    pub fn k(&self) -> usize {
        self.tables.len()
    }

    pub fn kappa(&self) -> f64 {
        self.tables[0].kappa
    }

    pub fn tables(&self) -> &[ScoreTable] {
        &self.tables
    }

    pub fn table(&self, k: usize) -> &ScoreTable {
        &self.tables[k]
    }

    pub fn eta(&self) -> &[f64] {
        &self.eta
    }

    /// Reorders members so that new member `j` is old member `perm[j]`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        ScoreEnsemble::new(
            perm.iter().map(|&j| self.tables[j].clone()).collect(),
            perm.iter().map(|&j| self.eta[j]).collect(),
        )
    }

    pub fn policies(&self, reference: &ReferencePolicy) -> Vec<PolicyDist> {
        self.tables.iter().map(|t| t.policy(reference)).collect()
    }

    /// Distribution-level convex combination `sum_k w_k pi_k`.
    pub fn mixture_policy(&self, weights: &[f64], reference: &ReferencePolicy) -> Result<PolicyDist> {
        if weights.len() != self.k() {
            return Err(Error::DimensionMismatch { expected: self.k(), got: weights.len() });
        }
        check_simplex(weights, 1e-9)?;
        let pols = self.policies(reference);
        Ok(PolicyDist(
            (0..pols[0].0.len())
                .map(|p| {
                    let mut out = vec![0.0; pols[0].0[p].len()];
                    for (w, pol) in weights.iter().zip(&pols) {
                        for (o, q) in out.iter_mut().zip(&pol.0[p]) {
                            *o += w * q;
                        }
                    }
                    out
                })
                .collect(),
        ))
    }

    pub fn to_json(&self, catalog: &Catalog) -> String {
        let doc = EnsembleDoc {
            kappa: self.kappa(),
            eta: self.eta.clone(),
            tables: self.tables.iter().map(|t| t.to_map(catalog)).collect(),
        };
        serde_json::to_string_pretty(&doc).expect("ensemble serialises")
    }

    pub fn from_json(s: &str, catalog: &Catalog) -> Result<Self> {
        let doc: EnsembleDoc = serde_json::from_str(s)?;
        let tables =
            doc.tables.iter().map(|m| ScoreTable::from_map(catalog, m, doc.kappa)).collect::<Result<Vec<_>>>()?;
        ScoreEnsemble::new(tables, doc.eta)
    }
}

impl ChoiceModel for ScoreEnsemble {
    fn choice_distribution(&self, catalog: &Catalog, prompt: usize, set: &[usize]) -> Vec<f64> {
        let mut out = vec![0.0; set.len()];
        for (t, w) in self.tables.iter().zip(&self.eta) {
            for (o, q) in out.iter_mut().zip(t.choice_distribution(catalog, prompt, set)) {
                *o += w * q;
            }
        }
        out
    }
}

pub(crate) fn check_simplex(v: &[f64], tol: f64) -> Result<()> {
    if v.iter().any(|&x| !(x >= -tol) || !x.is_finite()) {
        return Err(Error::Input(format!("weights {v:?} have a negative or non-finite entry")));
    }
    let s: f64 = v.iter().sum();
    if (s - 1.0).abs() > tol {
        return Err(Error::Input(format!("weights sum to {s}, expected 1")));
    }
    Ok(())
}

/// Policy probabilities for one prompt.
pub fn policy_probs(
    catalog: &Catalog,
    table: &ScoreTable,
    reference: &ReferencePolicy,
    prompt: u32,
) -> Result<Vec<f64>> {
    let p = catalog.prompt_index(prompt)?;
    let mut v: Vec<f64> =
        table.scores[p].iter().zip(reference.probs(p)).map(|(s, r)| r.ln() + s / table.kappa).collect();
    softmax_in_place(&mut v);
    Ok(v)
}

/// Closed-form maximiser of expected reward `theta . psi` minus
/// `kappa * KL(pi || pi_ref)`: the centred rewards themselves.
pub fn optimal_table_for_type(catalog: &Catalog, theta: &[f64], kappa: f64) -> Result<ScoreTable> {
    if theta.len() != catalog.d() {
        return Err(Error::DimensionMismatch { expected: catalog.d(), got: theta.len() });
    }
    ScoreTable::new(catalog, (0..catalog.n_prompts()).map(|p| catalog.rewards(theta, p)).collect(), kappa)
}

/// Probability that `winner` beats every member of `rejected`.
pub fn multi_item_pref_prob(
    catalog: &Catalog,
    table: &ScoreTable,
    prompt: u32,
    winner: u32,
    rejected: &[u32],
) -> Result<f64> {
    if rejected.is_empty() {
        return Err(Error::InvalidRecord("empty rejected set".into()));
    }
    if rejected.contains(&winner) {
        return Err(Error::InvalidRecord(format!("winner {winner} is also rejected")));
    }
    let p = catalog.prompt_index(prompt)?;
    let mut ids = vec![winner];
    ids.extend_from_slice(rejected);
    let set = catalog.choice_indices(p, &ids)?;
    Ok(table.log_pref(p, &set).exp())
}

/// Implicit reward margin `s(x, winner) - s(x, loser)`.
pub fn reward_margin(catalog: &Catalog, table: &ScoreTable, prompt: u32, winner: u32, loser: u32) -> Result<f64> {
    if winner == loser {
        return Err(Error::InvalidPair(winner));
    }
    let p = catalog.prompt_index(prompt)?;
    let w = catalog.response_index(p, winner)?;
    let l = catalog.response_index(p, loser)?;
    Ok(table.scores[p][w] - table.scores[p][l])
}

/// `kappa * KL(pi || pi_ref)` averaged over prompts with `prompt_weights`,
/// for an arbitrary policy.
pub fn kl_of_dist(dist: &PolicyDist, reference: &ReferencePolicy, kappa: f64, prompt_weights: &[f64]) -> f64 {
    prompt_weights
        .iter()
        .enumerate()
        .map(|(p, w)| {
            w * dist.0[p]
                .iter()
                .zip(reference.probs(p))
                .filter(|(q, _)| **q > 0.0)
                .map(|(q, r)| q * (q / r).ln())
                .sum::<f64>()
        })
        .sum::<f64>()
        * kappa
}

pub fn kl_to_ref(table: &ScoreTable, reference: &ReferencePolicy, prompt_weights: &[f64]) -> Result<f64> {
    if prompt_weights.len() != table.scores.len() {
        return Err(Error::DimensionMismatch { expected: table.scores.len(), got: prompt_weights.len() });
    }
    check_simplex(prompt_weights, 1e-9)?;
    Ok(kl_of_dist(&table.policy(reference), reference, table.kappa, prompt_weights))
}

pub fn mixture_policy_probs(
    catalog: &Catalog,
    ensemble: &ScoreEnsemble,
    weights: &[f64],
    reference: &ReferencePolicy,
    prompt: u32,
) -> Result<Vec<f64>> {
    let p = catalog.prompt_index(prompt)?;
    Ok(ensemble.mixture_policy(weights, reference)?.0.swap_remove(p))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rewards::{choice_prob, dot, Catalog};
    use crate::simulate::random_catalog;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cat2() -> Catalog {
        Catalog::from_features(1, vec![vec![vec![1.0], vec![0.0]]]).unwrap()
    }

    #[test]
    fn policy_probs_examples() {
        let cat = cat2();
        let reference = ReferencePolicy::uniform(&cat);
        let zero = ScoreTable::zeros(&cat, 0.3);
        assert_eq!(policy_probs(&cat, &zero, &reference, 0).unwrap(), vec![0.5, 0.5]);
        let ln2 = 2f64.ln();
        let t = ScoreTable::new(&cat, vec![vec![ln2, 0.0]], 1.0).unwrap();
        let p = policy_probs(&cat, &t, &reference, 0).unwrap();
        assert_abs_diff_eq!(p[0], 2.0 / 3.0, epsilon = 1e-15);
        assert_abs_diff_eq!(p[1], 1.0 / 3.0, epsilon = 1e-15);
    }

    #[test]
    fn policy_round_trip_recovers_scores() {
        let cat = random_catalog(3, 5, 2, 1.0, 4).unwrap();
        let reference = ReferencePolicy::new(&cat, (0..3).map(|_| vec![0.1, 0.2, 0.3, 0.25, 0.15]).collect()).unwrap();
        let t = optimal_table_for_type(&cat, &[1.5, -2.0], 0.7).unwrap();
        let pol = t.policy(&reference);
        for p in 0..3 {
            let mut back: Vec<f64> = pol.0[p].iter().zip(reference.probs(p)).map(|(q, r)| 0.7 * (q / r).ln()).collect();
            center(&mut back);
            for (a, b) in back.iter().zip(t.scores(p)) {
                assert_abs_diff_eq!(a, b, epsilon = 1e-10);
            }
        }
    }

    #[test]
    fn optimal_table_examples() {
        let cat = cat2();
        let reference = ReferencePolicy::uniform(&cat);
        let z = optimal_table_for_type(&cat, &[0.0], 1.0).unwrap();
        assert_eq!(z.scores(0), &[0.0, 0.0]);
        let t = optimal_table_for_type(&cat, &[1.0], 1.0).unwrap();
        let p = t.policy(&reference);
        assert_abs_diff_eq!(p.0[0][0], 0.7311, epsilon = 1e-4);
        assert_abs_diff_eq!(p.0[0][1], 0.2689, epsilon = 1e-4);
    }

    fn objective(probs: &[f64], rewards: &[f64], reference: &[f64], kappa: f64) -> f64 {
        probs.iter().zip(rewards).zip(reference).map(|((q, r), pr)| q * r - kappa * q * (q / pr).ln()).sum()
    }

    #[test]
    fn optimal_table_beats_random_perturbations() {
        // random-search oracle on one prompt
        let cat = random_catalog(1, 4, 3, 1.0, 12).unwrap();
        let theta = [0.8, -1.2, 0.4];
        let kappa = 0.5;
        let reference = ReferencePolicy::new(&cat, vec![vec![0.4, 0.3, 0.2, 0.1]]).unwrap();
        let t = optimal_table_for_type(&cat, &theta, kappa).unwrap();
        let best = t.policy(&reference).0[0].clone();
        let rewards = cat.rewards(&theta, 0);
        let j_best = objective(&best, &rewards, reference.probs(0), kappa);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..1000 {
            let mut q: Vec<f64> = best.iter().map(|b| b * (1.0 + rng.random_range(-0.5..0.5))).collect();
            let s: f64 = q.iter().sum();
            q.iter_mut().for_each(|x| *x /= s);
            assert!(objective(&q, &rewards, reference.probs(0), kappa) <= j_best + 1e-12);
        }
    }

    #[test]
    fn first_order_condition_holds() {
        let cat = random_catalog(4, 6, 3, 1.0, 7).unwrap();
        let theta = [0.3, 2.0, -1.0];
        let kappa = 0.2;
        let reference = ReferencePolicy::uniform(&cat);
        let pol = optimal_table_for_type(&cat, &theta, kappa).unwrap().policy(&reference);
        for p in 0..4 {
            let r = cat.rewards(&theta, p);
            let v: Vec<f64> = (0..6).map(|y| kappa * (pol.0[p][y] / reference.probs(p)[y]).ln() - r[y]).collect();
            let spread = v.iter().cloned().fold(f64::MIN, f64::max) - v.iter().cloned().fold(f64::MAX, f64::min);
            assert!(spread <= 1e-9, "spread {spread}");
        }
    }

    #[test]
    fn multi_item_examples() {
        let cat = Catalog::from_features(1, vec![vec![vec![0.0]; 3]]).unwrap();
        let t = ScoreTable::zeros(&cat, 1.0);
        assert_abs_diff_eq!(multi_item_pref_prob(&cat, &t, 0, 0, &[1, 2]).unwrap(), 1.0 / 3.0, epsilon = 1e-15);
        assert!(matches!(multi_item_pref_prob(&cat, &t, 0, 0, &[]), Err(Error::InvalidRecord(_))));
        let t = ScoreTable::new(&cat, vec![vec![0.4, -0.9, 0.2]], 1.0).unwrap();
        assert_abs_diff_eq!(
            multi_item_pref_prob(&cat, &t, 0, 0, &[1]).unwrap(),
            crate::rewards::sigmoid(0.4 + 0.9),
            epsilon = 1e-15
        );
        let cat = random_catalog(2, 5, 3, 1.0, 3).unwrap();
        let theta = [1.0, -0.5, 2.0];
        let t = optimal_table_for_type(&cat, &theta, 1.0).unwrap();
        let a = multi_item_pref_prob(&cat, &t, 1, 3, &[0, 4]).unwrap();
        let b = choice_prob(&cat, &theta, 1, &[3, 0, 4], 3).unwrap();
        assert_abs_diff_eq!(a, b, epsilon = 1e-12);
    }

    #[test]
    fn margin_examples() {
        let cat = random_catalog(2, 4, 2, 1.0, 9).unwrap();
        let theta = [0.7, -1.1];
        let t = optimal_table_for_type(&cat, &theta, 1.0).unwrap();
        let m = reward_margin(&cat, &t, 1, 0, 2).unwrap();
        assert_abs_diff_eq!(m, -reward_margin(&cat, &t, 1, 2, 0).unwrap(), epsilon = 0.0);
        let expected = dot(&theta, cat.features(1, 0)) - dot(&theta, cat.features(1, 2));
        assert_abs_diff_eq!(m, expected, epsilon = 1e-12);
        let z = ScoreTable::zeros(&cat, 1.0);
        assert_eq!(reward_margin(&cat, &z, 0, 1, 3).unwrap(), 0.0);
        assert!(reward_margin(&cat, &z, 0, 1, 1).is_err());
    }

    #[test]
    fn kl_examples() {
        let cat = cat2();
        let reference = ReferencePolicy::uniform(&cat);
        assert_eq!(kl_to_ref(&ScoreTable::zeros(&cat, 1.0), &reference, &[1.0]).unwrap(), 0.0);
        // pi = (0.75, 0.25): scores ln 3 apart, kappa = 1
        let ln3 = 3f64.ln();
        let t = ScoreTable::new(&cat, vec![vec![ln3, 0.0]], 1.0).unwrap();
        let expected = 0.75 * 1.5f64.ln() + 0.25 * 0.5f64.ln();
        assert_abs_diff_eq!(kl_to_ref(&t, &reference, &[1.0]).unwrap(), expected, epsilon = 1e-12);
        assert_abs_diff_eq!(expected, 0.13081, epsilon = 1e-5);
    }

    #[test]
    fn mixture_examples() {
        let cat = random_catalog(2, 4, 2, 1.0, 2).unwrap();
        let reference = ReferencePolicy::uniform(&cat);
        let a = optimal_table_for_type(&cat, &[1.0, 2.0], 0.5).unwrap();
        let b = optimal_table_for_type(&cat, &[-2.0, 0.3], 0.5).unwrap();
        let single = ScoreEnsemble::new(vec![a.clone()], vec![1.0]).unwrap();
        assert_eq!(single.mixture_policy(&[1.0], &reference).unwrap(), a.policy(&reference));
        let twins = ScoreEnsemble::new(vec![a.clone(), a.clone()], vec![0.5, 0.5]).unwrap();
        let m = twins.mixture_policy(&[0.5, 0.5], &reference).unwrap();
        for (x, y) in m.0.iter().flatten().zip(a.policy(&reference).0.iter().flatten()) {
            assert_abs_diff_eq!(x, y, epsilon = 1e-15);
        }
        let ens = ScoreEnsemble::new(vec![a.clone(), b.clone()], vec![0.5, 0.5]).unwrap();
        let m = ens.mixture_policy(&[0.3, 0.7], &reference).unwrap();
        let (pa, pb) = (a.policy(&reference), b.policy(&reference));
        for p in 0..2 {
            for y in 0..4 {
                let lo = pa.0[p][y].min(pb.0[p][y]);
                let hi = pa.0[p][y].max(pb.0[p][y]);
                assert!(m.0[p][y] >= lo - 1e-15 && m.0[p][y] <= hi + 1e-15);
            }
        }
        assert!(ens.mixture_policy(&[1.0], &reference).is_err());
    }

    #[test]
    fn ensemble_json_round_trip_and_gauge_check() {
        let cat = random_catalog(2, 3, 2, 1.0, 2).unwrap();
        let a = optimal_table_for_type(&cat, &[1.0, 2.0], 0.1).unwrap();
        let b = optimal_table_for_type(&cat, &[-1.0, 0.5], 0.1).unwrap();
        let ens = ScoreEnsemble::new(vec![a, b], vec![0.25, 0.75]).unwrap();
        let json = ens.to_json(&cat);
        let back = ScoreEnsemble::from_json(&json, &cat).unwrap();
        assert_eq!(ens, back);
        let mut doc: serde_json::Value = serde_json::from_str(&json).unwrap();
        doc["tables"][0]["0"]["0"] = serde_json::json!(100.0);
        assert!(ScoreEnsemble::from_json(&doc.to_string(), &cat).is_err());
        assert!(ScoreEnsemble::new(vec![ScoreTable::zeros(&cat, 0.1), ScoreTable::zeros(&cat, 0.2)], vec![0.5, 0.5])
            .is_err());
    }
}
