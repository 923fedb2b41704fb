//! Evaluation metrics and baseline fitters.

use std::fmt::Write as _;

use crate::aggregate::regret_vector;
use crate::emdpo::{m_step_policy, run_em, Design, EmConfig, EmInit, Responsibilities, SolverConfig};
use crate::error::{Error, Result};
use crate::kmeans::kmeans;
use crate::policy::{PolicyDist, ReferencePolicy, ScoreEnsemble, ScoreTable};
use crate::rewards::Catalog;
use crate::simulate::{Dataset, PreferenceRecord};

fn binary_margins(catalog: &Catalog, table: &ScoreTable, records: &[PreferenceRecord]) -> Result<Vec<f64>> {
    if records.is_empty() {
        return Err(Error::Input("no evaluation records".into()));
    }
    records
        .iter()
        .map(|r| {
            if !r.is_binary() {
                return Err(Error::InvalidRecord("margin evaluation needs binary records".into()));
            }
            let p = catalog.prompt_index(r.prompt)?;
            let w = catalog.response_index(p, r.winner)?;
            let l = catalog.response_index(p, r.rejected[0])?;
            Ok(table.score(p, w) - table.score(p, l))
        })
        .collect()
}

/// Mean implicit reward margin of `table` over binary records.
pub fn mean_reward_margin(catalog: &Catalog, table: &ScoreTable, records: &[PreferenceRecord]) -> Result<f64> {
    let m = binary_margins(catalog, table, records)?;
    Ok(m.iter().sum::<f64>() / m.len() as f64)
}

/// Largest mean margin over the ensemble's members, and the member
/// attaining it (first on ties).
pub fn max_mean_reward_margin(
    catalog: &Catalog,
    tables: &[ScoreTable],
    records: &[PreferenceRecord],
) -> Result<(f64, usize)> {
    if tables.is_empty() {
        return Err(Error::Input("no tables to evaluate".into()));
    }
    let mut best = (f64::NEG_INFINITY, 0);
    for (k, t) in tables.iter().enumerate() {
        let m = mean_reward_margin(catalog, t, records)?;
        if m > best.0 {
            best = (m, k);
        }
    }
    Ok(best)
}

/// Fraction of binary records with positive margin; zero margins count 1/2.
pub fn accuracy(catalog: &Catalog, table: &ScoreTable, records: &[PreferenceRecord]) -> Result<f64> {
    let m = binary_margins(catalog, table, records)?;
    let hits: f64 = m
        .iter()
        .map(|&x| {
            if x > 0.0 {
                1.0
            } else if x == 0.0 {
                0.5
            } else {
                0.0
            }
        })
        .sum();
    Ok(hits / m.len() as f64)
}

/// Worst regret of `dist` across the ensemble's types.
pub fn max_regret(
    dist: &PolicyDist,
    ensemble: &ScoreEnsemble,
    reference: &ReferencePolicy,
    prompt_weights: &[f64],
) -> Result<f64> {
    Ok(regret_vector(dist, ensemble, reference, prompt_weights)?.into_iter().fold(f64::NEG_INFINITY, f64::max))
}

/// A single DPO table on the whole dataset: EM with one type.
pub fn run_vanilla_dpo(design: &Design, kappa: f64, solver: &SolverConfig) -> Result<ScoreTable> {
    let cfg = EmConfig { k: 1, max_iters: 1, tol: 0.0, kappa, solver: *solver };
    let g = Responsibilities::new(vec![vec![1.0]; design.n()])?;
    Ok(run_em(design, &cfg, EmInit::Responsibilities(g))?.ensemble.table(0).clone())
}

#[derive(Clone, Debug)]
pub struct ClusterDpo {
    pub ensemble: ScoreEnsemble,
    pub assignments: Vec<usize>,
}

/// Hard k-means on annotators' mean winner features, then an independent
/// DPO fit per cluster; mixture weights are the cluster fractions.
pub fn run_cluster_dpo(design: &Design, k: usize, kappa: f64, solver: &SolverConfig, seed: u64) -> Result<ClusterDpo> {
    if k == 0 {
        return Err(Error::Config("K must be >= 1".into()));
    }
    let assignments = if k == 1 {
        vec![0; design.n()]
    } else {
        kmeans(design.mean_winner_features(), k, crate::emdpo::KMEANS_ITERS, seed)?.assignments
    };
    let gamma = Responsibilities::new(
        assignments.iter().map(|&a| (0..k).map(|j| if j == a { 1.0 } else { 0.0 }).collect()).collect(),
    )?;
    let tables = m_step_policy(design, &gamma, kappa, solver, None)?.tables;
    let eta = gamma.column_means();
    Ok(ClusterDpo { ensemble: ScoreEnsemble::new(tables, eta)?, assignments })
}

/// Splits each record into one binary record per rejected response.
pub fn binary_pairs(records: &[PreferenceRecord]) -> Vec<PreferenceRecord> {
    records
        .iter()
        .flat_map(|r| {
            r.rejected.iter().map(move |&l| PreferenceRecord {
                annotator: r.annotator,
                prompt: r.prompt,
                winner: r.winner,
                rejected: vec![l],
            })
        })
        .collect()
}

/// Records grouped by ground-truth type `0..k`.
pub fn records_by_type(dataset: &Dataset, k: usize) -> Result<Vec<Vec<PreferenceRecord>>> {
    let mut out = vec![Vec::new(); k];
    for a in &dataset.annotators {
        let z = a.true_type.ok_or_else(|| Error::Input(format!("annotator {} has no true type", a.annotator)))?;
        if z >= k {
            return Err(Error::Input(format!("annotator {} has type {z} >= {k}", a.annotator)));
        }
        out[z].extend(a.records.iter().cloned());
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct MethodMetrics {
    pub method: String,
    pub margins: Vec<f64>,
    pub accuracies: Vec<f64>,
}

/// Per-group margins and accuracies of a set of tables: the margin is the
/// best member's mean margin and the accuracy is that member's accuracy.
pub fn evaluate_method(
    method: &str,
    catalog: &Catalog,
    tables: &[ScoreTable],
    groups: &[Vec<PreferenceRecord>],
) -> Result<MethodMetrics> {
    let mut margins = Vec::with_capacity(groups.len());
    let mut accuracies = Vec::with_capacity(groups.len());
    for g in groups {
        let (m, k) = max_mean_reward_margin(catalog, tables, g)?;
        margins.push(m);
        accuracies.push(accuracy(catalog, &tables[k], g)?);
    }
    Ok(MethodMetrics { method: method.to_string(), margins, accuracies })
}

/// Method x group table: a block of margins followed by a block of
/// accuracies.
pub fn metrics_csv(groups: &[String], rows: &[MethodMetrics]) -> String {
    let mut out = String::from("metric,method");
    for g in groups {
        write!(out, ",{g}").unwrap();
    }
    out.push('\n');
    for (name, pick) in [("margin", 0), ("accuracy", 1)] {
        for r in rows {
            write!(out, "{name},{}", r.method).unwrap();
            let vals = if pick == 0 { &r.margins } else { &r.accuracies };
            for v in vals {
                write!(out, ",{v}").unwrap();
            }
            out.push('\n');
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::optimal_table_for_type;
    use crate::rewards::{sigmoid, Population};
    use crate::simulate::{make_adversarial_pair, random_catalog, simulate_dataset};

    fn rec(prompt: u32, winner: u32, loser: u32) -> PreferenceRecord {
        PreferenceRecord { annotator: 0, prompt, winner, rejected: vec![loser] }
    }

    #[test]
    fn zero_table_metrics() {
        let c = random_catalog(1, 3, 2, 1.0, 1).unwrap();
        let zero = ScoreTable::zeros(&c, 0.1);
        let recs = vec![rec(0, 0, 1), rec(0, 2, 1)];
        assert_eq!(max_mean_reward_margin(&c, std::slice::from_ref(&zero), &recs).unwrap().0, 0.0);
        assert_eq!(accuracy(&c, &zero, &recs).unwrap(), 0.5);
        let better = optimal_table_for_type(&c, &[1.0, 0.0], 0.1).unwrap();
        let with = max_mean_reward_margin(&c, &[zero.clone(), better], &recs).unwrap().0;
        assert!(with >= 0.0);
        let ternary = vec![PreferenceRecord { annotator: 0, prompt: 0, winner: 0, rejected: vec![1, 2] }];
        assert!(accuracy(&c, &zero, &ternary).is_err());
        assert!(accuracy(&c, &zero, &[]).is_err());
    }

    #[test]
    fn margin_identity_for_optimal_table() {
        let c = random_catalog(3, 4, 2, 1.0, 2).unwrap();
        let theta = [1.2, -0.7];
        let ds = simulate_dataset(&c, &Population::point_mass(theta.to_vec()), 50, 4, 2, 3).unwrap();
        let recs: Vec<_> = ds.records().cloned().collect();
        let t = optimal_table_for_type(&c, &theta, 1.0).unwrap();
        let expected: f64 = recs
            .iter()
            .map(|r| {
                crate::rewards::reward(&c, &theta, r.prompt, r.winner).unwrap()
                    - crate::rewards::reward(&c, &theta, r.prompt, r.rejected[0]).unwrap()
            })
            .sum::<f64>()
            / recs.len() as f64;
        assert!((mean_reward_margin(&c, &t, &recs).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn accuracy_of_argmax_and_sampled_winners() {
        let c = crate::rewards::Catalog::from_features(1, vec![vec![vec![3f64.ln()], vec![0.0]]]).unwrap();
        let t = optimal_table_for_type(&c, &[1.0], 1.0).unwrap();
        assert_eq!(accuracy(&c, &t, &vec![rec(0, 0, 1); 10]).unwrap(), 1.0);
        let ds = simulate_dataset(&c, &Population::point_mass(vec![1.0]), 4000, 5, 2, 9).unwrap();
        let recs: Vec<_> = ds.records().cloned().collect();
        let acc = accuracy(&c, &t, &recs).unwrap();
        let p = sigmoid(3f64.ln());
        let sd = (p * (1.0 - p) / recs.len() as f64).sqrt();
        assert!((acc - 0.75).abs() < 3.0 * sd, "{acc}");
    }

    #[test]
    fn max_regret_of_own_optimum_is_zero() {
        let c = random_catalog(2, 3, 2, 1.0, 4).unwrap();
        let e = ScoreEnsemble::new(vec![optimal_table_for_type(&c, &[1.0, 1.0], 0.3).unwrap()], vec![1.0]).unwrap();
        let r = ReferencePolicy::uniform(&c);
        let pw = crate::policy::uniform_prompt_weights(&c);
        assert!(max_regret(&e.table(0).policy(&r), &e, &r, &pw).unwrap().abs() < 1e-12);
    }

    #[test]
    fn vanilla_matches_single_type_em() {
        let c = random_catalog(2, 4, 2, 1.0, 5).unwrap();
        let ds = simulate_dataset(&c, &Population::point_mass(vec![1.0, -1.0]), 100, 5, 3, 6).unwrap();
        let d = Design::from_dataset(&c, &ds).unwrap();
        let solver = SolverConfig::default();
        let v = run_vanilla_dpo(&d, 0.1, &solver).unwrap();
        let cfg = EmConfig { k: 1, ..Default::default() };
        let em =
            run_em(&d, &cfg, EmInit::Responsibilities(Responsibilities::new(vec![vec![1.0]; d.n()]).unwrap())).unwrap();
        for (a, b) in v.all_scores().iter().flatten().zip(em.ensemble.table(0).all_scores().iter().flatten()) {
            assert!((a - b).abs() < 1e-10);
        }
        let cl = run_cluster_dpo(&d, 1, 0.1, &solver, 0).unwrap();
        for (a, b) in v.all_scores().iter().flatten().zip(cl.ensemble.table(0).all_scores().iter().flatten()) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn vanilla_on_homogeneous_population_data() {
        let c = random_catalog(1, 4, 2, 1.0, 7).unwrap();
        let theta = [1.0, 0.5];
        let d = Design::expected(&c, &Population::point_mass(theta.to_vec()), 2).unwrap();
        let v = run_vanilla_dpo(&d, 0.1, &SolverConfig::default()).unwrap();
        let r = c.rewards(&theta, 0);
        for a in 0..4 {
            for b in 0..4 {
                assert!(((v.score(0, a) - v.score(0, b)) - (r[a] - r[b])).abs() < 1e-3);
            }
        }
    }

    #[test]
    fn vanilla_cancels_on_adversarial_binary_data() {
        let c = random_catalog(1, 4, 2, 1.0, 8).unwrap();
        let d = Design::expected(&c, &make_adversarial_pair(&[2.0, -1.0]).unwrap(), 2).unwrap();
        let v = run_vanilla_dpo(&d, 0.1, &SolverConfig::default()).unwrap();
        assert!(v.all_scores()[0].iter().all(|s| s.abs() < 0.05));
    }

    #[test]
    fn cluster_dpo_on_separated_groups() {
        let c = random_catalog(2, 4, 2, 1.0, 9).unwrap();
        let pop = Population::from_parts(vec![vec![3.0, 0.0], vec![-3.0, 0.0]], vec![0.5, 0.5]).unwrap();
        let ds = simulate_dataset(&c, &pop, 200, 80, 2, 10).unwrap();
        let d = Design::from_dataset(&c, &ds).unwrap();
        let cl = run_cluster_dpo(&d, 2, 0.1, &SolverConfig { ridge: 1e-3, ..Default::default() }, 1).unwrap();
        let truth: Vec<usize> = ds.annotators.iter().map(|a| a.true_type.unwrap()).collect();
        let agree = truth.iter().zip(&cl.assignments).filter(|(t, a)| t == a).count();
        let agree = agree.max(truth.len() - agree);
        assert_eq!(agree, truth.len());
        let perm: Vec<usize> = (0..2).map(|z| cl.assignments[truth.iter().position(|&t| t == z).unwrap()]).collect();
        let em = m_step_policy(
            &d,
            &crate::emdpo::init_responsibilities(&d, 2, crate::emdpo::InitStrategy::FromTrueLabels, 0).unwrap(),
            0.1,
            &SolverConfig { ridge: 1e-3, ..Default::default() },
            None,
        )
        .unwrap();
        for (z, &pz) in perm.iter().enumerate() {
            let a = cl.ensemble.table(pz).all_scores().iter().flatten();
            for (x, y) in a.zip(em.tables[z].all_scores().iter().flatten()) {
                assert!((x - y).abs() < 1e-3);
            }
        }
        let groups = records_by_type(&ds, 2).unwrap();
        assert_eq!(groups.iter().map(|g| g.len()).sum::<usize>(), ds.n_records());
    }

    #[test]
    fn binary_pairs_split_choice_sets() {
        let r = PreferenceRecord { annotator: 3, prompt: 1, winner: 2, rejected: vec![0, 4] };
        let out = binary_pairs(&[r, rec(0, 1, 0)]);
        assert_eq!(out.len(), 3);
        assert!(out.iter().all(|r| r.is_binary()));
        assert_eq!(out[1].rejected, vec![4]);
        assert_eq!(out[1].annotator, 3);
    }

    #[test]
    fn metrics_csv_layout() {
        let rows = vec![
            MethodMetrics { method: "a".into(), margins: vec![0.5, 1.0], accuracies: vec![0.75, 0.5] },
            MethodMetrics { method: "b".into(), margins: vec![0.0, 0.25], accuracies: vec![0.5, 1.0] },
        ];
        let csv = metrics_csv(&["P1".into(), "P2".into()], &rows);
        assert_eq!(
            csv,
            "metric,method,P1,P2\nmargin,a,0.5,1\nmargin,b,0,0.25\naccuracy,a,0.75,0.5\naccuracy,b,0.5,1\n"
        );
    }

    #[test]
    fn metrics_are_permutation_invariant() {
        let c = random_catalog(2, 3, 2, 1.0, 11).unwrap();
        let tables = vec![
            optimal_table_for_type(&c, &[1.0, 0.0], 0.1).unwrap(),
            optimal_table_for_type(&c, &[0.0, 1.0], 0.1).unwrap(),
        ];
        let recs = vec![rec(0, 0, 1), rec(1, 2, 0), rec(0, 1, 2)];
        let a = evaluate_method("x", &c, &tables, std::slice::from_ref(&recs)).unwrap();
        let b = evaluate_method("x", &c, &[tables[1].clone(), tables[0].clone()], &[recs]).unwrap();
        assert_eq!(a.margins, b.margins);
        assert_eq!(a.accuracies, b.accuracies);
    }
}
