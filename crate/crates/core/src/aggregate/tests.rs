use super::*;
use crate::emdpo::e_step;
use crate::policy::{optimal_table_for_type, uniform_prompt_weights};
use crate::rewards::{Catalog, Population};
use crate::simulate::random_catalog;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn ensemble_of(catalog: &Catalog, thetas: &[Vec<f64>], kappa: f64) -> ScoreEnsemble {
    let k = thetas.len();
    ScoreEnsemble::new(
        thetas.iter().map(|t| optimal_table_for_type(catalog, t, kappa).unwrap()).collect(),
        vec![1.0 / k as f64; k],
    )
    .unwrap()
}

fn random_setup(seed: u64, k: usize) -> (Catalog, ScoreEnsemble, ReferencePolicy, Vec<f64>) {
    let c = random_catalog(3, 4, 3, 1.0, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let thetas: Vec<Vec<f64>> = (0..k).map(|_| (0..3).map(|_| rng.random_range(-2.0..2.0)).collect()).collect();
    let e = ensemble_of(&c, &thetas, 0.5);
    let r = ReferencePolicy::uniform(&c);
    let w = uniform_prompt_weights(&c);
    (c, e, r, w)
}

/// Minimum over a simplex grid of `max_i (R w)_i` (three columns).
fn grid_value(r: &RegretMatrix, steps: usize) -> f64 {
    let mut best = f64::INFINITY;
    for i in 0..=steps {
        for j in 0..=steps - i {
            let w = [i as f64 / steps as f64, j as f64 / steps as f64, (steps - i - j) as f64 / steps as f64];
            best = best.min(r.value(&w));
        }
    }
    best
}

#[test]
fn own_policy_has_zero_regret() {
    let (_, e, r, w) = random_setup(1, 3);
    for (k, pol) in e.policies(&r).iter().enumerate() {
        assert!(regret_of_policy(pol, &e, &r, &w, k).unwrap().abs() < 1e-10);
    }
}

#[test]
fn reference_regret_two_responses() {
    let c = Catalog::from_features(1, vec![vec![vec![1.0], vec![0.0]]]).unwrap();
    let e = ensemble_of(&c, &[vec![3f64.ln()]], 1.0);
    let r = ReferencePolicy::uniform(&c);
    let uniform = PolicyDist(vec![vec![0.5, 0.5]]);
    let got = regret_of_policy(&uniform, &e, &r, &[1.0], 0).unwrap();
    assert!((got - 0.25 * 3f64.ln()).abs() < 1e-12);
    assert!(regret_of_policy(&uniform, &e, &r, &[1.0], 1).is_err());
}

#[test]
fn regret_is_affine_in_mixture_weights() {
    let (_, e, r, pw) = random_setup(2, 3);
    let w = [0.2, 0.5, 0.3];
    let mix = e.mixture_policy(&w, &r).unwrap();
    for k in 0..3 {
        let direct = regret_of_policy(&mix, &e, &r, &pw, k).unwrap();
        let combo: f64 =
            e.policies(&r).iter().zip(&w).map(|(p, wk)| wk * regret_of_policy(p, &e, &r, &pw, k).unwrap()).sum();
        assert!((direct - combo).abs() < 1e-10);
    }
    let uni = uniform_mixture(&e);
    assert_eq!(uni.len(), 3);
    assert!((uni.iter().sum::<f64>() - 1.0).abs() < 1e-15);
}

#[test]
fn discrepancy_degenerate_cases() {
    let c = random_catalog(2, 3, 2, 1.0, 3).unwrap();
    let r = ReferencePolicy::uniform(&c);
    let pw = uniform_prompt_weights(&c);
    let zero = ensemble_of(&c, &[vec![0.0, 0.0], vec![0.0, 0.0]], 0.1);
    let l = discrepancy_matrix(&zero, &r, &pw).unwrap();
    assert!(l.l.iter().flatten().all(|v| v.abs() < 1e-15));
    let same = ensemble_of(&c, &[vec![1.0, -1.0], vec![1.0, -1.0], vec![1.0, -1.0]], 0.1);
    let l = discrepancy_matrix(&same, &r, &pw).unwrap();
    for row in &l.l {
        assert!(row.iter().all(|v| (v - row[0]).abs() < 1e-12));
    }
    let rm = regret_matrix(&DiscrepancyMatrix { l: vec![vec![0.0; 2]; 3] }).unwrap();
    assert!(rm.r.iter().flatten().all(|&v| v == 0.0));
}

#[test]
fn discrepancy_is_diagonally_dominant() {
    // equal-norm types 120 degrees apart
    for seed in 0..10 {
        let c = random_catalog(3, 4, 2, 1.0, seed).unwrap();
        let a0 = seed as f64 * 0.3;
        let thetas: Vec<Vec<f64>> = (0..3)
            .map(|j| {
                let a = a0 + j as f64 * 2.0 * std::f64::consts::PI / 3.0;
                vec![2.0 * a.cos(), 2.0 * a.sin()]
            })
            .collect();
        let e = ensemble_of(&c, &thetas, 0.5);
        let r = ReferencePolicy::uniform(&c);
        let pw = uniform_prompt_weights(&c);
        let l = discrepancy_matrix(&e, &r, &pw).unwrap();
        assert!(l.l[0].iter().all(|&v| v == 0.0));
        for z in 0..3 {
            for zp in 0..3 {
                assert!(l.l[z + 1][z] >= l.l[z + 1][zp] - 1e-12);
            }
        }
    }
}

#[test]
fn regret_matrix_matches_policy_regrets() {
    let (_, e, r, pw) = random_setup(4, 3);
    let rm = regret_matrix(&discrepancy_matrix(&e, &r, &pw).unwrap()).unwrap();
    assert_eq!(rm.rows(), 4);
    assert!(rm.r[0].iter().all(|&v| v == 0.0));
    let pols = e.policies(&r);
    for k in 0..3 {
        assert!(rm.r[k + 1][k].abs() < 1e-10);
        for (kp, pol) in pols.iter().enumerate() {
            let direct = regret_of_policy(pol, &e, &r, &pw, k).unwrap();
            assert!((rm.r[k + 1][kp] * e.kappa() - direct).abs() < 1e-10);
        }
    }
    assert!(rm.to_csv().starts_with("row,z1,z2,z3\nz0,0,0,0\n"));
}

#[test]
fn game_degenerate_cases() {
    let single = RegretMatrix::new(vec![vec![0.0], vec![1.3]]).unwrap();
    let s = mmra_ae(&single, 50, None).unwrap();
    assert_eq!(s.w, vec![1.0]);
    let zero = RegretMatrix::new(vec![vec![0.0; 3]; 4]).unwrap();
    let s = mmra_ae(&zero, 50, None).unwrap();
    assert_eq!(s.value, 0.0);
    assert!(s.w.iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-15));
    assert!(mmra_ae(&zero, 1, None).is_err());
    assert!(RegretMatrix::new(vec![vec![f64::NAN], vec![0.0]]).is_err());
}

#[test]
fn game_value_matches_grid() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..3 {
        let r =
            RegretMatrix::new((0..4).map(|_| (0..3).map(|_| rng.random_range(0.0..2.0)).collect()).collect()).unwrap();
        let s = mmra_ae(&r, 100_000, None).unwrap();
        let oracle = grid_value(&r, 1000);
        assert!((s.value - oracle).abs() <= 1e-3, "{} vs {}", s.value, oracle);
        assert!(s.value <= r.value(&[1.0 / 3.0; 3]) + 1e-12);
        for _ in 0..1000 {
            let mut w: Vec<f64> = (0..3).map(|_| -(1.0 - rng.random::<f64>()).ln()).collect();
            let t: f64 = w.iter().sum();
            w.iter_mut().for_each(|v| *v /= t);
            assert!(r.value(&w) >= s.value - 1e-3);
        }
        assert!((s.w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!((s.p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn game_gap_shrinks() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    for _ in 0..5 {
        let r =
            RegretMatrix::new((0..4).map(|_| (0..3).map(|_| rng.random_range(0.0..2.0)).collect()).collect()).unwrap();
        let s = mmra_ae(&r, 10_000, None).unwrap();
        assert!(s.trace[9_999].gap < s.trace[99].gap);
        let csv = s.trace_csv();
        assert!(csv.starts_with("iteration,w_1,w_2,w_3,p_0,p_1,p_2,p_3,gap\n1,"));
    }
}

#[test]
fn lw_single_type_keeps_unit_weight() {
    let c = random_catalog(2, 3, 2, 1.0, 5).unwrap();
    let e = ensemble_of(&c, &[vec![1.0, 0.5]], 0.1);
    let d = Design::expected(&c, &Population::point_mass(vec![1.0, 0.5]), 2).unwrap();
    let g = Responsibilities::new(vec![vec![1.0]; d.n()]).unwrap();
    let res =
        mmra_lw(&d, &e, &g, &ReferencePolicy::uniform(&c), &uniform_prompt_weights(&c), &LwConfig::default()).unwrap();
    assert!(res.trace.iter().all(|r| r.w == vec![1.0]));
    assert_eq!(res.w, vec![1.0]);
}

#[test]
fn lw_symmetric_pair_balances() {
    let c = Catalog::from_features(1, vec![vec![vec![1.0], vec![-1.0], vec![0.5], vec![-0.5]]]).unwrap();
    let e = ensemble_of(&c, &[vec![2.0], vec![-2.0]], 0.1);
    let pop = Population::from_parts(vec![vec![2.0], vec![-2.0]], vec![0.5, 0.5]).unwrap();
    let d = Design::expected(&c, &pop, 3).unwrap();
    let g = e_step(&d, &e.clone()).unwrap();
    let cfg = LwConfig { iters: 30, step: 5.0, ..Default::default() };
    let res = mmra_lw(&d, &e, &g, &ReferencePolicy::uniform(&c), &[1.0], &cfg).unwrap();
    assert!((res.w[0] - 0.5).abs() < 0.05, "{:?}", res.w);
    assert!(lw_trace_csv(&res.trace).starts_with("iteration,w_1,w_2,regret_1,regret_2\n1,0.5,0.5,"));
}

#[test]
fn lw_returns_lowest_max_regret_iterate() {
    let (c, e, r, pw) = random_setup(11, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let thetas: Vec<Vec<f64>> = (0..3).map(|_| (0..3).map(|_| rng.random_range(-2.0..2.0)).collect()).collect();
    let pop = Population::from_parts(thetas, vec![0.5, 0.3, 0.2]).unwrap();
    let d = Design::expected(&c, &pop, 2).unwrap();
    let g = e_step(&d, &e).unwrap();
    let cfg = LwConfig { iters: 8, step: 3.0, ..Default::default() };
    let res = mmra_lw(&d, &e, &g, &r, &pw, &cfg).unwrap();
    let worst = |v: &[f64]| v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let best = res.trace.iter().map(|t| worst(&t.regrets)).fold(f64::INFINITY, f64::min);
    let got = worst(&table_regrets(&res.table, &e, &r, &pw).unwrap());
    assert!((got - best).abs() < 1e-12);
    let row = res.trace.iter().find(|t| worst(&t.regrets) == best).unwrap();
    assert_eq!(row.w, res.w);
}

#[test]
fn original_identical_tables_reaches_optimum() {
    let c = random_catalog(2, 3, 2, 1.0, 6).unwrap();
    let e = ensemble_of(&c, &[vec![1.0, -0.5], vec![1.0, -0.5]], 0.5);
    let r = ReferencePolicy::uniform(&c);
    let pw = uniform_prompt_weights(&c);
    let cfg = OriginalConfig { iters: 5000, kappa: 0.5, ..Default::default() };
    let res = mmra_original(&e, &r, &pw, &cfg).unwrap();
    let regrets = table_regrets(&res.table, &e, &r, &pw).unwrap();
    assert!(regrets.iter().all(|v| v.max(0.0) < 1e-4), "{regrets:?}");
}

#[test]
fn original_with_large_kappa_stays_at_reference() {
    let (c, e, r, pw) = random_setup(7, 2);
    let cfg = OriginalConfig { iters: 500, kappa: 1e3, ..Default::default() };
    let res = mmra_original(&e, &r, &pw, &cfg).unwrap();
    let kl = kl_of_dist(&res.table.policy(&r), &r, 1.0, &pw);
    assert!(kl <= 1e-3, "{kl}");
    let _ = c;
}

#[test]
fn original_beats_mixture_game() {
    for seed in 0..3 {
        let (_, e, r, pw) = random_setup(20 + seed, 3);
        let rm = regret_matrix(&discrepancy_matrix(&e, &r, &pw).unwrap()).unwrap();
        let game = mmra_ae(&rm, 20_000, None).unwrap();
        // small loss kappa so the free policy is not traded off against KL
        let cfg = OriginalConfig { iters: 20_000, kappa: 1e-3, mwu_step: 0.5, ..Default::default() };
        let res = mmra_original(&e, &r, &pw, &cfg).unwrap();
        let worst = table_regrets(&res.table, &e, &r, &pw).unwrap().into_iter().fold(0.0, f64::max);
        assert!(worst <= game.value * e.kappa() + 1e-3, "{worst} vs {}", game.value * e.kappa());
    }
}

#[test]
fn original_diverges_with_huge_step() {
    let c = random_catalog(2, 4, 2, 1.0, 8).unwrap();
    let e = ensemble_of(&c, &[vec![0.01, 0.0], vec![0.0, -0.01]], 0.1);
    let r = ReferencePolicy::uniform(&c);
    let pw = uniform_prompt_weights(&c);
    let cfg = OriginalConfig { iters: 200, policy_step: Some(1e6), ..Default::default() };
    assert!(matches!(mmra_original(&e, &r, &pw, &cfg), Err(Error::StepSize { .. })));
}
