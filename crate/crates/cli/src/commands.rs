//! One function per subcommand. Each reads its inputs from `input`, writes
//! CSV/JSON files plus a manifest to `out`, and is a pure function of the
//! configuration and the input files.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use hetpref_core::aggregate::{
    discrepancy_matrix, lw_trace_csv, mmra_ae, mmra_lw, mmra_original, original_trace_csv, regret_matrix,
    regret_vector, uniform_mixture,
};
use hetpref_core::emdpo::{e_step, run_em_restarts, trace_csv, Design};
use hetpref_core::evaluate::{
    binary_pairs, evaluate_method, max_mean_reward_margin, max_regret, metrics_csv, records_by_type, run_cluster_dpo,
    run_vanilla_dpo,
};
use hetpref_core::identify::{
    binary_likelihood_flatness, expected_loglik, recover_theta_from_binary, recovery_experiment,
    verify_binary_flatness, ComparisonDesign,
};
use hetpref_core::policy::{uniform_prompt_weights, PolicyDist, ReferencePolicy, ScoreEnsemble};
use hetpref_core::rewards::{Catalog, ChoiceModel, Population};
use hetpref_core::simulate::{make_adversarial_pair, make_mpi_population, random_catalog, simulate_dataset, Dataset};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::{AggregateMethod, CatalogConfig, Config, PopulationKind};
use crate::error::CliError;
use crate::files::{sha256_hex, Inputs, Outputs};

/// Offset mixed into the seed of held-out evaluation data.
const TEST_SEED_SALT: u64 = 0x7E57_DA7A_0000_0001;

fn config_hash(cfg: &Config) -> String {
    sha256_hex(serde_json::to_string(cfg).expect("config serialises").as_bytes())
}

fn build_catalog(c: &CatalogConfig) -> Result<Catalog, CliError> {
    Ok(random_catalog(c.n_prompts, c.n_responses, c.d, c.scale, c.seed)?)
}

fn read_catalog(inputs: &mut Inputs) -> Result<Catalog, CliError> {
    Ok(Catalog::from_json(&inputs.read("catalog.json")?)?)
}

/// Reads `dataset.jsonl` and checks it against the catalog and against the
/// simulate manifest.
fn read_dataset(inputs: &mut Inputs, catalog: &Catalog) -> Result<Dataset, CliError> {
    let text = inputs.read("dataset.jsonl")?;
    inputs.check_written_by("simulate", "catalog.json")?;
    inputs.check_written_by("simulate", "dataset.jsonl")?;
    let data = Dataset::read_jsonl(text.as_bytes())?;
    let actual = catalog.hash();
    if data.header.catalog_hash != actual {
        return Err(CliError::HashMismatch {
            what: "catalog (dataset header vs catalog.json)".into(),
            expected: data.header.catalog_hash.clone(),
            actual,
        });
    }
    data.validate(catalog)?;
    Ok(data)
}

fn read_ensemble(inputs: &mut Inputs, catalog: &Catalog) -> Result<ScoreEnsemble, CliError> {
    let text = inputs.read("ensemble.json")?;
    inputs.check_written_by("emdpo", "ensemble.json")?;
    if let Some(m) = inputs.manifest("emdpo")? {
        if let (Some(expected), Some(actual)) = (m.inputs.get("dataset.jsonl"), inputs.hash("dataset.jsonl")) {
            if expected != actual {
                return Err(CliError::HashMismatch {
                    what: "dataset.jsonl (ensemble was fitted on another dataset)".into(),
                    expected: expected.clone(),
                    actual: actual.to_string(),
                });
            }
        }
    }
    Ok(ScoreEnsemble::from_json(&text, catalog)?)
}

fn read_population(inputs: &mut Inputs) -> Result<Population, CliError> {
    let text = inputs.read("population.json")?;
    inputs.check_written_by("simulate", "population.json")?;
    let raw: Population = serde_json::from_str(&text).map_err(hetpref_core::Error::from)?;
    Ok(Population::new(raw.types().to_vec())?)
}

pub fn simulate(cfg: &Config, out: &Path) -> Result<(), CliError> {
    let s = &cfg.simulate;
    let (population, catalog) = match s.population {
        PopulationKind::Mpi => make_mpi_population(s.n_phrases, s.phrase_seed)?,
        PopulationKind::Adversarial => (make_adversarial_pair(&s.theta)?, build_catalog(&s.catalog)?),
        PopulationKind::Custom => {
            (Population::from_parts(s.thetas.clone(), s.etas.clone())?, build_catalog(&s.catalog)?)
        }
    };
    let data = simulate_dataset(&catalog, &population, s.n, s.records_per_annotator, s.choice_set_size, cfg.seed)?;
    let mut o = Outputs::new(out)?;
    o.write("catalog.json", &(catalog.to_json() + "\n"))?;
    o.write_json("population.json", &population)?;
    o.write("dataset.jsonl", &data.to_jsonl())?;
    o.finish("simulate", cfg.seed, config_hash(cfg), Some(catalog.hash()), BTreeMap::new())?;
    log::info!("simulated {} annotators, {} records", data.n(), data.n_records());
    Ok(())
}

pub fn emdpo(cfg: &Config, input: &Path, out: &Path) -> Result<(), CliError> {
    let mut inputs = Inputs::new(input);
    let catalog = read_catalog(&mut inputs)?;
    let data = read_dataset(&mut inputs, &catalog)?;
    let design = Design::from_dataset(&catalog, &data)?;
    let e = &cfg.emdpo;
    let run = run_em_restarts(&design, &e.em(e.k), e.init, e.restarts, cfg.seed)?;
    let best = run.best();
    let mut o = Outputs::new(out)?;
    o.write("ensemble.json", &(best.ensemble.to_json(&catalog) + "\n"))?;
    o.write("gamma.csv", &best.gamma.to_csv(design.annotator_ids()))?;
    o.write("trace.csv", &trace_csv(&best.trace))?;
    let mut summary = String::from("restart,loglik,objective,iterations,converged,best\n");
    for (r, s) in run.runs.iter().enumerate() {
        o.write(&format!("traces/restart_{r}.csv"), &trace_csv(&s.trace))?;
        writeln!(summary, "{r},{},{},{},{},{}", s.loglik, s.objective, s.iteration, s.converged, r == run.best)
            .unwrap();
    }
    o.write("restarts.csv", &summary)?;
    o.finish("emdpo", cfg.seed, config_hash(cfg), Some(catalog.hash()), inputs.into_hashes())?;
    log::info!("best restart {} with log-likelihood {}", run.best, best.loglik);
    Ok(())
}

#[derive(Serialize)]
struct Solution {
    method: &'static str,
    /// Mixture weights over the ensemble (MWU weights for lw/original).
    weights: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    game_value: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    duality_gap: Option<f64>,
    regrets: Vec<f64>,
    max_regret: f64,
}

fn regrets_csv(regrets: &[f64], max: f64) -> String {
    let mut out = String::from("group,regret\n");
    for (k, r) in regrets.iter().enumerate() {
        writeln!(out, "{},{r}", k + 1).unwrap();
    }
    writeln!(out, "max,{max}").unwrap();
    out
}

pub fn aggregate(cfg: &Config, input: &Path, out: &Path) -> Result<(), CliError> {
    let mut inputs = Inputs::new(input);
    let catalog = read_catalog(&mut inputs)?;
    let data = read_dataset(&mut inputs, &catalog)?;
    let ensemble = read_ensemble(&mut inputs, &catalog)?;
    let reference = ReferencePolicy::uniform(&catalog);
    let pw = uniform_prompt_weights(&catalog);
    let a = &cfg.aggregate;
    let mut o = Outputs::new(out)?;
    let (policy, weights, game_value, duality_gap): (PolicyDist, Vec<f64>, Option<f64>, Option<f64>) = match a.method {
        AggregateMethod::Uniform => {
            let w = uniform_mixture(&ensemble);
            (ensemble.mixture_policy(&w, &reference)?, w, None, None)
        }
        AggregateMethod::Ae => {
            let r = regret_matrix(&discrepancy_matrix(&ensemble, &reference, &pw)?)?;
            let sol = mmra_ae(&r, a.ae.iters, a.ae.step)?;
            o.write("regret_matrix.csv", &r.to_csv())?;
            o.write("trace.csv", &sol.trace_csv())?;
            (ensemble.mixture_policy(&sol.w, &reference)?, sol.w.clone(), Some(sol.value), Some(sol.gap()))
        }
        AggregateMethod::Lw => {
            let design = Design::from_dataset(&catalog, &data)?;
            let gamma = e_step(&design, &ensemble)?;
            let res = mmra_lw(&design, &ensemble, &gamma, &reference, &pw, &a.lw)?;
            o.write("trace.csv", &lw_trace_csv(&res.trace))?;
            o.write_json("policy.json", &res.table.to_map(&catalog))?;
            (res.table.policy(&reference), res.w, None, None)
        }
        AggregateMethod::Original => {
            let res = mmra_original(&ensemble, &reference, &pw, &a.original)?;
            o.write("trace.csv", &original_trace_csv(&res.trace))?;
            o.write_json("policy.json", &res.table.to_map(&catalog))?;
            (res.table.policy(&reference), res.w, None, None)
        }
    };
    let regrets = regret_vector(&policy, &ensemble, &reference, &pw)?;
    let max = max_regret(&policy, &ensemble, &reference, &pw)?;
    o.write("regrets.csv", &regrets_csv(&regrets, max))?;
    o.write_json(
        "solution.json",
        &Solution { method: a.method.name(), weights, game_value, duality_gap, regrets, max_regret: max },
    )?;
    o.finish("aggregate", cfg.seed, config_hash(cfg), Some(catalog.hash()), inputs.into_hashes())?;
    log::info!("{} aggregation: max regret {max}", a.method.name());
    Ok(())
}

#[derive(Serialize)]
struct Flatness {
    trials: usize,
    binary_pairs: usize,
    max_deviation: f64,
}

#[derive(Serialize)]
struct LikelihoodComparison {
    /// Spread of expected log-likelihood across {pair(theta), pair(2 theta), null}.
    binary_spread: f64,
    ternary_spread: f64,
    /// Expected log-likelihood of the true pair minus that of coin flips.
    binary_gain: f64,
    ternary_gain: f64,
}

#[derive(Serialize)]
struct RecoveryRow {
    n: usize,
    choice_set_size: usize,
    margin_correlation: f64,
    max_eta_error: f64,
    /// Expected per-record log-likelihood of the fit minus that of coin flips.
    loglik_gain: f64,
}

#[derive(Serialize)]
struct RoundTrip {
    d: usize,
    m: usize,
    max_abs_error: f64,
}

#[derive(Serialize)]
struct IdentifyReport {
    theta: Vec<f64>,
    flatness: Flatness,
    likelihood: LikelihoodComparison,
    recovery: Vec<RecoveryRow>,
    round_trip: Vec<RoundTrip>,
    rank_deficient_rejected: bool,
}

pub fn identify(cfg: &Config, out: &Path) -> Result<(), CliError> {
    let ic = &cfg.identify;
    let catalog = build_catalog(&ic.catalog)?;
    let d = catalog.d();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let mut max_deviation = 0.0f64;
    for _ in 0..ic.flatness_trials {
        let theta: Vec<f64> = (0..d).map(|_| rng.random_range(-3.0..3.0)).collect();
        max_deviation = max_deviation.max(verify_binary_flatness(&catalog, &theta)?);
    }
    let binary_pairs =
        (0..catalog.n_prompts()).map(|p| catalog.n_responses(p) * (catalog.n_responses(p) - 1) / 2).sum();

    let truth = make_adversarial_pair(&ic.theta)?;
    let doubled = make_adversarial_pair(&ic.theta.iter().map(|v| 2.0 * v).collect::<Vec<_>>())?;
    let null = Population::point_mass(vec![0.0; d]);
    let cands: [&dyn ChoiceModel; 3] = [&truth, &doubled, &null];
    let rich = ic.recovery.choice_set_size;
    let gain = |size: usize| -> Result<f64, CliError> {
        Ok(expected_loglik(&catalog, &truth, &truth, size)? - expected_loglik(&catalog, &truth, &null, size)?)
    };
    let likelihood = LikelihoodComparison {
        binary_spread: binary_likelihood_flatness(&catalog, &truth, &cands, 2)?,
        ternary_spread: binary_likelihood_flatness(&catalog, &truth, &cands, rich)?,
        binary_gain: gain(2)?,
        ternary_gain: gain(rich)?,
    };

    let mut recovery = Vec::new();
    for &n in &ic.n_values {
        for size in [2, rich] {
            let rc = hetpref_core::identify::RecoveryConfig { choice_set_size: size, ..ic.recovery };
            let rec = recovery_experiment(&catalog, &truth, n, cfg.seed, &rc)?;
            let fit = expected_loglik(&catalog, &truth, &rec.fitted, size)?;
            let coin = expected_loglik(&catalog, &truth, &null, size)?;
            recovery.push(RecoveryRow {
                n,
                choice_set_size: size,
                margin_correlation: rec.report.margin_correlation,
                max_eta_error: rec.report.eta_error.iter().cloned().fold(0.0, f64::max),
                loglik_gain: fit - coin,
            });
        }
    }

    let mut round_trip = Vec::new();
    for &dim in &ic.design_dims {
        let rows: Vec<Vec<f64>> =
            (0..3 * dim).map(|_| (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let design = ComparisonDesign::new(rows)?;
        let theta: Vec<f64> = (0..dim).map(|_| rng.random_range(-2.0..2.0)).collect();
        let back = recover_theta_from_binary(&design, &design.logits(&theta)?)?;
        let err = theta.iter().zip(&back).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        round_trip.push(RoundTrip { d: dim, m: design.m(), max_abs_error: err });
    }
    let dup = ComparisonDesign::new(vec![vec![1.0, 2.0]; 4])?;
    let rank_deficient_rejected =
        matches!(recover_theta_from_binary(&dup, &[1.0; 4]), Err(hetpref_core::Error::RankDeficient { .. }));

    let mut csv = String::from("n,choice_set_size,margin_correlation,max_eta_error,loglik_gain\n");
    for r in &recovery {
        writeln!(csv, "{},{},{},{},{}", r.n, r.choice_set_size, r.margin_correlation, r.max_eta_error, r.loglik_gain)
            .unwrap();
    }
    let report = IdentifyReport {
        theta: ic.theta.clone(),
        flatness: Flatness { trials: ic.flatness_trials, binary_pairs, max_deviation },
        likelihood,
        recovery,
        round_trip,
        rank_deficient_rejected,
    };
    let mut o = Outputs::new(out)?;
    o.write_json("identify.json", &report)?;
    o.write("recovery.csv", &csv)?;
    o.finish("identify", cfg.seed, config_hash(cfg), Some(catalog.hash()), BTreeMap::new())?;
    Ok(())
}

fn group_names(k: usize) -> Vec<String> {
    (1..=k).map(|z| format!("type_{z}")).collect()
}

pub fn evaluate(cfg: &Config, input: &Path, out: &Path) -> Result<(), CliError> {
    let mut inputs = Inputs::new(input);
    let catalog = read_catalog(&mut inputs)?;
    let population = read_population(&mut inputs)?;
    let data = read_dataset(&mut inputs, &catalog)?;
    let ensemble = read_ensemble(&mut inputs, &catalog)?;
    let design = Design::from_dataset(&catalog, &data)?;
    let e = &cfg.emdpo;

    let test = simulate_dataset(&catalog, &population, cfg.evaluate.test_n, 1, 2, cfg.seed ^ TEST_SEED_SALT)?;
    let groups = records_by_type(&test, population.k())?;
    let vanilla = run_vanilla_dpo(&design, e.kappa, &e.solver)?;
    let cluster = run_cluster_dpo(&design, ensemble.k(), e.kappa, &e.solver, cfg.seed)?;
    let rows = vec![
        evaluate_method("em_dpo", &catalog, ensemble.tables(), &groups)?,
        evaluate_method("cluster_dpo", &catalog, cluster.ensemble.tables(), &groups)?,
        evaluate_method("vanilla_dpo", &catalog, std::slice::from_ref(&vanilla), &groups)?,
    ];

    let reference = ReferencePolicy::uniform(&catalog);
    let pw = uniform_prompt_weights(&catalog);
    let gamma = e_step(&design, &ensemble)?;
    let lw = mmra_lw(&design, &ensemble, &gamma, &reference, &pw, &cfg.aggregate.lw)?;
    let policies = [
        ("mmra_lw", lw.table.policy(&reference)),
        ("uniform", ensemble.mixture_policy(&uniform_mixture(&ensemble), &reference)?),
        ("vanilla_dpo", vanilla.policy(&reference)),
    ];
    let mut regrets = String::from("method");
    for z in 1..=ensemble.k() {
        write!(regrets, ",{z}").unwrap();
    }
    regrets.push_str(",max\n");
    for (name, p) in &policies {
        write!(regrets, "{name}").unwrap();
        for r in regret_vector(p, &ensemble, &reference, &pw)? {
            write!(regrets, ",{r}").unwrap();
        }
        writeln!(regrets, ",{}", max_regret(p, &ensemble, &reference, &pw)?).unwrap();
    }

    let mut o = Outputs::new(out)?;
    o.write("metrics.csv", &metrics_csv(&group_names(population.k()), &rows))?;
    o.write("max_regret.csv", &regrets)?;
    o.finish("evaluate", cfg.seed, config_hash(cfg), Some(catalog.hash()), inputs.into_hashes())?;
    Ok(())
}

pub fn sweep_k(cfg: &Config, input: &Path, out: &Path) -> Result<(), CliError> {
    let mut inputs = Inputs::new(input);
    let catalog = read_catalog(&mut inputs)?;
    let data = read_dataset(&mut inputs, &catalog)?;
    let design = Design::from_dataset(&catalog, &data)?;
    let n_types = data.annotators.iter().filter_map(|a| a.true_type).max().map(|z| z + 1);
    let groups = match n_types {
        Some(k) if data.annotators.iter().all(|a| a.true_type.is_some()) => {
            Some(records_by_type(&data, k)?.iter().map(|g| binary_pairs(g)).collect::<Vec<_>>())
        }
        _ => None,
    };
    let e = &cfg.emdpo;
    let mut csv = String::from("k,loglik,objective,converged");
    if let Some(g) = &groups {
        for name in group_names(g.len()) {
            write!(csv, ",margin_{name}").unwrap();
        }
    }
    csv.push('\n');
    for &k in &cfg.sweep_k.ks {
        let run = run_em_restarts(&design, &e.em(k), e.init, e.restarts, cfg.seed)?;
        let best = run.best();
        write!(csv, "{k},{},{},{}", best.loglik, best.objective, best.converged).unwrap();
        if let Some(g) = &groups {
            for recs in g {
                let m = if recs.is_empty() {
                    f64::NAN
                } else {
                    max_mean_reward_margin(&catalog, best.ensemble.tables(), recs)?.0
                };
                write!(csv, ",{m}").unwrap();
            }
        }
        csv.push('\n');
        log::info!("K = {k}: log-likelihood {}", best.loglik);
    }
    let mut o = Outputs::new(out)?;
    o.write("sweep_k.csv", &csv)?;
    o.finish("sweep-k", cfg.seed, config_hash(cfg), Some(catalog.hash()), inputs.into_hashes())?;
    Ok(())
}
