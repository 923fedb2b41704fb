//! Run configuration: a TOML document merged over the built-in preset.

use std::path::Path;

use hetpref_core::aggregate::{LwConfig, OriginalConfig};
use hetpref_core::emdpo::{EmConfig, InitStrategy, SolverConfig};
use hetpref_core::identify::RecoveryConfig;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

pub const PAPER_DEFAULTS: &str = include_str!("../presets/paper_defaults.toml");

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub seed: u64,
    pub simulate: SimulateConfig,
    pub emdpo: EmdpoConfig,
    pub aggregate: AggregateConfig,
    pub identify: IdentifyConfig,
    pub evaluate: EvaluateConfig,
    pub sweep_k: SweepConfig,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PopulationKind {
    Mpi,
    Adversarial,
    Custom,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CatalogConfig {
    pub n_prompts: usize,
    pub n_responses: usize,
    pub d: usize,
    pub scale: f64,
    pub seed: u64,
}

impl Default for CatalogConfig {
    fn default() -> Self {
        CatalogConfig { n_prompts: 10, n_responses: 6, d: 1, scale: 1.0, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulateConfig {
    pub population: PopulationKind,
    pub n: usize,
    pub records_per_annotator: usize,
    pub choice_set_size: usize,
    pub n_phrases: usize,
    pub phrase_seed: u64,
    pub theta: Vec<f64>,
    pub thetas: Vec<Vec<f64>>,
    pub etas: Vec<f64>,
    pub catalog: CatalogConfig,
}

impl Default for SimulateConfig {
    fn default() -> Self {
        SimulateConfig {
            population: PopulationKind::Mpi,
            n: 1500,
            records_per_annotator: 1,
            choice_set_size: 2,
            n_phrases: hetpref_core::simulate::MPI_PHRASES,
            phrase_seed: 0,
            theta: vec![1.0],
            thetas: Vec::new(),
            etas: Vec::new(),
            catalog: CatalogConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmdpoConfig {
    pub k: usize,
    pub max_iters: usize,
    pub tol: f64,
    pub kappa: f64,
    pub restarts: usize,
    pub init: InitStrategy,
    pub solver: SolverConfig,
}

impl Default for EmdpoConfig {
    fn default() -> Self {
        let em = EmConfig::default();
        EmdpoConfig {
            k: 3,
            max_iters: em.max_iters,
            tol: em.tol,
            kappa: em.kappa,
            restarts: 1,
            init: InitStrategy::KmeansWinnerFeatures,
            solver: em.solver,
        }
    }
}

impl EmdpoConfig {
    pub fn em(&self, k: usize) -> EmConfig {
        EmConfig { k, max_iters: self.max_iters, tol: self.tol, kappa: self.kappa, solver: self.solver }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AggregateMethod {
    Uniform,
    Ae,
    Lw,
    Original,
}

impl AggregateMethod {
    pub fn name(self) -> &'static str {
        match self {
            AggregateMethod::Uniform => "uniform",
            AggregateMethod::Ae => "ae",
            AggregateMethod::Lw => "lw",
            AggregateMethod::Original => "original",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AeConfig {
    pub iters: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub step: Option<f64>,
}

impl Default for AeConfig {
    fn default() -> Self {
        AeConfig { iters: 10_000, step: None }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AggregateConfig {
    pub method: AggregateMethod,
    pub ae: AeConfig,
    pub lw: LwConfig,
    pub original: OriginalConfig,
}

impl Default for AggregateConfig {
    fn default() -> Self {
        AggregateConfig {
            method: AggregateMethod::Lw,
            ae: AeConfig::default(),
            lw: LwConfig::default(),
            original: OriginalConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IdentifyConfig {
    pub theta: Vec<f64>,
    pub flatness_trials: usize,
    pub n_values: Vec<usize>,
    pub design_dims: Vec<usize>,
    pub catalog: CatalogConfig,
    pub recovery: RecoveryConfig,
}

impl Default for IdentifyConfig {
    fn default() -> Self {
        IdentifyConfig {
            theta: vec![1.0],
            flatness_trials: 20,
            n_values: vec![500, 2000],
            design_dims: vec![2, 5, 10],
            catalog: CatalogConfig { n_prompts: 1, n_responses: 5, d: 1, scale: 1.5, seed: 0 },
            recovery: RecoveryConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluateConfig {
    pub test_n: usize,
}

impl Default for EvaluateConfig {
    fn default() -> Self {
        EvaluateConfig { test_n: 1000 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub ks: Vec<usize>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig { ks: vec![2, 3, 4, 5, 6] }
    }
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

fn parse_table(text: &str, origin: &str) -> Result<toml::Table, CliError> {
    text.parse::<toml::Table>().map_err(|e| CliError::Config(format!("{origin}: {e}")))
}

impl Config {
    /// Parses `text` over the preset it names (only `paper_defaults`
    /// exists, and is also the default).
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        let mut user = parse_table(text, "config")?;
        match user.remove("preset") {
            None => {}
            Some(toml::Value::String(p)) if p == "paper_defaults" => {}
            Some(other) => {
                return Err(CliError::Config(format!("preset: unknown preset {other}, expected \"paper_defaults\"")))
            }
        }
        let mut base = parse_table(PAPER_DEFAULTS, "preset paper_defaults")?;
        merge(&mut base, user);
        let cfg: Config = serde_path_to_error::deserialize(toml::Value::Table(base)).map_err(|e| {
            let path = e.path().to_string();
            CliError::Config(format!("{path}: {}", e.inner()))
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>, seed: Option<u64>) -> Result<Self, CliError> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p)
                .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", p.display())))?,
            None => String::new(),
        };
        let mut cfg = Self::from_toml(&text)?;
        if let Some(s) = seed {
            cfg.seed = s;
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    /// Range checks; messages name the offending field and its domain.
    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |field: &str, domain: &str, got: String| {
            Err(CliError::Config(format!("{field}: expected {domain}, got {got}")))
        };
        let s = &self.simulate;
        if s.n == 0 {
            return bad("simulate.n", "an integer >= 1", s.n.to_string());
        }
        if s.records_per_annotator == 0 {
            return bad("simulate.records_per_annotator", "an integer >= 1", "0".into());
        }
        if s.choice_set_size < 2 {
            return bad("simulate.choice_set_size", "an integer >= 2", s.choice_set_size.to_string());
        }
        match s.population {
            PopulationKind::Mpi if s.n_phrases < s.choice_set_size.max(3) => {
                return bad("simulate.n_phrases", "at least 3 and at least choice_set_size", s.n_phrases.to_string())
            }
            PopulationKind::Adversarial => {
                if s.theta.len() != s.catalog.d || s.theta.iter().all(|v| *v == 0.0) {
                    return bad(
                        "simulate.theta",
                        &format!("a non-zero vector of length simulate.catalog.d = {}", s.catalog.d),
                        format!("{:?}", s.theta),
                    );
                }
            }
            PopulationKind::Custom => {
                if s.thetas.is_empty() || s.thetas.iter().any(|t| t.len() != s.catalog.d) {
                    return bad(
                        "simulate.thetas",
                        &format!("a non-empty list of vectors of length simulate.catalog.d = {}", s.catalog.d),
                        format!("{:?}", s.thetas),
                    );
                }
                if s.etas.len() != s.thetas.len() {
                    return bad("simulate.etas", "one share per row of simulate.thetas", format!("{:?}", s.etas));
                }
            }
            _ => {}
        }
        if s.population != PopulationKind::Mpi {
            check_catalog("simulate.catalog", &s.catalog, s.choice_set_size)?;
        }
        let e = &self.emdpo;
        if e.k == 0 {
            return bad("emdpo.k", "an integer >= 1", "0".into());
        }
        if e.max_iters == 0 {
            return bad("emdpo.max_iters", "an integer >= 1", "0".into());
        }
        if !(e.kappa > 0.0 && e.kappa.is_finite()) {
            return bad("emdpo.kappa", "a positive number", e.kappa.to_string());
        }
        if e.restarts == 0 {
            return bad("emdpo.restarts", "an integer >= 1", "0".into());
        }
        if !(e.solver.ridge >= 0.0) {
            return bad("emdpo.solver.ridge", "a non-negative number", e.solver.ridge.to_string());
        }
        let a = &self.aggregate;
        if a.ae.iters < 2 {
            return bad("aggregate.ae.iters", "an integer >= 2", a.ae.iters.to_string());
        }
        if let Some(step) = a.ae.step {
            if !(step > 0.0 && step.is_finite()) {
                return bad("aggregate.ae.step", "a positive number", step.to_string());
            }
        }
        if a.lw.iters == 0 {
            return bad("aggregate.lw.iters", "an integer >= 1", "0".into());
        }
        if !(a.lw.step >= 0.0 && a.lw.step.is_finite()) {
            return bad("aggregate.lw.step", "a non-negative number", a.lw.step.to_string());
        }
        if a.original.iters == 0 {
            return bad("aggregate.original.iters", "an integer >= 1", "0".into());
        }
        if !(a.original.kappa > 0.0) {
            return bad("aggregate.original.kappa", "a positive number", a.original.kappa.to_string());
        }
        let i = &self.identify;
        if i.theta.len() != i.catalog.d || i.theta.iter().all(|v| *v == 0.0) {
            return bad(
                "identify.theta",
                &format!("a non-zero vector of length identify.catalog.d = {}", i.catalog.d),
                format!("{:?}", i.theta),
            );
        }
        check_catalog("identify.catalog", &i.catalog, i.recovery.choice_set_size.max(2))?;
        if i.n_values.contains(&0) {
            return bad("identify.n_values", "positive sample sizes", format!("{:?}", i.n_values));
        }
        if i.design_dims.contains(&0) {
            return bad("identify.design_dims", "positive dimensions", format!("{:?}", i.design_dims));
        }
        if i.recovery.em.k != 2 {
            return bad(
                "identify.recovery.em.k",
                "2 (the adversarial pair has two types)",
                i.recovery.em.k.to_string(),
            );
        }
        if i.recovery.restarts == 0 {
            return bad("identify.recovery.restarts", "an integer >= 1", "0".into());
        }
        if i.recovery.choice_set_size < 3 {
            return bad("identify.recovery.choice_set_size", "an integer >= 3", i.recovery.choice_set_size.to_string());
        }
        if self.evaluate.test_n == 0 {
            return bad("evaluate.test_n", "an integer >= 1", "0".into());
        }
        if self.sweep_k.ks.is_empty() || self.sweep_k.ks.contains(&0) {
            return bad("sweep_k.ks", "a non-empty list of integers >= 1", format!("{:?}", self.sweep_k.ks));
        }
        Ok(())
    }
}

fn check_catalog(field: &str, c: &CatalogConfig, set_size: usize) -> Result<(), CliError> {
    if c.n_prompts == 0 {
        return Err(CliError::Config(format!("{field}.n_prompts: expected an integer >= 1, got 0")));
    }
    if c.n_responses < set_size {
        return Err(CliError::Config(format!(
            "{field}.n_responses: expected at least the choice set size {set_size}, got {}",
            c.n_responses
        )));
    }
    if c.d == 0 {
        return Err(CliError::Config(format!("{field}.d: expected an integer >= 1, got 0")));
    }
    if !(c.scale > 0.0 && c.scale.is_finite()) {
        return Err(CliError::Config(format!("{field}.scale: expected a positive number, got {}", c.scale)));
    }
    Ok(())
}
