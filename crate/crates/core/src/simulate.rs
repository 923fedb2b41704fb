//! The data-generating process: latent types, type-independent prompt and
//! choice-set assignment, and winners drawn from each type's choice model.

use std::collections::HashSet;
use std::io::{BufRead, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec;
use crate::rewards::{Catalog, ChoiceModel, Population, Preference, Prompt, Response};

/// Personality P1 over the five OCEAN traits.
pub const MPI_P1: [f64; 5] = [3.0, 0.0, 2.0, 0.0, -2.5];
/// Personality P2 = -P1.
pub const MPI_P2: [f64; 5] = [-3.0, 0.0, -2.0, 0.0, 2.5];
/// Personality P3.
pub const MPI_P3: [f64; 5] = [0.0, 2.0, 0.0, 2.0, 0.0];
pub const MPI_ETA: [f64; 3] = [0.3, 0.3, 0.4];
pub const MPI_PHRASES: usize = 990;

/// One observation: the winner chosen from `{winner} ∪ rejected`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PreferenceRecord {
    pub annotator: u64,
    pub prompt: u32,
    pub winner: u32,
    pub rejected: Vec<u32>,
}

impl PreferenceRecord {
    /// Winner followed by the rejected responses.
    pub fn choice_set(&self) -> Vec<u32> {
        let mut v = Vec::with_capacity(self.rejected.len() + 1);
        v.push(self.winner);
        v.extend_from_slice(&self.rejected);
        v
    }

    pub fn is_binary(&self) -> bool {
        self.rejected.len() == 1
    }

    pub fn validate(&self, catalog: &Catalog) -> Result<()> {
        if self.rejected.is_empty() {
            return Err(Error::InvalidRecord("empty rejected set".into()));
        }
        if self.rejected.contains(&self.winner) {
            return Err(Error::InvalidRecord(format!("winner {} is also rejected", self.winner)));
        }
        let p = catalog.prompt_index(self.prompt)?;
        catalog.choice_indices(p, &self.choice_set()).map_err(|e| Error::InvalidRecord(e.to_string()))?;
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnnotatorData {
    pub annotator: u64,
    pub records: Vec<PreferenceRecord>,
    /// Ground truth for evaluation; estimation code never reads it.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub true_type: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub catalog_hash: String,
    pub seed: u64,
    pub n: usize,
    pub m: usize,
    pub choice_set_size: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub header: DatasetHeader,
    pub annotators: Vec<AnnotatorData>,
}

impl Dataset {
    /// Assembles a dataset from hand-built annotators, filling the header
    /// from the data.
    pub fn from_annotators(catalog: &Catalog, seed: u64, annotators: Vec<AnnotatorData>) -> Result<Self> {
        let m = annotators.iter().map(|a| a.records.len()).max().unwrap_or(0);
        let c = annotators.iter().flat_map(|a| a.records.iter()).map(|r| r.rejected.len() + 1).max().unwrap_or(0);
        let ds = Dataset {
            header: DatasetHeader { catalog_hash: catalog.hash(), seed, n: annotators.len(), m, choice_set_size: c },
            annotators,
        };
        ds.validate(catalog)?;
        Ok(ds)
    }

    pub fn n(&self) -> usize {
        self.annotators.len()
    }

    pub fn n_records(&self) -> usize {
        self.annotators.iter().map(|a| a.records.len()).sum()
    }

    pub fn records(&self) -> impl Iterator<Item = &PreferenceRecord> {
        self.annotators.iter().flat_map(|a| a.records.iter())
    }

    pub fn validate(&self, catalog: &Catalog) -> Result<()> {
        let actual = catalog.hash();
        if actual != self.header.catalog_hash {
            return Err(Error::HashMismatch { expected: self.header.catalog_hash.clone(), actual });
        }
        let mut seen = HashSet::with_capacity(self.annotators.len());
        for a in &self.annotators {
            if !seen.insert(a.annotator) {
                return Err(Error::InvalidRecord(format!("duplicate annotator id {}", a.annotator)));
            }
            if a.records.is_empty() {
                return Err(Error::InvalidRecord(format!("annotator {} has no records", a.annotator)));
            }
            for r in &a.records {
                if r.annotator != a.annotator {
                    return Err(Error::InvalidRecord(format!(
                        "record of annotator {} filed under annotator {}",
                        r.annotator, a.annotator
                    )));
                }
                r.validate(catalog)?;
            }
        }
        Ok(())
    }

    /// Annotators whose ground-truth type is `k`.
    pub fn with_true_type(&self, k: usize) -> Dataset {
        Dataset {
            header: self.header.clone(),
            annotators: self.annotators.iter().filter(|a| a.true_type == Some(k)).cloned().collect(),
        }
    }

    /// Header line followed by one annotator per line.
    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<()> {
        serde_json::to_writer(&mut w, &self.header)?;
        w.write_all(b"\n")?;
        for a in &self.annotators {
            serde_json::to_writer(&mut w, a)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn to_jsonl(&self) -> String {
        let mut buf = Vec::new();
        self.write_jsonl(&mut buf).expect("in-memory write");
        String::from_utf8(buf).expect("utf8 json")
    }

    pub fn read_jsonl<R: BufRead>(r: R) -> Result<Self> {
        let mut lines = r.lines();
        let header_line = lines.next().ok_or_else(|| Error::Input("empty dataset file".into()))??;
        let header: DatasetHeader = serde_json::from_str(&header_line)?;
        let mut annotators = Vec::new();
        for line in lines {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            annotators.push(serde_json::from_str(&line)?);
        }
        Ok(Dataset { header, annotators })
    }
}

/// The three synthetic personalities over a phrase catalog.
///
/// Phrase `i` loads on trait `i % 5` with sign `+1` when `i / 5 + seed` is
/// even and `-1` otherwise. All phrases are responses to one instruction
/// prompt (id 0).
pub fn make_mpi_population(n_phrases: usize, seed: u64) -> Result<(Population, Catalog)> {
    if n_phrases < 3 {
        return Err(Error::Config(format!("n_phrases must be >= 3, got {n_phrases}")));
    }
    let responses = (0..n_phrases)
        .map(|i| {
            let mut f = vec![0.0; 5];
            let sign = if ((i / 5) as u64 + seed).is_multiple_of(2) { 1.0 } else { -1.0 };
            f[i % 5] = sign;
            Response { id: i as u32, features: f }
        })
        .collect();
    let catalog = Catalog::new(5, vec![Prompt { id: 0, responses }])?;
    let population = Population::from_parts(vec![MPI_P1.to_vec(), MPI_P2.to_vec(), MPI_P3.to_vec()], MPI_ETA.to_vec())?;
    Ok((population, catalog))
}

/// The 50/50 mixture of `theta` and `-theta`.
pub fn make_adversarial_pair(theta: &[f64]) -> Result<Population> {
    if theta.iter().all(|&v| v == 0.0) {
        return Err(Error::DegeneratePopulation("theta = 0 makes both types identical".into()));
    }
    Population::from_parts(vec![theta.to_vec(), theta.iter().map(|v| -v).collect()], vec![0.5, 0.5])
}

/// Catalog with features drawn uniformly from `[-scale, scale]`.
pub fn random_catalog(n_prompts: usize, n_responses: usize, d: usize, scale: f64, seed: u64) -> Result<Catalog> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let features = (0..n_prompts)
        .map(|_| (0..n_responses).map(|_| (0..d).map(|_| rng.random_range(-scale..=scale)).collect()).collect())
        .collect();
    Catalog::from_features(d, features)
}

/// Per-annotator generator: one ChaCha8 keyed by the dataset seed, with the
/// annotator index selecting the stream.
pub fn annotator_rng(seed: u64, annotator: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(annotator);
    rng
}

fn sample_index<R: Rng>(rng: &mut R, probs: &[f64]) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

/// Type positions sorted by a content key, so the type drawn for a given
/// uniform does not depend on how the population is ordered.
fn canonical_type_order(population: &Population) -> Vec<usize> {
    let mut order: Vec<usize> = (0..population.k()).collect();
    let key = |k: usize| {
        let t = &population.types()[k];
        let mut v: Vec<u64> = t.theta.iter().map(|x| x.to_bits()).collect();
        v.push(t.eta.to_bits());
        v
    };
    order.sort_by_key(|&k| key(k));
    order
}

/// Samples `n` annotators with `m` records each.
///
/// Annotator `i` draws from [`annotator_rng`]`(seed, i)`: its type first,
/// then for each record a uniform prompt, `choice_set_size` distinct
/// responses in sampled order, and the winner from the type's choice model.
/// Output does not depend on the degree of parallelism.
pub fn simulate_dataset(
    catalog: &Catalog,
    population: &Population,
    n: usize,
    m: usize,
    choice_set_size: usize,
    seed: u64,
) -> Result<Dataset> {
    if n == 0 || m == 0 {
        return Err(Error::Config(format!("n and m must be >= 1 (got n={n}, m={m})")));
    }
    if choice_set_size < 2 {
        return Err(Error::Config(format!("choice_set_size must be >= 2, got {choice_set_size}")));
    }
    if choice_set_size > catalog.min_responses() {
        return Err(Error::Config(format!(
            "choice_set_size {choice_set_size} exceeds the smallest prompt ({} responses)",
            catalog.min_responses()
        )));
    }
    if population.d() != catalog.d() {
        return Err(Error::DimensionMismatch { expected: catalog.d(), got: population.d() });
    }
    let order = canonical_type_order(population);
    let canonical_eta: Vec<f64> = order.iter().map(|&k| population.types()[k].eta).collect();
    let annotators = exec::map_range(n, |i| {
        let id = i as u64;
        let mut rng = annotator_rng(seed, id);
        let z = order[sample_index(&mut rng, &canonical_eta)];
        let theta = &population.types()[z].theta;
        let records = (0..m)
            .map(|_| {
                let p = rng.random_range(0..catalog.n_prompts());
                let set = rand::seq::index::sample(&mut rng, catalog.n_responses(p), choice_set_size).into_vec();
                let probs = Preference(theta).choice_distribution(catalog, p, &set);
                let w = sample_index(&mut rng, &probs);
                PreferenceRecord {
                    annotator: id,
                    prompt: catalog.prompt_id(p),
                    winner: catalog.response_id(p, set[w]),
                    rejected: set
                        .iter()
                        .enumerate()
                        .filter(|&(j, _)| j != w)
                        .map(|(_, &r)| catalog.response_id(p, r))
                        .collect(),
                }
            })
            .collect();
        AnnotatorData { annotator: id, records, true_type: Some(z) }
    });
    Ok(Dataset { header: DatasetHeader { catalog_hash: catalog.hash(), seed, n, m, choice_set_size }, annotators })
}

/// Full top-choice distribution over `choice_set` (ids) under `model`.
pub fn exact_choice_weights(
    catalog: &Catalog,
    model: &dyn ChoiceModel,
    prompt: u32,
    choice_set: &[u32],
) -> Result<Vec<f64>> {
    let p = catalog.prompt_index(prompt)?;
    if choice_set.len() < 2 {
        return Err(Error::InvalidChoice(format!("choice set has {} members", choice_set.len())));
    }
    let set = catalog.choice_indices(p, choice_set)?;
    Ok(model.choice_distribution(catalog, p, &set))
}

/// All `size`-subsets of `0..n` in lexicographic order.
pub fn subsets(n: usize, size: usize) -> Vec<Vec<usize>> {
    fn rec(start: usize, n: usize, size: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == size {
            out.push(cur.clone());
            return;
        }
        for i in start..n {
            if n - i < size - cur.len() {
                break;
            }
            cur.push(i);
            rec(i + 1, n, size, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    if size <= n {
        rec(0, n, size, &mut Vec::with_capacity(size), &mut out);
    }
    out
}
