//! Linear rewards over a finite prompt/response catalog, and the
//! Bradley-Terry / Plackett-Luce choice probabilities they induce.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Response {
    pub id: u32,
    pub features: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prompt {
    pub id: u32,
    pub responses: Vec<Response>,
}

#[derive(Deserialize)]
struct CatalogDoc {
    d: usize,
    prompts: Vec<Prompt>,
}

/// A finite universe of prompts, each with at least two responses carrying
/// `d`-dimensional feature vectors.
///
/// Serialises as `{d, prompts: [{id, responses: [{id, features}]}]}`.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(try_from = "CatalogDoc")]
pub struct Catalog {
    d: usize,
    prompts: Vec<Prompt>,
    #[serde(skip)]
    prompt_ix: HashMap<u32, usize>,
    #[serde(skip)]
    response_ix: Vec<HashMap<u32, usize>>,
}

impl PartialEq for Catalog {
    fn eq(&self, other: &Self) -> bool {
        self.d == other.d && self.prompts == other.prompts
    }
}

impl TryFrom<CatalogDoc> for Catalog {
    type Error = Error;

    fn try_from(doc: CatalogDoc) -> Result<Self> {
        Catalog::new(doc.d, doc.prompts)
    }
}

impl Catalog {
    pub fn new(d: usize, prompts: Vec<Prompt>) -> Result<Self> {
        if d == 0 {
            return Err(Error::InvalidCatalog("feature dimension must be >= 1".into()));
        }
        if prompts.is_empty() {
            return Err(Error::InvalidCatalog("catalog has no prompts".into()));
        }
        let mut prompt_ix = HashMap::with_capacity(prompts.len());
        let mut response_ix = Vec::with_capacity(prompts.len());
        for (pi, p) in prompts.iter().enumerate() {
            if prompt_ix.insert(p.id, pi).is_some() {
                return Err(Error::InvalidCatalog(format!("duplicate prompt id {}", p.id)));
            }
            if p.responses.len() < 2 {
                return Err(Error::InvalidCatalog(format!(
                    "prompt {} has {} responses, need at least 2",
                    p.id,
                    p.responses.len()
                )));
            }
            let mut rix = HashMap::with_capacity(p.responses.len());
            for (ri, r) in p.responses.iter().enumerate() {
                if r.features.len() != d {
                    return Err(Error::InvalidCatalog(format!(
                        "response {} of prompt {} has dimension {}, expected {d}",
                        r.id,
                        p.id,
                        r.features.len()
                    )));
                }
                if r.features.iter().any(|v| !v.is_finite()) {
                    return Err(Error::InvalidCatalog(format!(
                        "response {} of prompt {} has non-finite features",
                        r.id, p.id
                    )));
                }
                if rix.insert(r.id, ri).is_some() {
                    return Err(Error::InvalidCatalog(format!("duplicate response id {} in prompt {}", r.id, p.id)));
                }
            }
            response_ix.push(rix);
        }
        Ok(Catalog { d, prompts, prompt_ix, response_ix })
    }

    /// Builds a catalog from per-prompt feature lists; ids are positions.
    pub fn from_features(d: usize, features: Vec<Vec<Vec<f64>>>) -> Result<Self> {
        let prompts = features
            .into_iter()
            .enumerate()
            .map(|(pi, rs)| Prompt {
                id: pi as u32,
                responses: rs.into_iter().enumerate().map(|(ri, f)| Response { id: ri as u32, features: f }).collect(),
            })
            .collect();
        Catalog::new(d, prompts)
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn prompts(&self) -> &[Prompt] {
        &self.prompts
    }

    pub fn n_prompts(&self) -> usize {
        self.prompts.len()
    }

    pub fn n_responses(&self, prompt: usize) -> usize {
        self.prompts[prompt].responses.len()
    }

    pub fn min_responses(&self) -> usize {
        self.prompts.iter().map(|p| p.responses.len()).min().unwrap_or(0)
    }

    pub fn prompt_index(&self, id: u32) -> Result<usize> {
        self.prompt_ix.get(&id).copied().ok_or(Error::UnknownPrompt(id))
    }

    pub fn response_index(&self, prompt: usize, id: u32) -> Result<usize> {
        self.response_ix[prompt]
            .get(&id)
            .copied()
            .ok_or(Error::UnknownResponse { prompt: self.prompts[prompt].id, response: id })
    }

    pub fn prompt_id(&self, prompt: usize) -> u32 {
        self.prompts[prompt].id
    }

    pub fn response_id(&self, prompt: usize, response: usize) -> u32 {
        self.prompts[prompt].responses[response].id
    }

    pub fn features(&self, prompt: usize, response: usize) -> &[f64] {
        &self.prompts[prompt].responses[response].features
    }

    /// Maps a list of response ids of one prompt to positions, rejecting
    /// duplicates.
    pub fn choice_indices(&self, prompt: usize, ids: &[u32]) -> Result<Vec<usize>> {
        let mut out = Vec::with_capacity(ids.len());
        for &id in ids {
            let ix = self.response_index(prompt, id)?;
            if out.contains(&ix) {
                return Err(Error::InvalidChoice(format!("response {id} appears twice")));
            }
            out.push(ix);
        }
        Ok(out)
    }

    /// Rewards `theta . psi` for every response of `prompt`.
    pub fn rewards(&self, theta: &[f64], prompt: usize) -> Vec<f64> {
        self.prompts[prompt].responses.iter().map(|r| dot(theta, &r.features)).collect()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("catalog serialises")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    /// Hex SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_json().as_bytes()))
    }
}

/// One latent annotator type: a preference vector and its population share.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentType {
    pub id: usize,
    pub theta: Vec<f64>,
    pub eta: f64,
}

/// A finite mixture of latent types (the discrete instance of `f(theta)`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Population {
    types: Vec<LatentType>,
}

impl Population {
    pub fn new(types: Vec<LatentType>) -> Result<Self> {
        if types.is_empty() {
            return Err(Error::InvalidPopulation("need at least one type".into()));
        }
        let d = types[0].theta.len();
        let mut total = 0.0;
        for (k, t) in types.iter().enumerate() {
            if t.id != k {
                return Err(Error::InvalidPopulation(format!("type at position {k} has id {}", t.id)));
            }
            if t.theta.len() != d {
                return Err(Error::DimensionMismatch { expected: d, got: t.theta.len() });
            }
            if t.theta.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidPopulation(format!("type {k} has non-finite theta")));
            }
            if !(0.0..=1.0).contains(&t.eta) {
                return Err(Error::InvalidPopulation(format!("type {k} has eta {} outside [0,1]", t.eta)));
            }
            total += t.eta;
        }
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidPopulation(format!("mixture weights sum to {total}")));
        }
        Ok(Population { types })
    }

    pub fn from_parts(thetas: Vec<Vec<f64>>, etas: Vec<f64>) -> Result<Self> {
        if thetas.len() != etas.len() {
            return Err(Error::DimensionMismatch { expected: thetas.len(), got: etas.len() });
        }
        Population::new(
            thetas.into_iter().zip(etas).enumerate().map(|(id, (theta, eta))| LatentType { id, theta, eta }).collect(),
        )
    }

    pub fn point_mass(theta: Vec<f64>) -> Self {
        Population { types: vec![LatentType { id: 0, theta, eta: 1.0 }] }
    }

    pub fn types(&self) -> &[LatentType] {
        &self.types
    }

    pub fn k(&self) -> usize {
        self.types.len()
    }

    pub fn d(&self) -> usize {
        self.types[0].theta.len()
    }

    pub fn etas(&self) -> Vec<f64> {
        self.types.iter().map(|t| t.eta).collect()
    }

    /// Reorders types so that new type `j` is old type `perm[j]`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        if perm.len() != self.k() {
            return Err(Error::DimensionMismatch { expected: self.k(), got: perm.len() });
        }
        Population::from_parts(
            perm.iter().map(|&p| self.types[p].theta.clone()).collect(),
            perm.iter().map(|&p| self.types[p].eta).collect(),
        )
    }

    fn check_dim(&self, catalog: &Catalog) -> Result<()> {
        if self.d() != catalog.d() {
            return Err(Error::DimensionMismatch { expected: catalog.d(), got: self.d() });
        }
        Ok(())
    }
}

/// Anything that assigns a top-choice distribution to a comparison set.
pub trait ChoiceModel: Sync {
    /// Probability of each member of `set` (response positions within
    /// `prompt`) being chosen.
    fn choice_distribution(&self, catalog: &Catalog, prompt: usize, set: &[usize]) -> Vec<f64>;
}

/// A single preference vector viewed as a choice model.
#[derive(Clone, Copy, Debug)]
pub struct Preference<'a>(pub &'a [f64]);

impl ChoiceModel for Preference<'_> {
    fn choice_distribution(&self, catalog: &Catalog, prompt: usize, set: &[usize]) -> Vec<f64> {
        let mut v: Vec<f64> = set.iter().map(|&r| dot(self.0, catalog.features(prompt, r))).collect();
        softmax_in_place(&mut v);
        v
    }
}

impl ChoiceModel for Population {
    fn choice_distribution(&self, catalog: &Catalog, prompt: usize, set: &[usize]) -> Vec<f64> {
        let mut out = vec![0.0; set.len()];
        for t in &self.types {
            let p = Preference(&t.theta).choice_distribution(catalog, prompt, set);
            for (o, q) in out.iter_mut().zip(p) {
                *o += t.eta * q;
            }
        }
        out
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Max-subtracted softmax.
pub fn softmax_in_place(xs: &mut [f64]) {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for x in xs.iter_mut() {
        *x = (*x - m).exp();
        z += *x;
    }
    for x in xs.iter_mut() {
        *x /= z;
    }
}

fn check_theta(catalog: &Catalog, theta: &[f64]) -> Result<()> {
    if theta.len() != catalog.d() {
        return Err(Error::DimensionMismatch { expected: catalog.d(), got: theta.len() });
    }
    Ok(())
}

/// Resolves a choice set and the chosen member's position within it.
fn resolve_choice(catalog: &Catalog, prompt: u32, set: &[u32], chosen: u32) -> Result<(usize, Vec<usize>, usize)> {
    let p = catalog.prompt_index(prompt)?;
    if set.len() < 2 {
        return Err(Error::InvalidChoice(format!("choice set has {} members, need at least 2", set.len())));
    }
    let ix = catalog.choice_indices(p, set)?;
    let pos = set
        .iter()
        .position(|&r| r == chosen)
        .ok_or_else(|| Error::InvalidChoice(format!("response {chosen} is not in the choice set")))?;
    Ok((p, ix, pos))
}

/// `theta . psi(prompt, response)`.
pub fn reward(catalog: &Catalog, theta: &[f64], prompt: u32, response: u32) -> Result<f64> {
    check_theta(catalog, theta)?;
    let p = catalog.prompt_index(prompt)?;
    let r = catalog.response_index(p, response)?;
    Ok(dot(theta, catalog.features(p, r)))
}

/// Bradley-Terry probability that `y1` is preferred to `y2`.
pub fn pairwise_prob(catalog: &Catalog, theta: &[f64], prompt: u32, y1: u32, y2: u32) -> Result<f64> {
    if y1 == y2 {
        return Err(Error::InvalidPair(y1));
    }
    let r1 = reward(catalog, theta, prompt, y1)?;
    let r2 = reward(catalog, theta, prompt, y2)?;
    Ok(sigmoid(r1 - r2))
}

/// Plackett-Luce top-choice probability of `chosen` within `choice_set`.
pub fn choice_prob(catalog: &Catalog, theta: &[f64], prompt: u32, choice_set: &[u32], chosen: u32) -> Result<f64> {
    check_theta(catalog, theta)?;
    let (p, set, pos) = resolve_choice(catalog, prompt, choice_set, chosen)?;
    Ok(Preference(theta).choice_distribution(catalog, p, &set)[pos])
}

/// Finite-mixture (random-coefficient logit) top-choice probability.
pub fn mixture_choice_prob(
    catalog: &Catalog,
    population: &Population,
    prompt: u32,
    choice_set: &[u32],
    chosen: u32,
) -> Result<f64> {
    population.check_dim(catalog)?;
    let (p, set, pos) = resolve_choice(catalog, prompt, choice_set, chosen)?;
    Ok(population.choice_distribution(catalog, p, &set)[pos])
}
