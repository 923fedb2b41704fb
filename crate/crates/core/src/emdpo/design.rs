use crate::error::{Error, Result};
use crate::rewards::{Catalog, ChoiceModel};
use crate::simulate::{subsets, Dataset};

/// One record resolved to catalog positions; `items[0]` is the winner.
#[derive(Clone, Debug, PartialEq)]
pub struct CompiledRecord {
    pub prompt: usize,
    pub items: Vec<usize>,
}

/// A dataset resolved against its catalog, grouped per annotator and per
/// prompt for the E- and M-steps.
#[derive(Clone, Debug)]
pub struct Design {
    pub(crate) n_responses: Vec<usize>,
    pub(crate) records: Vec<CompiledRecord>,
    pub(crate) owner: Vec<usize>,
    pub(crate) offsets: Vec<usize>,
    pub(crate) by_prompt: Vec<Vec<usize>>,
    weights: Vec<f64>,
    annotator_ids: Vec<u64>,
    mean_winner_features: Vec<Vec<f64>>,
    true_types: Vec<Option<usize>>,
}

impl Design {
    pub fn from_dataset(catalog: &Catalog, dataset: &Dataset) -> Result<Self> {
        dataset.validate(catalog)?;
        let mut records = Vec::with_capacity(dataset.n_records());
        let mut owner = Vec::with_capacity(dataset.n_records());
        let mut offsets = vec![0];
        let mut mean_winner_features = Vec::with_capacity(dataset.n());
        for (i, a) in dataset.annotators.iter().enumerate() {
            let mut mean = vec![0.0; catalog.d()];
            for r in &a.records {
                let p = catalog.prompt_index(r.prompt)?;
                let items = catalog.choice_indices(p, &r.choice_set())?;
                for (m, f) in mean.iter_mut().zip(catalog.features(p, items[0])) {
                    *m += f / a.records.len() as f64;
                }
                records.push(CompiledRecord { prompt: p, items });
                owner.push(i);
            }
            offsets.push(records.len());
            mean_winner_features.push(mean);
        }
        Ok(Self::assemble(
            catalog,
            records,
            owner,
            offsets,
            vec![1.0; dataset.n()],
            dataset.annotators.iter().map(|a| a.annotator).collect(),
            mean_winner_features,
            dataset.annotators.iter().map(|a| a.true_type).collect(),
        ))
    }

    /// Infinite-data form: one pseudo-annotator per (prompt, choice set,
    /// winner), weighted by its probability under `model` with prompts and
    /// `set_size`-subsets uniform.
    pub fn expected(catalog: &Catalog, model: &dyn ChoiceModel, set_size: usize) -> Result<Self> {
        if set_size < 2 || set_size > catalog.min_responses() {
            return Err(Error::Config(format!("set_size {set_size} is not in [2, {}]", catalog.min_responses())));
        }
        let mut records = Vec::new();
        let mut weights = Vec::new();
        let mut feats = Vec::new();
        let prompt_w = 1.0 / catalog.n_prompts() as f64;
        for p in 0..catalog.n_prompts() {
            let sets = subsets(catalog.n_responses(p), set_size);
            let set_w = prompt_w / sets.len() as f64;
            for set in sets {
                let probs = model.choice_distribution(catalog, p, &set);
                for (w, q) in probs.iter().enumerate() {
                    let mut items = vec![set[w]];
                    items.extend(set.iter().enumerate().filter(|&(j, _)| j != w).map(|(_, &r)| r));
                    feats.push(catalog.features(p, set[w]).to_vec());
                    records.push(CompiledRecord { prompt: p, items });
                    weights.push(set_w * q);
                }
            }
        }
        let n = records.len();
        Ok(Self::assemble(
            catalog,
            records,
            (0..n).collect(),
            (0..=n).collect(),
            weights,
            (0..n as u64).collect(),
            feats,
            vec![None; n],
        ))
    }

    #[allow(clippy::too_many_arguments)]
    fn assemble(
        catalog: &Catalog,
        records: Vec<CompiledRecord>,
        owner: Vec<usize>,
        offsets: Vec<usize>,
        weights: Vec<f64>,
        annotator_ids: Vec<u64>,
        mean_winner_features: Vec<Vec<f64>>,
        true_types: Vec<Option<usize>>,
    ) -> Self {
        let mut by_prompt = vec![Vec::new(); catalog.n_prompts()];
        for (j, r) in records.iter().enumerate() {
            by_prompt[r.prompt].push(j);
        }
        Design {
            n_responses: (0..catalog.n_prompts()).map(|p| catalog.n_responses(p)).collect(),
            records,
            owner,
            offsets,
            by_prompt,
            weights,
            annotator_ids,
            mean_winner_features,
            true_types,
        }
    }

    /// Replaces the per-annotator weights (default 1).
    pub fn with_weights(mut self, weights: Vec<f64>) -> Result<Self> {
        if weights.len() != self.n() {
            return Err(Error::DimensionMismatch { expected: self.n(), got: weights.len() });
        }
        if weights.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(Error::Input("annotator weights must be finite and non-negative".into()));
        }
        self.weights = weights;
        Ok(self)
    }

    /// Number of annotators.
    pub fn n(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn n_prompts(&self) -> usize {
        self.n_responses.len()
    }

    pub fn records(&self) -> &[CompiledRecord] {
        &self.records
    }

    pub fn annotator_records(&self, i: usize) -> &[CompiledRecord] {
        &self.records[self.offsets[i]..self.offsets[i + 1]]
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn total_weight(&self) -> f64 {
        self.weights.iter().sum()
    }

    pub fn annotator_ids(&self) -> &[u64] {
        &self.annotator_ids
    }

    pub fn mean_winner_features(&self) -> &[Vec<f64>] {
        &self.mean_winner_features
    }

    pub fn true_types(&self) -> &[Option<usize>] {
        &self.true_types
    }

    pub(crate) fn check_shape(&self, n_responses: &[Vec<f64>]) -> Result<()> {
        if n_responses.len() != self.n_prompts()
            || n_responses.iter().zip(&self.n_responses).any(|(row, &n)| row.len() != n)
        {
            return Err(Error::Input("score table does not match the dataset's catalog".into()));
        }
        Ok(())
    }
}
