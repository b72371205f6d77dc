use std::collections::BTreeMap;

use rand::seq::{index::sample, SliceRandom};
use serde::{Deserialize, Serialize};

use super::{DataError, DatasetTable};
use crate::rng::FlatRng;

/// Assignment of whole datasets to cross-validation folds.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub n_folds: usize,
    pub assignments: BTreeMap<String, usize>,
}

impl FoldPlan {
    pub fn fold_of(&self, name: &str) -> Option<usize> {
        self.assignments.get(name).copied()
    }

    /// Datasets held out for testing in `fold`.
    pub fn test_names(&self, fold: usize) -> Vec<&str> {
        self.assignments.iter().filter(|(_, f)| **f == fold).map(|(n, _)| n.as_str()).collect()
    }

    /// Datasets used for training when `fold` is the test fold.
    pub fn train_names(&self, fold: usize) -> Vec<&str> {
        self.assignments.iter().filter(|(_, f)| **f != fold).map(|(n, _)| n.as_str()).collect()
    }

    pub fn fold_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.n_folds];
        for f in self.assignments.values() {
            sizes[*f] += 1;
        }
        sizes
    }
}

/// Random balanced partition of `names` into `n_folds` folds.
pub fn make_folds(names: &[String], n_folds: usize, rng: &mut FlatRng) -> Result<FoldPlan, DataError> {
    if n_folds < 2 {
        return Err(DataError::Folds(format!("need at least 2 folds, got {n_folds}")));
    }
    if n_folds > names.len() {
        return Err(DataError::Folds(format!("{n_folds} folds for only {} datasets", names.len())));
    }
    let mut order: Vec<&String> = names.iter().collect();
    order.sort();
    order.dedup();
    if order.len() != names.len() {
        return Err(DataError::Folds("dataset names must be unique".into()));
    }
    order.shuffle(rng);
    let assignments = order.into_iter().enumerate().map(|(i, n)| (n.clone(), i % n_folds)).collect();
    Ok(FoldPlan { n_folds, assignments })
}

/// Hyperparameter-validation collection: a fraction of datasets each
/// contribute a fraction of their rows to validation. Returns
/// `(validation, remainder)`; no row appears in both.
pub fn validation_split(
    datasets: &[DatasetTable],
    dataset_fraction: f64,
    row_fraction: f64,
    rng: &mut FlatRng,
) -> Result<(Vec<DatasetTable>, Vec<DatasetTable>), DataError> {
    let n_val = ((datasets.len() as f64) * dataset_fraction).round() as usize;
    let chosen = sample(rng, datasets.len(), n_val.min(datasets.len())).into_vec();
    let mut validation = Vec::new();
    let mut remainder = Vec::new();
    for (i, d) in datasets.iter().enumerate() {
        if !chosen.contains(&i) {
            remainder.push(d.clone());
            continue;
        }
        let take = ((d.n_rows() as f64) * row_fraction).round().max(1.0) as usize;
        let mut rows: Vec<usize> = (0..d.n_rows()).collect();
        rows.shuffle(rng);
        let (val_rows, rest_rows) = rows.split_at(take.min(d.n_rows()));
        validation.push(d.subset_rows(d.name(), val_rows)?);
        if !rest_rows.is_empty() {
            remainder.push(d.subset_rows(d.name(), rest_rows)?);
        }
    }
    Ok((validation, remainder))
}
