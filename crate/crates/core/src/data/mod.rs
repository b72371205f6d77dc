//! Dataset ingestion, label binarization, standardization, dataset folds and
//! episodic task sampling.

mod folds;
mod sampling;
mod table;

pub use folds::{make_folds, validation_split, FoldPlan};
pub use sampling::{
    fixed_eval_tasks, sample_task, sample_task_equal, sample_task_with_meta_counts, Task, MAX_SAMPLE_RETRIES,
};
pub use table::{binarize_one_vs_all, load_csv, load_dir, DatasetTable, LabelColumn};

use crate::numkernel::Tensor;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum DataError {
    #[error("cannot read {path}: {reason}")]
    Io { path: String, reason: String },
    #[error("{path}: file is empty")]
    Empty { path: String },
    #[error("{dataset}: line {line}, column {column}: cannot parse {value:?} as a number")]
    Parse { dataset: String, line: usize, column: usize, value: String },
    #[error("{dataset}: needs at least 2 feature columns, found {found}")]
    TooFewColumns { dataset: String, found: usize },
    #[error("{dataset}: {reason}")]
    Invalid { dataset: String, reason: String },
    #[error("{dataset}: could not draw {n_meta} meta + {n_target} target rows after {} attempts", MAX_SAMPLE_RETRIES)]
    SamplingFailed { dataset: String, n_meta: usize, n_target: usize },
    #[error("{dataset}: class {class} has {available} rows, {needed} needed")]
    InsufficientClassRows { dataset: String, class: usize, needed: usize, available: usize },
    #[error("fold split: {0}")]
    Folds(String),
}

/// Standardizes each column with mean and population standard deviation
/// computed over the stacked meta and target rows. Constant columns become zero.
pub fn standardize_joint(meta_x: &Tensor, target_x: &Tensor) -> (Tensor, Tensor) {
    let cols = meta_x.cols();
    assert_eq!(cols, target_x.cols(), "meta and target column counts differ");
    let n = (meta_x.rows() + target_x.rows()) as f64;
    let mut mean = vec![0.0; cols];
    let mut var = vec![0.0; cols];
    let all_rows = || (0..meta_x.rows()).map(|i| meta_x.row(i)).chain((0..target_x.rows()).map(|i| target_x.row(i)));
    for row in all_rows() {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    for row in all_rows() {
        for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
            *s += (v - m) * (v - m);
        }
    }
    let scale: Vec<Option<f64>> = var
        .iter()
        .zip(&mean)
        .map(|(s, m)| {
            let sd = (s / n).sqrt();
            (sd > 1e-12 * m.abs().max(1.0)).then_some(sd)
        })
        .collect();
    let apply = |x: &Tensor| {
        let mut out = x.clone();
        let c = x.cols();
        for (idx, v) in out.data_mut().iter_mut().enumerate() {
            let j = idx % c;
            *v = match scale[j] {
                Some(sd) => (*v - mean[j]) / sd,
                None => 0.0,
            };
        }
        out
    };
    (apply(meta_x), apply(target_x))
}
