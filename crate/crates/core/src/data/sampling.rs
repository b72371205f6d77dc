use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Binomial, Distribution};

use super::{standardize_joint, DataError, DatasetTable};
use crate::numkernel::Tensor;
use crate::rng::{self, FlatRng};

/// Attempts at redrawing class counts a dataset cannot honor.
pub const MAX_SAMPLE_RETRIES: usize = 100;

/// One episode: a labeled meta split and a target split over the same columns.
#[derive(Clone, Debug, PartialEq)]
pub struct Task {
    pub meta_x: Tensor,
    pub meta_y: Vec<usize>,
    pub target_x: Tensor,
    pub target_y: Option<Vec<usize>>,
    pub column_ids: Vec<usize>,
    pub source_name: String,
    pub n_classes: usize,
    pub meta_rows: Vec<usize>,
    pub target_rows: Vec<usize>,
}

impl Task {
    /// Builds a task from raw splits, standardizing them jointly.
    pub fn from_splits(
        source_name: impl Into<String>,
        meta_x: Tensor,
        meta_y: Vec<usize>,
        target_x: Tensor,
        target_y: Option<Vec<usize>>,
        n_classes: usize,
    ) -> Self {
        let (meta_x, target_x) = standardize_joint(&meta_x, &target_x);
        let n_cols = meta_x.cols();
        Self {
            meta_rows: (0..meta_x.rows()).collect(),
            target_rows: (0..target_x.rows()).collect(),
            meta_x,
            meta_y,
            target_x,
            target_y,
            column_ids: (0..n_cols).collect(),
            source_name: source_name.into(),
            n_classes,
        }
    }

    pub fn n_meta(&self) -> usize {
        self.meta_x.rows()
    }

    pub fn n_target(&self) -> usize {
        self.target_x.rows()
    }

    pub fn n_cols(&self) -> usize {
        self.meta_x.cols()
    }

    /// Number of distinct classes present in the meta split.
    pub fn meta_class_count(&self) -> usize {
        let mut seen = vec![false; self.n_classes.max(1)];
        for &y in &self.meta_y {
            seen[y] = true;
        }
        seen.iter().filter(|s| **s).count()
    }

    /// Same task with its columns reordered by `perm` (new column `j` is old `perm[j]`).
    pub fn permute_columns(&self, perm: &[usize]) -> Self {
        Self {
            meta_x: self.meta_x.select_cols(perm),
            target_x: self.target_x.select_cols(perm),
            column_ids: perm.iter().map(|&j| self.column_ids[j]).collect(),
            ..self.clone()
        }
    }

    /// Same task with meta rows reordered by `perm`.
    pub fn permute_meta_rows(&self, perm: &[usize]) -> Self {
        Self {
            meta_x: self.meta_x.select_rows(perm),
            meta_y: perm.iter().map(|&i| self.meta_y[i]).collect(),
            meta_rows: perm.iter().map(|&i| self.meta_rows[i]).collect(),
            ..self.clone()
        }
    }
}

/// Per-class counts of `n` rows with each row's class uniform over `k`
/// classes. For two classes the count of class 1 is Binomial(n, 0.5).
fn uniform_class_counts(n: usize, k: usize, rng: &mut FlatRng) -> Vec<usize> {
    let mut counts = vec![0; k];
    let mut remaining = n as u64;
    for (drawn, class) in (0..k).rev().enumerate() {
        let left = (k - drawn) as f64;
        let c = if class == 0 || remaining == 0 {
            remaining
        } else {
            Binomial::new(remaining, 1.0 / left).expect("valid binomial").sample(rng)
        };
        counts[class] = c as usize;
        remaining -= c;
    }
    counts
}

/// Meta split counts; every class is present whenever `n >= max(k, 2)`.
fn meta_class_counts(n: usize, k: usize, rng: &mut FlatRng) -> Vec<usize> {
    let condition = n >= k.max(2);
    loop {
        let counts = uniform_class_counts(n, k, rng);
        if !condition || counts.iter().all(|&c| c > 0) {
            return counts;
        }
    }
}

fn take_rows(
    d: &DatasetTable,
    meta_counts: &[usize],
    target_counts: &[usize],
    rng: &mut FlatRng,
) -> (Vec<usize>, Vec<usize>) {
    let by_class = d.rows_by_class();
    let mut meta = Vec::new();
    let mut target = Vec::new();
    for (c, rows) in by_class.iter().enumerate() {
        let need = meta_counts[c] + target_counts[c];
        if need == 0 {
            continue;
        }
        let picked = sample(rng, rows.len(), need);
        for (n, idx) in picked.iter().enumerate() {
            if n < meta_counts[c] {
                meta.push(rows[idx]);
            } else {
                target.push(rows[idx]);
            }
        }
    }
    meta.shuffle(rng);
    target.shuffle(rng);
    (meta, target)
}

fn choose_columns(n_cols: usize, subsample: bool, rng: &mut FlatRng) -> Vec<usize> {
    if !subsample {
        return (0..n_cols).collect();
    }
    let count = rng.gen_range(2..=n_cols);
    let mut cols = sample(rng, n_cols, count).into_vec();
    cols.sort_unstable();
    cols
}

fn assemble(d: &DatasetTable, meta_rows: Vec<usize>, target_rows: Vec<usize>, columns: Vec<usize>) -> Task {
    let feats = d.features();
    let meta_x = feats.select_rows(&meta_rows).select_cols(&columns);
    let target_x = feats.select_rows(&target_rows).select_cols(&columns);
    let (meta_x, target_x) = standardize_joint(&meta_x, &target_x);
    let labels = d.labels();
    Task {
        meta_x,
        meta_y: meta_rows.iter().map(|&i| labels[i]).collect(),
        target_x,
        target_y: Some(target_rows.iter().map(|&i| labels[i]).collect()),
        column_ids: columns,
        source_name: d.name().to_string(),
        n_classes: d.n_classes().max(2),
        meta_rows,
        target_rows,
    }
}

fn fits(available: &[usize], meta: &[usize], target: &[usize]) -> bool {
    available.iter().zip(meta.iter().zip(target)).all(|(a, (m, t))| m + t <= *a)
}

/// Samples a task with binomially distributed class counts.
///
/// Meta counts are conditioned on every class being present whenever
/// `n_meta >= 2` (binary case); target counts are unconditioned. Counts the
/// dataset cannot supply are redrawn up to [`MAX_SAMPLE_RETRIES`] times.
pub fn sample_task(
    d: &DatasetTable,
    n_meta: usize,
    n_target: usize,
    rng: &mut FlatRng,
    column_subsample: bool,
) -> Result<Task, DataError> {
    let k = d.n_classes().max(2);
    let mut available = d.class_counts();
    available.resize(k, 0);
    for _ in 0..MAX_SAMPLE_RETRIES {
        let meta = meta_class_counts(n_meta, k, rng);
        let target = uniform_class_counts(n_target, k, rng);
        if fits(&available, &meta, &target) {
            let (m, t) = take_rows(d, &meta, &target, rng);
            let cols = choose_columns(d.n_cols(), column_subsample, rng);
            return Ok(assemble(d, m, t, cols));
        }
    }
    Err(DataError::SamplingFailed { dataset: d.name().to_string(), n_meta, n_target })
}

/// Task whose meta split holds exactly `meta_counts[c]` rows of class `c`;
/// target counts are drawn as in [`sample_task`].
pub fn sample_task_with_meta_counts(
    d: &DatasetTable,
    meta_counts: &[usize],
    n_target: usize,
    rng: &mut FlatRng,
    column_subsample: bool,
) -> Result<Task, DataError> {
    let k = d.n_classes().max(2).max(meta_counts.len());
    let mut available = d.class_counts();
    available.resize(k, 0);
    let mut meta = meta_counts.to_vec();
    meta.resize(k, 0);
    if let Some(c) = (0..k).find(|&c| meta[c] > available[c]) {
        return Err(DataError::InsufficientClassRows {
            dataset: d.name().to_string(),
            class: c,
            needed: meta[c],
            available: available[c],
        });
    }
    for _ in 0..MAX_SAMPLE_RETRIES {
        let target = uniform_class_counts(n_target, k, rng);
        if fits(&available, &meta, &target) {
            let (m, t) = take_rows(d, &meta, &target, rng);
            let cols = choose_columns(d.n_cols(), column_subsample, rng);
            return Ok(assemble(d, m, t, cols));
        }
    }
    Err(DataError::SamplingFailed { dataset: d.name().to_string(), n_meta: meta.iter().sum(), n_target })
}

/// Classic K-shot task: exactly `k_shots` meta rows per class.
pub fn sample_task_equal(d: &DatasetTable, k_shots: usize, n_target: usize, rng: &mut FlatRng) -> Result<Task, DataError> {
    let k = d.n_classes().max(2);
    sample_task_with_meta_counts(d, &vec![k_shots; k], n_target, rng, false)
}

/// The fixed evaluation tasks of one dataset, drawn from a generator keyed
/// by `(seed, dataset name)`. Returns no tasks when the dataset is too small.
pub fn fixed_eval_tasks(d: &DatasetTable, n_meta: usize, n_target: usize, count: usize, seed: u64) -> Vec<Task> {
    if !d.supports(n_meta, n_target) {
        log::info!("skipping {}: too small for {} meta + {} target rows", d.name(), n_meta, n_target);
        return Vec::new();
    }
    let mut rng = rng::stream(seed, &format!("eval/{}/{}/{}", d.name(), n_meta, n_target));
    let mut tasks = Vec::with_capacity(count);
    for _ in 0..count {
        match sample_task(d, n_meta, n_target, &mut rng, false) {
            Ok(t) => tasks.push(t),
            Err(e) => {
                log::info!("skipping {}: {}", d.name(), e);
                return Vec::new();
            }
        }
    }
    tasks
}
