//! Cross-dataset evaluation, report aggregation, reference baselines, exports and timing.

mod baselines;
mod export;
mod timing;

pub use baselines::{baseline_knn, baseline_lr, fit_logistic, knn_predict};
pub use export::{
    export_attention, export_embeddings, meta_attention, write_attention_csv, write_embeddings_csv, AttentionRow, EmbeddingRow,
};
pub use timing::{random_timing_tasks, time_inference, timing_sweep, write_timing_csv, TimingRow};

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{fixed_eval_tasks, DatasetTable, FoldPlan, Task};
use crate::error::{FlatError, Result};
use crate::model::FlatModel;
use crate::trainer::{flatadapt_infer, infer, AdaptConfig};

pub const DEFAULT_KNN_K: usize = 3;
pub const DEFAULT_LR_C: f64 = 1.0;

/// Anything that labels a task's target rows from its meta split.
/// `Ok(None)` means the model abstains on this task.
pub trait TaskModel {
    fn name(&self) -> &str;
    fn predict(&self, task: &Task) -> Result<Option<Vec<usize>>>;
}

pub struct LogisticBaseline {
    pub c: f64,
}

impl TaskModel for LogisticBaseline {
    fn name(&self) -> &str {
        "LR"
    }

    fn predict(&self, task: &Task) -> Result<Option<Vec<usize>>> {
        Ok(baseline_lr(task, self.c))
    }
}

pub struct KnnBaseline {
    pub k: usize,
}

impl TaskModel for KnnBaseline {
    fn name(&self) -> &str {
        "KNN"
    }

    fn predict(&self, task: &Task) -> Result<Option<Vec<usize>>> {
        Ok(baseline_knn(task, self.k))
    }
}

/// A trained model, optionally with embedding adaptation before prediction.
pub struct FlatPredictor<'a> {
    pub model: &'a FlatModel,
    pub adapt: Option<AdaptConfig>,
}

impl TaskModel for FlatPredictor<'_> {
    fn name(&self) -> &str {
        if self.adapt.is_some() {
            "FLATadapt"
        } else {
            "FLAT"
        }
    }

    fn predict(&self, task: &Task) -> Result<Option<Vec<usize>>> {
        let prediction = match &self.adapt {
            Some(cfg) => flatadapt_infer(task, self.model, cfg)?.prediction,
            None => infer(task, self.model)?,
        };
        Ok(Some(prediction.classes))
    }
}

/// Fraction of target rows predicted correctly.
pub fn accuracy(predicted: &[usize], labels: &[usize]) -> f64 {
    let hits = predicted.iter().zip(labels).filter(|(a, b)| a == b).count();
    hits as f64 / labels.len().max(1) as f64
}

/// Accuracy of one model on one task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskResult {
    pub model: String,
    pub dataset: String,
    pub n_meta: usize,
    pub task_id: usize,
    pub accuracy: f64,
}

/// Runs each group of models on the same tasks. Models within a group are
/// averaged per task (used for several seeds of one trained model); abstentions are skipped.
pub fn evaluate_tasks(groups: &[(String, Vec<&dyn TaskModel>)], tasks: &[Task], n_meta: usize) -> Result<Vec<TaskResult>> {
    let mut out = Vec::new();
    for (name, models) in groups {
        for (task_id, task) in tasks.iter().enumerate() {
            let labels = task
                .target_y
                .as_ref()
                .ok_or_else(|| FlatError::Eval(format!("task {task_id} of {} has no target labels", task.source_name)))?;
            let mut accs = Vec::with_capacity(models.len());
            for m in models {
                if let Some(pred) = m.predict(task)? {
                    accs.push(accuracy(&pred, labels));
                }
            }
            if !accs.is_empty() {
                out.push(TaskResult {
                    model: name.clone(),
                    dataset: task.source_name.clone(),
                    n_meta,
                    task_id,
                    accuracy: accs.iter().sum::<f64>() / accs.len() as f64,
                });
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub model: String,
    pub dataset: String,
    pub n_meta: usize,
    pub accuracy: f64,
    /// Population standard deviation of per-task accuracy over `sqrt(n_tasks)`.
    pub stderr: f64,
    pub n_tasks: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSummary {
    /// Mean over datasets of the per-dataset mean accuracy.
    pub mean_accuracy: f64,
    /// Median over datasets of the model's rank (1 = best, ties averaged).
    pub median_rank: f64,
    pub n_datasets: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rows: Vec<ReportRow>,
    pub summary: BTreeMap<String, ModelSummary>,
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Ranks (1 = highest) with tied values sharing the mean of their positions.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &o in &order[i..=j] {
            ranks[o] = r;
        }
        i = j + 1;
    }
    ranks
}

impl EvalReport {
    /// Aggregates task results; the outcome does not depend on their order.
    pub fn from_results(results: &[TaskResult]) -> Self {
        let mut groups: BTreeMap<(String, String, usize), Vec<f64>> = BTreeMap::new();
        for r in results {
            groups.entry((r.model.clone(), r.dataset.clone(), r.n_meta)).or_default().push(r.accuracy);
        }
        let rows: Vec<ReportRow> = groups
            .into_iter()
            .map(|((model, dataset, n_meta), mut accs)| {
                // Sorting makes the floating-point sums independent of input order.
                accs.sort_by(f64::total_cmp);
                let n = accs.len() as f64;
                let mean = accs.iter().sum::<f64>() / n;
                let var = accs.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / n;
                ReportRow { model, dataset, n_meta, accuracy: mean, stderr: var.sqrt() / n.sqrt(), n_tasks: accs.len() }
            })
            .collect();

        let mut per_model_acc: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        let mut per_model_rank: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        let mut by_dataset: BTreeMap<(String, usize), Vec<&ReportRow>> = BTreeMap::new();
        for row in &rows {
            per_model_acc.entry(row.model.clone()).or_default().push(row.accuracy);
            by_dataset.entry((row.dataset.clone(), row.n_meta)).or_default().push(row);
        }
        for group in by_dataset.values() {
            let ranks = average_ranks(&group.iter().map(|r| r.accuracy).collect::<Vec<_>>());
            for (row, rank) in group.iter().zip(ranks) {
                per_model_rank.entry(row.model.clone()).or_default().push(rank);
            }
        }
        let summary = per_model_acc
            .into_iter()
            .map(|(model, accs)| {
                let mut ranks = per_model_rank.remove(&model).unwrap_or_default();
                let s = ModelSummary {
                    mean_accuracy: accs.iter().sum::<f64>() / accs.len() as f64,
                    median_rank: median(&mut ranks),
                    n_datasets: accs.len(),
                };
                (model, s)
            })
            .collect();
        Self { rows, summary }
    }

    pub fn row(&self, model: &str, dataset: &str, n_meta: usize) -> Option<&ReportRow> {
        self.rows.iter().find(|r| r.model == model && r.dataset == dataset && r.n_meta == n_meta)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let io = |e: &dyn std::fmt::Display| FlatError::Io { path: path.display().to_string(), reason: e.to_string() };
        let mut w = csv::Writer::from_path(path).map_err(|e| io(&e))?;
        for row in &self.rows {
            w.serialize(row).map_err(|e| io(&e))?;
        }
        w.flush().map_err(|e| io(&e))
    }

    pub fn read_csv(path: &Path) -> Result<Vec<ReportRow>> {
        let io = |e: &dyn std::fmt::Display| FlatError::Io { path: path.display().to_string(), reason: e.to_string() };
        let mut r = csv::Reader::from_path(path).map_err(|e| io(&e))?;
        r.deserialize().map(|row| row.map_err(|e| io(&e))).collect()
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| FlatError::Eval(e.to_string()))?;
        std::fs::write(path, text).map_err(|e| FlatError::Io { path: path.display().to_string(), reason: e.to_string() })
    }
}

/// Models trained for one fold, with the datasets they were trained on.
pub struct FoldModels {
    pub fold: usize,
    pub train_names: Vec<String>,
    /// One model per seed.
    pub models: Vec<FlatModel>,
}

#[derive(Clone, Debug)]
pub struct FoldEvalConfig {
    pub n_meta: usize,
    pub n_target: usize,
    pub tasks_per_dataset: usize,
    pub seed: u64,
    /// Adaptation settings for an extra FLATadapt entry.
    pub adapt: Option<AdaptConfig>,
    pub include_flat: bool,
    pub include_baselines: bool,
    pub knn_k: usize,
    pub lr_c: f64,
}

impl Default for FoldEvalConfig {
    fn default() -> Self {
        Self {
            n_meta: 5,
            n_target: 10,
            tasks_per_dataset: 200,
            seed: 0,
            adapt: None,
            include_flat: true,
            include_baselines: true,
            knn_k: DEFAULT_KNN_K,
            lr_c: DEFAULT_LR_C,
        }
    }
}

/// Evaluates every model on the identical fixed tasks of each test dataset, fold by fold.
pub fn run_fold_eval(
    datasets: &[DatasetTable],
    plan: &FoldPlan,
    folds: &[FoldModels],
    config: &FoldEvalConfig,
) -> Result<EvalReport> {
    if folds.len() != plan.n_folds {
        return Err(FlatError::Eval(format!("{} folds planned but models for {} supplied", plan.n_folds, folds.len())));
    }
    let mut results = Vec::new();
    let lr = LogisticBaseline { c: config.lr_c };
    let knn = KnnBaseline { k: config.knn_k };
    for fm in folds {
        if fm.fold >= plan.n_folds || fm.models.is_empty() {
            return Err(FlatError::Eval(format!("fold {} has no usable models", fm.fold)));
        }
        let test: BTreeSet<&str> = plan.test_names(fm.fold).into_iter().collect();
        if let Some(leak) = fm.train_names.iter().find(|n| test.contains(n.as_str())) {
            return Err(FlatError::Eval(format!("dataset {leak} is both trained on and tested in fold {}", fm.fold)));
        }
        let flat: Vec<FlatPredictor> = fm.models.iter().map(|m| FlatPredictor { model: m, adapt: None }).collect();
        let adapted: Vec<FlatPredictor> = match &config.adapt {
            Some(a) => fm.models.iter().map(|m| FlatPredictor { model: m, adapt: Some(a.clone()) }).collect(),
            None => Vec::new(),
        };
        let mut groups: Vec<(String, Vec<&dyn TaskModel>)> = Vec::new();
        if config.include_flat {
            groups.push(("FLAT".into(), flat.iter().map(|m| m as &dyn TaskModel).collect()));
        }
        if !adapted.is_empty() {
            groups.push(("FLATadapt".into(), adapted.iter().map(|m| m as &dyn TaskModel).collect()));
        }
        if config.include_baselines {
            groups.push(("LR".into(), vec![&lr]));
            groups.push(("KNN".into(), vec![&knn]));
        }
        for d in datasets.iter().filter(|d| test.contains(d.name())) {
            let tasks = fixed_eval_tasks(d, config.n_meta, config.n_target, config.tasks_per_dataset, config.seed);
            results.extend(evaluate_tasks(&groups, &tasks, config.n_meta)?);
        }
    }
    Ok(EvalReport::from_results(&results))
}
