use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use flat_core::data::{binarize_one_vs_all, fixed_eval_tasks, load_dir, make_folds, DatasetTable, FoldPlan, Task};
use flat_core::eval::{
    export_attention, export_embeddings, run_fold_eval, timing_sweep, write_attention_csv, write_embeddings_csv,
    write_timing_csv, FoldEvalConfig, FoldModels,
};
use flat_core::hypernet::ThetaInit;
use flat_core::model::{FlatModel, ModelConfig};
use flat_core::rng::stream;
use flat_core::synth::{perturbed_grid, synth_corpus, write_csv, CorpusConfig};
use flat_core::trainer::{load_checkpoint, save_checkpoint, StepRecord, Trainer};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;

const MANIFEST: &str = "runs.json";

/// Written by `train`: which checkpoint belongs to which fold and seed.
#[derive(Debug, Serialize, Deserialize)]
pub struct RunManifest {
    /// Absent when every dataset was used for training.
    pub plan: Option<FoldPlan>,
    pub runs: Vec<RunEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct RunEntry {
    pub fold: usize,
    pub seed: u64,
    /// Relative to the checkpoint directory.
    pub checkpoint: String,
    pub train_names: Vec<String>,
}

fn create_out(cfg: &RunConfig) -> Result<()> {
    std::fs::create_dir_all(&cfg.out).with_context(|| format!("cannot create output directory {}", cfg.out.display()))
}

fn load_datasets(cfg: &RunConfig) -> Result<Vec<DatasetTable>> {
    let dir = cfg.data_dir()?;
    let tables = load_dir(dir, cfg.label_column()?, cfg.has_header)?;
    if tables.is_empty() {
        bail!("no CSV files found in {}", dir.display());
    }
    Ok(tables
        .into_iter()
        .map(|t| if cfg.n_classes == 2 && t.n_classes() > 2 { binarize_one_vs_all(&t) } else { t })
        .collect())
}

fn model_config(cfg: &RunConfig) -> ModelConfig {
    ModelConfig::with_classes(cfg.n_classes)
}

pub fn train(cfg: &RunConfig) -> Result<()> {
    let datasets = load_datasets(cfg)?;
    create_out(cfg)?;
    let theta = match &cfg.theta_from {
        Some(path) => ThetaInit::Recorded(load_checkpoint(path)?.theta()),
        None => ThetaInit::Fixed(cfg.theta_init),
    };
    let names: Vec<String> = datasets.iter().map(|d| d.name().to_string()).collect();
    let plan = if cfg.folds >= 2 { Some(make_folds(&names, cfg.folds, &mut stream(cfg.seeds[0], "folds"))?) } else { None };
    let n_folds = plan.as_ref().map_or(1, |p| p.n_folds);
    let mut runs = Vec::new();
    for fold in 0..n_folds {
        let train_names: Vec<String> = match &plan {
            Some(p) => p.train_names(fold).into_iter().map(String::from).collect(),
            None => names.clone(),
        };
        let train_set: Vec<DatasetTable> = datasets.iter().filter(|d| train_names.iter().any(|n| n == d.name())).cloned().collect();
        for &seed in &cfg.seeds {
            let stem = format!("fold{fold}-seed{seed}");
            let log_path = cfg.out.join(format!("{stem}.log.jsonl"));
            let mut log = BufWriter::new(File::create(&log_path).with_context(|| format!("cannot create {}", log_path.display()))?);
            let mut trainer = Trainer::new(model_config(cfg), cfg.train_config(seed, theta.clone()))?;
            let mut write_err = None;
            trainer.run(&train_set, &mut |r: &StepRecord| {
                log::info!("{stem} step {} loss {:.4}", r.step, r.loss);
                if let Err(e) = serde_json::to_writer(&mut log, r).map_err(anyhow::Error::from).and_then(|_| Ok(writeln!(log)?)) {
                    write_err.get_or_insert(e);
                }
            })?;
            if let Some(e) = write_err {
                return Err(e.context(format!("cannot write {}", log_path.display())));
            }
            log.flush()?;
            let checkpoint = format!("{stem}.ckpt");
            save_checkpoint(&trainer.checkpoint(), &cfg.out.join(&checkpoint))?;
            runs.push(RunEntry { fold, seed, checkpoint, train_names: train_names.clone() });
        }
    }
    let manifest = RunManifest { plan, runs };
    let path = cfg.out.join(MANIFEST);
    std::fs::write(&path, serde_json::to_string_pretty(&manifest)?).with_context(|| format!("cannot write {}", path.display()))?;
    println!("trained {} model(s); manifest at {}", manifest.runs.len(), path.display());
    Ok(())
}

fn read_manifest(cfg: &RunConfig) -> Result<RunManifest> {
    let path = cfg.checkpoint_dir().join(MANIFEST);
    if !path.exists() {
        bail!("checkpoint manifest {} not found; run `flat train` first", path.display());
    }
    let text = std::fs::read_to_string(&path).with_context(|| format!("cannot read {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("malformed manifest {}", path.display()))
}

fn load_model(cfg: &RunConfig, entry: &RunEntry) -> Result<FlatModel> {
    let path: PathBuf = cfg.checkpoint_dir().join(&entry.checkpoint);
    if !path.exists() {
        bail!("checkpoint {} not found", path.display());
    }
    let ckpt = load_checkpoint(&path)?;
    Ok(FlatModel { config: ckpt.model_config, params: ckpt.params })
}

fn evaluate(cfg: &RunConfig, adapt: bool) -> Result<()> {
    let manifest = read_manifest(cfg)?;
    let plan = manifest.plan.as_ref().context("these models were trained on every dataset; evaluation needs folds >= 2")?;
    let datasets = load_datasets(cfg)?;
    if let Some(missing) = plan.assignments.keys().find(|n| !datasets.iter().any(|d| d.name() == n.as_str())) {
        bail!("dataset {missing} from the fold plan is not in the data directory");
    }
    let mut folds = Vec::new();
    for fold in 0..plan.n_folds {
        let entries: Vec<&RunEntry> = manifest.runs.iter().filter(|r| r.fold == fold).collect();
        let Some(first) = entries.first() else { bail!("no checkpoint for fold {fold}") };
        let models = entries.iter().map(|e| load_model(cfg, e)).collect::<Result<Vec<_>>>()?;
        folds.push(FoldModels { fold, train_names: first.train_names.clone(), models });
    }
    let config = FoldEvalConfig {
        n_meta: cfg.n_meta,
        n_target: cfg.n_target,
        tasks_per_dataset: cfg.tasks_per_dataset,
        seed: cfg.seeds[0],
        adapt: adapt.then(|| cfg.adapt_config()),
        include_flat: !adapt,
        include_baselines: true,
        knn_k: cfg.knn_k,
        lr_c: cfg.lr_c,
    };
    let report = run_fold_eval(&datasets, plan, &folds, &config)?;
    create_out(cfg)?;
    let stem = if adapt { "adapt-eval" } else { "eval" };
    report.write_csv(&cfg.out.join(format!("{stem}-report.csv")))?;
    report.write_json(&cfg.out.join(format!("{stem}-summary.json")))?;
    for (model, s) in &report.summary {
        println!("{model}: mean accuracy {:.4}, median rank {:.2} over {} datasets", s.mean_accuracy, s.median_rank, s.n_datasets);
    }
    Ok(())
}

pub fn eval(cfg: &RunConfig) -> Result<()> {
    evaluate(cfg, false)
}

pub fn adapt_eval(cfg: &RunConfig) -> Result<()> {
    evaluate(cfg, true)
}

/// The first seed's model of every fold, paired with that fold's test tasks.
fn export_tasks(cfg: &RunConfig) -> Result<Vec<(FlatModel, Vec<Task>)>> {
    let manifest = read_manifest(cfg)?;
    let datasets = load_datasets(cfg)?;
    let n_folds = manifest.plan.as_ref().map_or(1, |p| p.n_folds);
    let mut out = Vec::new();
    for fold in 0..n_folds {
        let Some(entry) = manifest.runs.iter().find(|r| r.fold == fold) else { bail!("no checkpoint for fold {fold}") };
        let model = load_model(cfg, entry)?;
        let tasks: Vec<Task> = datasets
            .iter()
            .filter(|d| manifest.plan.as_ref().map_or(true, |p| p.fold_of(d.name()) == Some(fold)))
            .flat_map(|d| fixed_eval_tasks(d, cfg.n_meta, cfg.n_target, cfg.tasks_per_dataset, cfg.seeds[0]))
            .collect();
        out.push((model, tasks));
    }
    Ok(out)
}

pub fn export_embeddings_cmd(cfg: &RunConfig) -> Result<()> {
    let mut rows = Vec::new();
    for (model, tasks) in export_tasks(cfg)? {
        let offset = rows.len();
        rows.extend(export_embeddings(&model, &tasks)?.into_iter().map(|mut r| {
            r.task_id += offset;
            r
        }));
    }
    create_out(cfg)?;
    let path = cfg.out.join("embeddings.csv");
    write_embeddings_csv(&rows, &path)?;
    println!("wrote {} embeddings to {}", rows.len(), path.display());
    Ok(())
}

pub fn export_attention_cmd(cfg: &RunConfig) -> Result<()> {
    let mut rows = Vec::new();
    let mut offset = 0;
    for (model, tasks) in export_tasks(cfg)? {
        rows.extend(export_attention(&model, &tasks)?.into_iter().map(|mut r| {
            r.task_id += offset;
            r
        }));
        offset += tasks.len();
    }
    create_out(cfg)?;
    let path = cfg.out.join("attention.csv");
    write_attention_csv(&rows, &path)?;
    println!("wrote attention maps of {offset} tasks to {}", path.display());
    Ok(())
}

pub fn time(cfg: &RunConfig) -> Result<()> {
    let manifest = read_manifest(cfg)?;
    let entry = manifest.runs.first().context("manifest lists no checkpoints")?;
    let model = load_model(cfg, entry)?;
    let adapt = cfg.adapt_config();
    let rows = timing_sweep(
        &model,
        cfg.time_adapt.then_some(&adapt),
        &cfg.time_cols,
        cfg.time_tasks,
        cfg.time_n_meta,
        cfg.time_n_target,
        cfg.seeds[0],
    )?;
    create_out(cfg)?;
    let path = cfg.out.join("timing.csv");
    write_timing_csv(&rows, &path)?;
    for r in &rows {
        println!("{} {} columns: {:.3}s", r.model, r.n_cols, r.seconds);
    }
    Ok(())
}

pub fn synth(cfg: &RunConfig) -> Result<()> {
    let corpus = CorpusConfig {
        n_datasets: cfg.synth_datasets,
        min_rows: cfg.synth_min_rows,
        max_rows: cfg.synth_max_rows,
        min_cols: cfg.synth_min_cols,
        max_cols: cfg.synth_max_cols,
        families: cfg.synth_families.clone(),
        seed: cfg.seeds[0],
    };
    let sets = synth_corpus("synth", &corpus)?;
    create_out(cfg)?;
    for s in &sets {
        write_csv(&s.table, &cfg.out.join(format!("{}.csv", s.table.name())))?;
    }
    if cfg.synth_grid {
        let dir = cfg.out.join("grid");
        std::fs::create_dir_all(&dir).with_context(|| format!("cannot create {}", dir.display()))?;
        write_grid(cfg.seeds[0], &dir.join("grid.csv"))?;
    }
    println!("wrote {} datasets to {}", sets.len(), cfg.out.display());
    Ok(())
}

/// The 16-point perturbed grid labeled by `x_1 > x_2`.
fn write_grid(seed: u64, path: &Path) -> Result<()> {
    let (x, y) = perturbed_grid(&mut stream(seed, "grid"));
    let table = DatasetTable::new("grid", x, y)?;
    write_csv(&table, path)?;
    Ok(())
}
