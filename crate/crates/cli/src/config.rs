//! Run configuration: a flat JSON object whose keys are mirrored one-to-one
//! by command-line flags. Flags win over file values.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::Args;
use flat_core::data::LabelColumn;
use flat_core::eval::{DEFAULT_KNN_K, DEFAULT_LR_C};
use flat_core::hypernet::ThetaInit;
use flat_core::synth::RuleFamily;
use flat_core::trainer::{AdaptConfig, TrainConfig};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data_dir: Option<PathBuf>,
    pub out: PathBuf,
    /// Defaults to the output directory.
    pub checkpoint_dir: Option<PathBuf>,
    pub folds: usize,
    pub seeds: Vec<u64>,
    /// Column index or `"last"`.
    pub label_col: String,
    pub has_header: bool,
    pub n_classes: usize,

    pub steps: u64,
    pub batch_size: usize,
    pub lr: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Rows per split during training; the evaluation sizes when unset.
    pub train_n_meta: Option<usize>,
    pub train_n_target: Option<usize>,
    pub column_subsample: bool,
    pub theta_init: f64,
    /// Checkpoint whose learned norms initialize training.
    pub theta_from: Option<PathBuf>,
    pub log_every: u64,

    pub adapt_steps: usize,
    pub adapt_lr_columns: f64,
    pub adapt_lr_dataset: f64,

    pub n_meta: usize,
    pub n_target: usize,
    pub tasks_per_dataset: usize,
    pub knn_k: usize,
    pub lr_c: f64,

    pub time_cols: Vec<usize>,
    pub time_tasks: usize,
    pub time_n_meta: usize,
    pub time_n_target: usize,
    pub time_adapt: bool,

    pub synth_datasets: usize,
    pub synth_min_rows: usize,
    pub synth_max_rows: usize,
    pub synth_min_cols: usize,
    pub synth_max_cols: usize,
    pub synth_families: Vec<RuleFamily>,
    /// Also write the 16-point grid task to `grid/grid.csv` under the output directory.
    pub synth_grid: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        let train = TrainConfig::default();
        let adapt = AdaptConfig::default();
        let corpus = flat_core::synth::CorpusConfig::default();
        Self {
            data_dir: None,
            out: PathBuf::from("flat-out"),
            checkpoint_dir: None,
            folds: 10,
            seeds: vec![0],
            label_col: "last".into(),
            has_header: true,
            n_classes: 2,
            steps: train.steps,
            batch_size: train.batch_size,
            lr: train.lr,
            eps: train.eps,
            weight_decay: train.weight_decay,
            train_n_meta: None,
            train_n_target: None,
            column_subsample: train.column_subsample,
            theta_init: 1.0,
            theta_from: None,
            log_every: train.log_every,
            adapt_steps: adapt.steps,
            adapt_lr_columns: adapt.lr_columns,
            adapt_lr_dataset: adapt.lr_dataset,
            n_meta: 10,
            n_target: 10,
            tasks_per_dataset: 200,
            knn_k: DEFAULT_KNN_K,
            lr_c: DEFAULT_LR_C,
            time_cols: vec![10, 20, 40, 80, 400],
            time_tasks: 200,
            time_n_meta: 15,
            time_n_target: 15,
            time_adapt: true,
            synth_datasets: corpus.n_datasets,
            synth_min_rows: corpus.min_rows,
            synth_max_rows: corpus.max_rows,
            synth_min_cols: corpus.min_cols,
            synth_max_cols: corpus.max_cols,
            synth_families: corpus.families,
            synth_grid: false,
        }
    }
}

/// One optional flag per configuration key.
#[derive(Args, Clone, Debug, Default, Serialize)]
pub struct Overrides {
    /// JSON file with flat configuration keys.
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,

    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub data_dir: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checkpoint_dir: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub folds: Option<usize>,
    /// Comma-separated list.
    #[arg(long, value_delimiter = ',')]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seeds: Option<Vec<u64>>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub label_col: Option<String>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub has_header: Option<bool>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n_classes: Option<usize>,

    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub steps: Option<u64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub batch_size: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lr: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eps: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub weight_decay: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub train_n_meta: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub train_n_target: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub column_subsample: Option<bool>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub theta_init: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub theta_from: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub log_every: Option<u64>,

    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub adapt_steps: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub adapt_lr_columns: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub adapt_lr_dataset: Option<f64>,

    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n_meta: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n_target: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tasks_per_dataset: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub knn_k: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lr_c: Option<f64>,

    #[arg(long, value_delimiter = ',')]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub time_cols: Option<Vec<usize>>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub time_tasks: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub time_n_meta: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub time_n_target: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub time_adapt: Option<bool>,

    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub synth_datasets: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub synth_min_rows: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub synth_max_rows: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub synth_min_cols: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub synth_max_cols: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub synth_families: Option<Vec<RuleFamily>>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub synth_grid: Option<bool>,
}

impl RunConfig {
    pub fn label_column(&self) -> Result<LabelColumn> {
        self.label_col.parse().map_err(anyhow::Error::msg)
    }

    pub fn checkpoint_dir(&self) -> &Path {
        self.checkpoint_dir.as_deref().unwrap_or(&self.out)
    }

    pub fn data_dir(&self) -> Result<&Path> {
        let dir = self.data_dir.as_deref().context("no data directory given (set data_dir or --data-dir)")?;
        if !dir.is_dir() {
            bail!("data directory {} does not exist", dir.display());
        }
        Ok(dir)
    }

    pub fn train_config(&self, seed: u64, theta_init: ThetaInit) -> TrainConfig {
        TrainConfig {
            steps: self.steps,
            batch_size: self.batch_size,
            lr: self.lr,
            eps: self.eps,
            weight_decay: self.weight_decay,
            n_meta: self.train_n_meta.unwrap_or(self.n_meta),
            n_target: self.train_n_target.unwrap_or(self.n_target),
            column_subsample: self.column_subsample,
            seed,
            theta_init,
            log_every: self.log_every,
        }
    }

    pub fn adapt_config(&self) -> AdaptConfig {
        AdaptConfig { steps: self.adapt_steps, lr_columns: self.adapt_lr_columns, lr_dataset: self.adapt_lr_dataset }
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            bail!("seeds must list at least one seed");
        }
        self.label_column()?;
        if self.n_classes < 2 {
            bail!("n_classes must be at least 2, got {}", self.n_classes);
        }
        if self.n_meta == 0 || self.n_target == 0 {
            bail!("n_meta and n_target must be positive");
        }
        self.train_config(self.seeds[0], ThetaInit::Fixed(self.theta_init)).validate()?;
        self.adapt_config().validate()?;
        Ok(())
    }
}

/// Merges the optional JSON file with flag overrides and validates the result.
/// Unknown keys and mistyped values are rejected.
pub fn parse_config(overrides: &Overrides) -> Result<RunConfig> {
    let mut merged: Map<String, Value> = match &overrides.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).with_context(|| format!("cannot read config {}", path.display()))?;
            if text.trim().is_empty() {
                Map::new()
            } else {
                match serde_json::from_str(&text).with_context(|| format!("config {} is not valid JSON", path.display()))? {
                    Value::Object(map) => map,
                    _ => bail!("config {} must hold a JSON object", path.display()),
                }
            }
        }
        None => Map::new(),
    };
    match serde_json::to_value(overrides)? {
        Value::Object(flags) => merged.extend(flags),
        _ => unreachable!("overrides serialize to an object"),
    }
    let config: RunConfig = serde_json::from_value(Value::Object(merged)).map_err(|e| anyhow::anyhow!("invalid configuration: {e}"))?;
    config.validate()?;
    Ok(config)
}
