//! Episodic training, checkpoints, inference and test-time embedding adaptation.

mod adapt;
mod checkpoint;

pub use adapt::{flatadapt_infer, AdaptConfig, AdaptOutcome};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_VERSION};

use std::time::Instant;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{sample_task, DatasetTable, Task};
use crate::error::{FlatError, Result};
use crate::hypernet::ThetaInit;
use crate::model::{self, argmax_rows, FlatModel, ModelConfig};
use crate::numkernel::{adamw_step, OptimizerState, StepOutcome, Tape, Tensor};
use crate::rng::{stream, FlatRng};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub lr: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub n_meta: usize,
    pub n_target: usize,
    pub column_subsample: bool,
    pub seed: u64,
    pub theta_init: ThetaInit,
    /// Emit a log record every this many steps (0 disables).
    pub log_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 62_000,
            batch_size: 3,
            lr: 5e-4,
            eps: 3e-4,
            weight_decay: 1e-4,
            n_meta: 10,
            n_target: 10,
            column_subsample: true,
            seed: 0,
            theta_init: ThetaInit::default(),
            log_every: 100,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [("lr", self.lr), ("eps", self.eps)];
        if let Some((name, v)) = positive.iter().find(|(_, v)| !(*v > 0.0 && v.is_finite())) {
            return Err(FlatError::Config(format!("{name} must be positive, got {v}")));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(FlatError::Config(format!("weight_decay must be non-negative, got {}", self.weight_decay)));
        }
        if self.batch_size == 0 || self.n_meta == 0 || self.n_target == 0 {
            return Err(FlatError::Config("batch_size, n_meta and n_target must be at least 1".into()));
        }
        Ok(())
    }
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub loss: f64,
    pub wall_secs: f64,
    pub skipped: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepResult {
    /// Batch-mean loss before the update.
    pub loss: f64,
    pub outcome: StepOutcome,
}

/// Loss and parameter gradients of one task, in [`crate::model::ModelParams::named`] order.
pub fn task_gradients(model: &FlatModel, task: &Task) -> Result<(f64, Vec<Tensor>)> {
    let mut tape = Tape::new();
    let bound = model.params.bind(&mut tape, true);
    let loss = model::task_loss(&mut tape, &bound, &model.config, task)?;
    tape.backward(loss)?;
    let grads = bound
        .tensors()
        .into_iter()
        .zip(model.params.tensors())
        .map(|(&id, p)| tape.take_grad(id).unwrap_or_else(|| Tensor::zeros(p.shape())))
        .collect();
    Ok((tape.value(loss).item(), grads))
}

/// Averages per-task gradients in batch order and applies one AdamW update.
pub fn train_step(tasks: &[Task], model: &mut FlatModel, optimizer: &mut OptimizerState) -> Result<StepResult> {
    if tasks.is_empty() {
        return Err(FlatError::Config("training batch is empty".into()));
    }
    let mut total_loss = 0.0;
    let mut sum: Option<Vec<Tensor>> = None;
    for task in tasks {
        let (loss, grads) = task_gradients(model, task)?;
        total_loss += loss;
        match &mut sum {
            None => sum = Some(grads),
            Some(acc) => {
                for (a, g) in acc.iter_mut().zip(&grads) {
                    a.data_mut().iter_mut().zip(g.data()).for_each(|(x, y)| *x += y);
                }
            }
        }
    }
    let n = tasks.len() as f64;
    let loss = total_loss / n;
    if !loss.is_finite() {
        log::warn!("non-finite training loss at optimizer step {}; update skipped", optimizer.step + 1);
        return Ok(StepResult { loss, outcome: StepOutcome::Skipped });
    }
    let mut grads = sum.expect("nonempty batch");
    grads.iter_mut().for_each(|g| g.data_mut().iter_mut().for_each(|v| *v /= n));
    let outcome = adamw_step(model.params.tensors_mut(), &grads, optimizer)?;
    Ok(StepResult { loss, outcome })
}

/// Resumable training state.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub model: FlatModel,
    pub optimizer: OptimizerState,
    pub config: TrainConfig,
    pub rng: FlatRng,
    pub step: u64,
}

impl Trainer {
    pub fn new(model_config: ModelConfig, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let model = FlatModel::new(model_config, config.theta_init.clone(), &mut stream(config.seed, "init"))?;
        let optimizer = OptimizerState::new(
            model.params.tensors().into_iter().map(Tensor::shape),
            config.lr,
            config.eps,
            config.weight_decay,
        );
        let rng = stream(config.seed, "train");
        Ok(Self { model, optimizer, config, rng, step: 0 })
    }

    pub fn from_checkpoint(ckpt: Checkpoint) -> Result<Self> {
        let config = ckpt
            .train_config
            .ok_or_else(|| FlatError::Checkpoint("checkpoint has no training configuration".into()))?;
        let rng = ckpt.rng.map(|r| r.restore()).unwrap_or_else(|| stream(config.seed, "train"));
        let model = FlatModel { config: ckpt.model_config, params: ckpt.params };
        let optimizer = match ckpt.optimizer {
            Some(o) => o,
            None => OptimizerState::new(
                model.params.tensors().into_iter().map(Tensor::shape),
                config.lr,
                config.eps,
                config.weight_decay,
            ),
        };
        Ok(Self { model, optimizer, config, rng, step: ckpt.step })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            model_config: self.model.config.clone(),
            train_config: Some(self.config.clone()),
            params: self.model.params.clone(),
            optimizer: Some(self.optimizer.clone()),
            rng: Some(crate::rng::RngState::capture(&self.rng)),
            step: self.step,
        }
    }

    fn usable<'a>(&self, datasets: &'a [DatasetTable]) -> Result<Vec<&'a DatasetTable>> {
        let usable: Vec<&DatasetTable> = datasets
            .iter()
            .filter(|d| d.n_cols() >= 2 && d.n_classes() <= self.model.config.n_classes)
            .filter(|d| d.supports(self.config.n_meta, self.config.n_target))
            .collect();
        if usable.is_empty() {
            return Err(FlatError::NoUsableDatasets { n_meta: self.config.n_meta, n_target: self.config.n_target });
        }
        Ok(usable)
    }

    /// Draws one batch: a uniformly chosen dataset per task.
    pub fn sample_batch(&mut self, usable: &[&DatasetTable]) -> Result<Vec<Task>> {
        let mut batch = Vec::with_capacity(self.config.batch_size);
        for _ in 0..self.config.batch_size {
            let d = usable[self.rng.gen_range(0..usable.len())];
            batch.push(sample_task(d, self.config.n_meta, self.config.n_target, &mut self.rng, self.config.column_subsample)?);
        }
        Ok(batch)
    }

    /// Trains until `config.steps`, reporting a record every `log_every` steps.
    pub fn run(&mut self, datasets: &[DatasetTable], log: &mut dyn FnMut(&StepRecord)) -> Result<()> {
        self.run_until(datasets, self.config.steps, log)
    }

    pub fn run_until(&mut self, datasets: &[DatasetTable], until: u64, log: &mut dyn FnMut(&StepRecord)) -> Result<()> {
        let usable = self.usable(datasets)?;
        let start = Instant::now();
        while self.step < until {
            let batch = self.sample_batch(&usable)?;
            let result = train_step(&batch, &mut self.model, &mut self.optimizer)?;
            self.step += 1;
            let every = self.config.log_every;
            if every > 0 && (self.step % every == 0 || self.step == until) {
                log(&StepRecord {
                    step: self.step,
                    loss: result.loss,
                    wall_secs: start.elapsed().as_secs_f64(),
                    skipped: result.outcome == StepOutcome::Skipped,
                });
            }
        }
        Ok(())
    }
}

/// Trains a fresh model on `datasets` and returns the final checkpoint.
pub fn train_loop(
    datasets: &[DatasetTable],
    model_config: ModelConfig,
    config: TrainConfig,
    log: &mut dyn FnMut(&StepRecord),
) -> Result<Checkpoint> {
    let mut trainer = Trainer::new(model_config, config)?;
    trainer.usable(datasets)?;
    trainer.run(datasets, log)?;
    Ok(trainer.checkpoint())
}

/// Predicted classes and probabilities for a task's target rows.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub classes: Vec<usize>,
    pub probs: Tensor,
}

impl Prediction {
    pub fn from_probs(probs: Tensor) -> Self {
        Self { classes: argmax_rows(&probs), probs }
    }

    pub fn accuracy(&self, labels: &[usize]) -> f64 {
        let hits = self.classes.iter().zip(labels).filter(|(a, b)| a == b).count();
        hits as f64 / labels.len().max(1) as f64
    }
}

/// Plain forward pass with the trained weights.
pub fn infer(task: &Task, model: &FlatModel) -> Result<Prediction> {
    Ok(Prediction::from_probs(model.predict_proba(task)?))
}
