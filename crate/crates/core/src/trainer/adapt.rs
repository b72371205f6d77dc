use serde::{Deserialize, Serialize};

use super::Prediction;
use crate::data::Task;
use crate::encoder::{ColumnEmbeddings, DatasetEmbedding};
use crate::error::{FlatError, Result};
use crate::gatnet;
use crate::hypernet;
use crate::model::{cross_entropy, FlatModel};
use crate::numkernel::{adam_step, OptimizerState, Tape, Tensor};

const ADAM_EPS: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdaptConfig {
    pub steps: usize,
    /// Learning rate for the column embeddings.
    pub lr_columns: f64,
    /// Learning rate for the dataset embedding.
    pub lr_dataset: f64,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        Self { steps: 5, lr_columns: 1e-3, lr_dataset: 7.5e-2 }
    }
}

impl AdaptConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("lr_columns", self.lr_columns), ("lr_dataset", self.lr_dataset)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(FlatError::Config(format!("{name} must be positive, got {v}")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdaptOutcome {
    pub prediction: Prediction,
    pub initial: (DatasetEmbedding, ColumnEmbeddings),
    pub adapted: (DatasetEmbedding, ColumnEmbeddings),
    pub meta_loss_before: f64,
    pub meta_loss_after: f64,
}

/// Meta-split loss at the given embeddings, with gradients for both.
fn meta_loss(model: &FlatModel, task: &Task, e: &Tensor, p: &Tensor) -> Result<(f64, Tensor, Tensor)> {
    let mut tape = Tape::new();
    let bound = model.params.bind(&mut tape, false);
    let e_id = tape.param(e.clone());
    let p_id = tape.param(p.clone());
    let gw = hypernet::generate_weights(&mut tape, e_id, &bound.decoder, &model.config)?;
    let probs = gatnet::predict(&mut tape, &task.meta_x, p_id, &gw, &model.config)?;
    let loss = cross_entropy(&mut tape, probs, &task.meta_y)?;
    tape.backward(loss)?;
    let ge = tape.grad(e_id).unwrap_or_else(|| Tensor::zeros(e.shape()));
    let gp = tape.grad(p_id).unwrap_or_else(|| Tensor::zeros(p.shape()));
    Ok((tape.value(loss).item(), ge, gp))
}

/// Adapts the dataset and column embeddings to the meta split with Adam while
/// every model weight stays fixed, then predicts the target rows.
pub fn flatadapt_infer(task: &Task, model: &FlatModel, adapt: &AdaptConfig) -> Result<AdaptOutcome> {
    adapt.validate()?;
    let initial = model.embed(task)?;
    let mut e = initial.0 .0.clone();
    let mut p = initial.1 .0.clone();
    let mut opt_e = OptimizerState::new([e.shape()], adapt.lr_dataset, ADAM_EPS, 0.0);
    let mut opt_p = OptimizerState::new([p.shape()], adapt.lr_columns, ADAM_EPS, 0.0);
    let mut before = None;
    for _ in 0..adapt.steps {
        let (loss, ge, gp) = meta_loss(model, task, &e, &p)?;
        before.get_or_insert(loss);
        adam_step([&mut e], &[ge], &mut opt_e)?;
        adam_step([&mut p], &[gp], &mut opt_p)?;
    }
    let (after, _, _) = meta_loss(model, task, &e, &p)?;
    let adapted = (DatasetEmbedding(e), ColumnEmbeddings(p));
    let probs = model.predict_from_embeddings(&task.target_x, &adapted.0, &adapted.1)?;
    Ok(AdaptOutcome {
        prediction: Prediction::from_probs(probs),
        initial,
        adapted,
        meta_loss_before: before.unwrap_or(after),
        meta_loss_after: after,
    })
}
