use std::path::Path;
use std::time::Instant;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::Task;
use crate::error::{FlatError, Result};
use crate::model::FlatModel;
use crate::numkernel::Tensor;
use crate::rng::stream;
use crate::trainer::{flatadapt_infer, infer, AdaptConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimingRow {
    pub model: String,
    pub n_cols: usize,
    pub seconds: f64,
}

/// Gaussian tasks labeled by `x_0 > x_1`, generated up front so timing excludes data work.
pub fn random_timing_tasks(n_tasks: usize, n_meta: usize, n_target: usize, n_cols: usize, seed: u64) -> Vec<Task> {
    let mut rng = stream(seed, &format!("timing/{n_cols}"));
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut draw = |n: usize| {
        let x: Vec<f64> = (0..n * n_cols).map(|_| normal.sample(&mut rng)).collect();
        let y: Vec<usize> = (0..n).map(|i| (x[i * n_cols] > x[i * n_cols + 1]) as usize).collect();
        (Tensor::matrix(n, n_cols, x), y)
    };
    (0..n_tasks)
        .map(|_| {
            let (mx, my) = draw(n_meta);
            let (tx, ty) = draw(n_target);
            Task::from_splits("timing", mx, my, tx, Some(ty), 2)
        })
        .collect()
}

/// Wall-clock seconds to run inference on every task.
pub fn time_inference(model: &FlatModel, adapt: Option<&AdaptConfig>, tasks: &[Task]) -> Result<f64> {
    let start = Instant::now();
    for task in tasks {
        let pred = match adapt {
            Some(cfg) => flatadapt_infer(task, model, cfg)?.prediction,
            None => infer(task, model)?,
        };
        std::hint::black_box(pred);
    }
    Ok(start.elapsed().as_secs_f64())
}

/// Inference time per column count, plain and optionally adapted.
pub fn timing_sweep(
    model: &FlatModel,
    adapt: Option<&AdaptConfig>,
    col_counts: &[usize],
    n_tasks: usize,
    n_meta: usize,
    n_target: usize,
    seed: u64,
) -> Result<Vec<TimingRow>> {
    let mut rows = Vec::new();
    for &c in col_counts {
        if c < 2 {
            return Err(FlatError::TooFewColumns(c));
        }
        let tasks = random_timing_tasks(n_tasks, n_meta, n_target, c, seed);
        rows.push(TimingRow { model: "FLAT".into(), n_cols: c, seconds: time_inference(model, None, &tasks)? });
        if let Some(a) = adapt {
            rows.push(TimingRow { model: "FLATadapt".into(), n_cols: c, seconds: time_inference(model, Some(a), &tasks)? });
        }
    }
    Ok(rows)
}

pub fn write_timing_csv(rows: &[TimingRow], path: &Path) -> Result<()> {
    let io = |e: &dyn std::fmt::Display| FlatError::Io { path: path.display().to_string(), reason: e.to_string() };
    let mut w = csv::Writer::from_path(path).map_err(|e| io(&e))?;
    for r in rows {
        w.serialize(r).map_err(|e| io(&e))?;
    }
    w.flush().map_err(|e| io(&e))
}
