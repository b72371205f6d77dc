//! CSV exports of dataset embeddings and first-layer attention maps.

use std::io::Write;
use std::path::Path;

use crate::data::Task;
use crate::encoder;
use crate::error::{FlatError, Result};
use crate::gatnet::{average_attention, predict_with_attention};
use crate::hypernet::generate_weights;
use crate::model::FlatModel;
use crate::numkernel::{Tape, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingRow {
    pub source_name: String,
    pub task_id: usize,
    pub embedding: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionRow {
    pub task_id: usize,
    pub node_j: usize,
    pub node_k: usize,
    pub alpha: f64,
}

pub fn export_embeddings(model: &FlatModel, tasks: &[Task]) -> Result<Vec<EmbeddingRow>> {
    tasks
        .iter()
        .enumerate()
        .map(|(task_id, task)| {
            let (e, _) = model.embed(task)?;
            Ok(EmbeddingRow { source_name: task.source_name.clone(), task_id, embedding: e.as_slice().to_vec() })
        })
        .collect()
}

/// First-layer attention of the network run on the task's own meta rows,
/// averaged over heads and rows: `[n_cols, n_cols]`.
pub fn meta_attention(model: &FlatModel, task: &Task) -> Result<Tensor> {
    model.embed(task)?;
    let mut tape = Tape::new();
    let bound = model.params.bind(&mut tape, false);
    let pooled = encoder::pool_rows(&mut tape, &task.meta_x, &task.meta_y, &bound.encoder, &model.config)?;
    let e = encoder::encode_dataset(&mut tape, pooled, &bound.encoder)?;
    let p = encoder::encode_columns(&mut tape, pooled, &bound.encoder)?;
    let gw = generate_weights(&mut tape, e, &bound.decoder, &model.config)?;
    let (_, attention) = predict_with_attention(&mut tape, &task.meta_x, p, &gw, &model.config)?;
    let first: Vec<Tensor> = attention[0].iter().map(|&a| tape.value(a).clone()).collect();
    Ok(average_attention(&first))
}

pub fn export_attention(model: &FlatModel, tasks: &[Task]) -> Result<Vec<AttentionRow>> {
    let mut rows = Vec::new();
    for (task_id, task) in tasks.iter().enumerate() {
        let map = meta_attention(model, task)?;
        let n = map.rows();
        for node_j in 0..n {
            for node_k in 0..n {
                rows.push(AttentionRow { task_id, node_j, node_k, alpha: map.at(node_j, node_k) });
            }
        }
    }
    Ok(rows)
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> FlatError {
    FlatError::Io { path: path.display().to_string(), reason: e.to_string() }
}

/// Header `source_name,task_id,e_0,..`; all rows must share one embedding width.
pub fn write_embeddings_csv(rows: &[EmbeddingRow], path: &Path) -> Result<()> {
    let width = rows.first().map_or(0, |r| r.embedding.len());
    if let Some(bad) = rows.iter().find(|r| r.embedding.len() != width) {
        return Err(FlatError::Dimension { what: "embedding width", expected: width, found: bad.embedding.len() });
    }
    let mut w = csv::Writer::from_path(path).map_err(|e| io_err(path, e))?;
    let mut header = vec!["source_name".to_string(), "task_id".to_string()];
    header.extend((0..width).map(|i| format!("e_{i}")));
    w.write_record(&header).map_err(|e| io_err(path, e))?;
    for r in rows {
        let mut record = vec![r.source_name.clone(), r.task_id.to_string()];
        record.extend(r.embedding.iter().map(|v| v.to_string()));
        w.write_record(&record).map_err(|e| io_err(path, e))?;
    }
    w.flush().map_err(|e| io_err(path, e))
}

pub fn write_attention_csv(rows: &[AttentionRow], path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| io_err(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    writeln!(w, "task_id,node_j,node_k,alpha").map_err(|e| io_err(path, e))?;
    for r in rows {
        writeln!(w, "{},{},{},{}", r.task_id, r.node_j, r.node_k, r.alpha).map_err(|e| io_err(path, e))?;
    }
    w.flush().map_err(|e| io_err(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hypernet::ThetaInit;
    use crate::model::ModelConfig;
    use crate::rng::stream;

    fn task() -> Task {
        Task::from_splits(
            "demo",
            Tensor::matrix(3, 3, vec![0.1, 0.4, -0.2, 1.0, -0.5, 0.3, -0.7, 0.2, 0.9]),
            vec![0, 1, 1],
            Tensor::matrix(1, 3, vec![0.0, 0.0, 0.0]),
            None,
            2,
        )
    }

    #[test]
    fn attention_map_rows_are_distributions() {
        let model = FlatModel::new(ModelConfig::default(), ThetaInit::default(), &mut stream(0, "init")).unwrap();
        let rows = export_attention(&model, &[task(), task()]).unwrap();
        assert_eq!(rows.len(), 18);
        for j in 0..3 {
            let s: f64 = rows.iter().filter(|r| r.task_id == 1 && r.node_j == j).map(|r| r.alpha).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn embedding_rows_carry_source_and_width() {
        let model = FlatModel::new(ModelConfig::default(), ThetaInit::default(), &mut stream(0, "init")).unwrap();
        let rows = export_embeddings(&model, &[task()]).unwrap();
        assert_eq!(rows[0].source_name, "demo");
        assert_eq!(rows[0].embedding.len(), 64);
    }
}
