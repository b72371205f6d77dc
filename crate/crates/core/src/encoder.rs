//! Permutation-invariant dataset encoder and per-column encoder.

use crate::error::{FlatError, Result};
use crate::model::{Dense, EncoderParams, Mlp, ModelConfig};
use crate::numkernel::{NodeId, Tape, Tensor};

/// Dataset embedding `e`, shape `[1, dataset_dim]`.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetEmbedding(pub Tensor);

/// Column embeddings, shape `[n_cols, column_dim]`; row j belongs to column j.
#[derive(Clone, Debug, PartialEq)]
pub struct ColumnEmbeddings(pub Tensor);

impl DatasetEmbedding {
    pub fn as_slice(&self) -> &[f64] {
        self.0.data()
    }
}

fn dense(tape: &mut Tape, x: NodeId, layer: &Dense<NodeId>, relu: bool) -> Result<NodeId> {
    let xw = tape.matmul(x, layer.weight)?;
    let y = tape.add(xw, layer.bias)?;
    Ok(if relu { tape.relu(y) } else { y })
}

/// Stack of Linear→ReLU blocks; a block whose width is unchanged adds its input back.
pub fn residual_mlp(tape: &mut Tape, x: NodeId, mlp: &Mlp<NodeId>) -> Result<NodeId> {
    let mut h = x;
    for (i, layer) in mlp.layers.iter().enumerate() {
        let y = dense(tape, h, layer, true)?;
        h = if i > 0 && tape.shape(y) == tape.shape(h) { tape.add(y, h)? } else { y };
    }
    Ok(h)
}

/// Linear layers with ReLU between them; `final_relu` also rectifies the output.
pub fn plain_mlp(tape: &mut Tape, x: NodeId, mlp: &Mlp<NodeId>, final_relu: bool) -> Result<NodeId> {
    let mut h = x;
    let last = mlp.layers.len().saturating_sub(1);
    for (i, layer) in mlp.layers.iter().enumerate() {
        h = dense(tape, h, layer, i < last || final_relu)?;
    }
    Ok(h)
}

/// Input rows for f1: row `i * n_cols + j` is `[x_ij, enc(y_i)]`.
pub fn pair_inputs(meta_x: &Tensor, meta_y: &[usize], config: &ModelConfig) -> Result<Tensor> {
    let (n, c) = (meta_x.rows(), meta_x.cols());
    if n == 0 || meta_y.len() != n {
        return Err(FlatError::Dimension { what: "meta label count", expected: n, found: meta_y.len() });
    }
    let ld = config.label_dim();
    let width = 1 + ld;
    let mut data = vec![0.0; n * c * width];
    for i in 0..n {
        let y = meta_y[i];
        if y >= config.n_classes {
            return Err(FlatError::Dimension { what: "meta label bound", expected: config.n_classes, found: y + 1 });
        }
        for j in 0..c {
            let row = &mut data[(i * c + j) * width..(i * c + j + 1) * width];
            row[0] = meta_x.at(i, j);
            if ld == 1 {
                row[1] = y as f64;
            } else {
                row[1 + y] = 1.0;
            }
        }
    }
    Ok(Tensor::matrix(n * c, width, data))
}

/// Per-column mean over meta rows of f1 applied to each (value, label) pair; `[n_cols, hidden]`.
pub fn pool_rows(
    tape: &mut Tape,
    meta_x: &Tensor,
    meta_y: &[usize],
    params: &EncoderParams<NodeId>,
    config: &ModelConfig,
) -> Result<NodeId> {
    let (n, c) = (meta_x.rows(), meta_x.cols());
    let inputs = tape.constant(pair_inputs(meta_x, meta_y, config)?);
    let h = residual_mlp(tape, inputs, &params.f1)?;
    let width = tape.shape(h)[1];
    let cube = tape.reshape(h, &[n, c, width])?;
    Ok(tape.mean(cube, 0)?)
}

/// `e = f3(mean_j f2(pooled_j))`, shape `[1, dataset_dim]`.
pub fn encode_dataset(tape: &mut Tape, pooled: NodeId, params: &EncoderParams<NodeId>) -> Result<NodeId> {
    let per_col = plain_mlp(tape, pooled, &params.f2, true)?;
    let avg = tape.mean(per_col, 0)?;
    let width = tape.shape(avg)[0];
    let avg = tape.reshape(avg, &[1, width])?;
    residual_mlp(tape, avg, &params.f3)
}

/// `p_j = g(pooled_j)` for every column, shape `[n_cols, column_dim]`.
pub fn encode_columns(tape: &mut Tape, pooled: NodeId, params: &EncoderParams<NodeId>) -> Result<NodeId> {
    plain_mlp(tape, pooled, &params.g, false)
}
