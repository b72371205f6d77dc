//! Target network: a fully connected graph attention network over the
//! columns of each row, followed by mean pooling and a linear classifier.
//! Rows are processed as a batch but never interact.

use crate::error::{FlatError, Result};
use crate::hypernet::{GeneratedWeights, HeadWeights};
use crate::model::ModelConfig;
use crate::numkernel::{NodeId, Tape, Tensor, LEAKY_SLOPE};

/// Node states `[rows, n_cols, d_c + 1]`: node j of row r is `[p_j, x_rj]`.
pub fn build_nodes(tape: &mut Tape, x: &Tensor, p: NodeId) -> Result<NodeId> {
    let (rows, cols) = (x.rows(), x.cols());
    let p_shape = tape.shape(p).to_vec();
    if p_shape.len() != 2 || p_shape[0] != cols {
        return Err(FlatError::Dimension { what: "column embedding rows", expected: cols, found: p_shape[0] });
    }
    let values = tape.constant(x.clone().reshaped(&[rows, cols, 1])?);
    let tiled = tape.repeat(p, rows);
    Ok(tape.concat(&[tiled, values], 2)?)
}

/// Projects nodes with `W`, returning `[rows * n_cols, d]` and the attention `[rows, n_cols, n_cols]`.
fn project_and_attend(tape: &mut Tape, nodes: NodeId, head: &HeadWeights<NodeId>) -> Result<(NodeId, NodeId)> {
    let shape = tape.shape(nodes).to_vec();
    let (rows, cols, d_in) = (shape[0], shape[1], shape[2]);
    let w_shape = tape.shape(head.transform).to_vec();
    if w_shape.len() != 2 || w_shape[1] != d_in {
        return Err(FlatError::Dimension { what: "transform input width", expected: d_in, found: w_shape.get(1).copied().unwrap_or(0) });
    }
    let d = w_shape[0];
    if tape.shape(head.attention) != [2 * d] {
        return Err(FlatError::Dimension { what: "attention vector length", expected: 2 * d, found: tape.value(head.attention).len() });
    }
    let flat = tape.reshape(nodes, &[rows * cols, d_in])?;
    let wt = tape.transpose(head.transform)?;
    let z = tape.matmul(flat, wt)?;
    let a_src = tape.narrow(head.attention, 0, 0, d)?;
    let a_src = tape.reshape(a_src, &[d, 1])?;
    let a_dst = tape.narrow(head.attention, 0, d, d)?;
    let a_dst = tape.reshape(a_dst, &[d, 1])?;
    let s_src = tape.matmul(z, a_src)?;
    let s_src = tape.reshape(s_src, &[rows, cols, 1])?;
    let s_dst = tape.matmul(z, a_dst)?;
    let s_dst = tape.reshape(s_dst, &[rows, 1, cols])?;
    let logits = tape.add(s_src, s_dst)?;
    let logits = tape.leaky_relu(logits, LEAKY_SLOPE);
    let alpha = tape.softmax(logits, 2)?;
    Ok((z, alpha))
}

/// `alpha[r, j, k] = softmax_k LeakyReLU(a . [W h_j, W h_k])` over the complete graph with self-loops.
pub fn attention_coeffs(tape: &mut Tape, nodes: NodeId, head: &HeadWeights<NodeId>) -> Result<NodeId> {
    Ok(project_and_attend(tape, nodes, head)?.1)
}

/// One GAT layer: each head aggregates `sum_k alpha_jk W h_k`, adds its bias,
/// and head outputs are concatenated. Returns the new nodes and each head's attention.
pub fn gat_layer(tape: &mut Tape, nodes: NodeId, heads: &[HeadWeights<NodeId>]) -> Result<(NodeId, Vec<NodeId>)> {
    let shape = tape.shape(nodes).to_vec();
    if shape.len() != 3 {
        return Err(FlatError::Dimension { what: "node state rank", expected: 3, found: shape.len() });
    }
    let (rows, cols) = (shape[0], shape[1]);
    let mut outs = Vec::with_capacity(heads.len());
    let mut alphas = Vec::with_capacity(heads.len());
    for head in heads {
        let (z, alpha) = project_and_attend(tape, nodes, head)?;
        let d = tape.shape(z)[1];
        let z = tape.reshape(z, &[rows, cols, d])?;
        let agg = tape.bmm(alpha, z)?;
        outs.push(tape.add(agg, head.bias)?);
        alphas.push(alpha);
    }
    let out = if outs.len() == 1 { outs[0] } else { tape.concat(&outs, 2)? };
    Ok((out, alphas))
}

/// Probabilities and per-layer, per-head attention for every row of `x`.
pub fn predict_with_attention(
    tape: &mut Tape,
    x: &Tensor,
    p: NodeId,
    gw: &GeneratedWeights<NodeId>,
    config: &ModelConfig,
) -> Result<(NodeId, Vec<Vec<NodeId>>)> {
    if gw.layers.len() != config.gat_layers() {
        return Err(FlatError::Dimension { what: "GAT layers", expected: config.gat_layers(), found: gw.layers.len() });
    }
    let mut h = build_nodes(tape, x, p)?;
    let mut attention = Vec::with_capacity(gw.layers.len());
    for heads in &gw.layers {
        let (next, alphas) = gat_layer(tape, h, heads)?;
        h = next;
        attention.push(alphas);
    }
    let pooled = tape.mean(h, 1)?;
    let wt = tape.transpose(gw.classifier)?;
    let logits = tape.matmul(pooled, wt)?;
    Ok((tape.softmax(logits, 1)?, attention))
}

/// `[rows, n_classes]` class probabilities.
pub fn predict(
    tape: &mut Tape,
    x: &Tensor,
    p: NodeId,
    gw: &GeneratedWeights<NodeId>,
    config: &ModelConfig,
) -> Result<NodeId> {
    Ok(predict_with_attention(tape, x, p, gw, config)?.0)
}

/// Averages `[rows, n, n]` attention maps over heads and rows into one `[n, n]` matrix.
pub fn average_attention(maps: &[Tensor]) -> Tensor {
    let shape = maps[0].shape();
    let (rows, n) = (shape[0], shape[1]);
    let mut out = vec![0.0; n * n];
    for m in maps {
        for (i, v) in m.data().iter().enumerate() {
            out[i % (n * n)] += v;
        }
    }
    let denom = (maps.len() * rows) as f64;
    out.iter_mut().for_each(|v| *v /= denom);
    Tensor::matrix(n, n, out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn head(tape: &mut Tape, a: Vec<f64>, b: Vec<f64>, w: Tensor) -> HeadWeights<NodeId> {
        HeadWeights {
            attention: tape.constant(Tensor::vector(a)),
            bias: tape.constant(Tensor::vector(b)),
            transform: tape.constant(w),
        }
    }

    #[test]
    fn nodes_are_embedding_then_value() {
        let mut tape = Tape::new();
        let p = tape.constant(Tensor::zeros(&[2, 3]));
        let x = Tensor::matrix(1, 2, vec![1.0, -1.0]);
        let n = build_nodes(&mut tape, &x, p).unwrap();
        assert_eq!(tape.shape(n), &[1, 2, 4]);
        assert_eq!(tape.value(n).data(), &[0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, -1.0]);
    }

    #[test]
    fn embedding_row_mismatch_is_an_error() {
        let mut tape = Tape::new();
        let p = tape.constant(Tensor::zeros(&[3, 2]));
        let x = Tensor::matrix(1, 2, vec![1.0, -1.0]);
        assert!(build_nodes(&mut tape, &x, p).is_err());
    }

    #[test]
    fn zero_attention_vector_gives_uniform_weights() {
        let mut tape = Tape::new();
        let nodes = tape.constant(Tensor::new(vec![1, 3, 2], vec![1.0, 2.0, -3.0, 0.5, 4.0, 4.0]).unwrap());
        let h = head(&mut tape, vec![0.0; 4], vec![0.0; 2], Tensor::matrix(2, 2, vec![1.0, 0.3, -0.2, 2.0]));
        let alpha = attention_coeffs(&mut tape, nodes, &h).unwrap();
        assert!(tape.value(alpha).data().iter().all(|v| (v - 1.0 / 3.0).abs() < 1e-15));
    }

    #[test]
    fn single_node_layer_is_affine() {
        let mut tape = Tape::new();
        let nodes = tape.constant(Tensor::new(vec![1, 1, 2], vec![1.5, -2.0]).unwrap());
        let h = head(&mut tape, vec![0.4, -0.1, 0.9, 0.2], vec![0.1, 0.2], Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]));
        let (out, _) = gat_layer(&mut tape, nodes, &[h]).unwrap();
        assert_eq!(tape.value(out).data(), &[1.5 - 4.0 + 0.1, 4.5 - 8.0 + 0.2]);
    }

    #[test]
    fn attention_average_over_heads_and_rows() {
        let a = Tensor::new(vec![2, 2, 2], vec![1.0, 0.0, 0.0, 1.0, 0.5, 0.5, 0.5, 0.5]).unwrap();
        let b = Tensor::new(vec![2, 2, 2], vec![0.0, 1.0, 1.0, 0.0, 0.5, 0.5, 0.5, 0.5]).unwrap();
        let avg = average_attention(&[a, b]);
        assert!(avg.data().iter().all(|v| (v - 0.5).abs() < 1e-15));
    }
}
