//! Straight-line reference evaluation of the full model using plain loops
//! over `Vec<f64>`, independent of the tape.

#![allow(dead_code)]

use flat_core::model::{Dense, ModelConfig, ModelParams};
use flat_core::numkernel::Tensor;

pub fn linear(x: &[f64], layer: &Dense<Tensor>) -> Vec<f64> {
    let (n_in, n_out) = (layer.weight.shape()[0], layer.weight.shape()[1]);
    assert_eq!(x.len(), n_in);
    (0..n_out)
        .map(|o| (0..n_in).map(|i| x[i] * layer.weight.data()[i * n_out + o]).sum::<f64>() + layer.bias.data()[o])
        .collect()
}

fn relu(v: Vec<f64>) -> Vec<f64> {
    v.into_iter().map(|x| x.max(0.0)).collect()
}

pub fn residual(x: &[f64], layers: &[Dense<Tensor>]) -> Vec<f64> {
    let mut h = x.to_vec();
    for (i, l) in layers.iter().enumerate() {
        let y = relu(linear(&h, l));
        h = if i > 0 && y.len() == h.len() { y.iter().zip(&h).map(|(a, b)| a + b).collect() } else { y };
    }
    h
}

pub fn plain(x: &[f64], layers: &[Dense<Tensor>], final_relu: bool) -> Vec<f64> {
    let mut h = x.to_vec();
    for (i, l) in layers.iter().enumerate() {
        h = linear(&h, l);
        if i + 1 < layers.len() || final_relu {
            h = relu(h);
        }
    }
    h
}

pub fn softmax(v: &[f64]) -> Vec<f64> {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = v.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|x| x / s).collect()
}

pub fn leaky(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        0.2 * x
    }
}

pub struct Reference {
    pub pooled: Vec<Vec<f64>>,
    pub e: Vec<f64>,
    pub p: Vec<Vec<f64>>,
    /// Per layer, per head: (a, b, W as rows).
    pub heads: Vec<Vec<(Vec<f64>, Vec<f64>, Vec<Vec<f64>>)>>,
    pub classifier: Vec<Vec<f64>>,
    /// First-layer attention of each head for each target row.
    pub alpha: Vec<Vec<Vec<Vec<f64>>>>,
    pub probs: Vec<Vec<f64>>,
}

pub fn unit_scaled(v: &[f64], theta: f64) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter().map(|x| theta * x / n).collect()
}

/// Attention matrix of one head over nodes `h` given `a` and `W` (rows of `W` map to outputs).
pub fn attention(h: &[Vec<f64>], a: &[f64], w: &[Vec<f64>]) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let d = w.len();
    let z: Vec<Vec<f64>> = h.iter().map(|hj| w.iter().map(|row| row.iter().zip(hj).map(|(p, q)| p * q).sum()).collect()).collect();
    let alpha = (0..h.len())
        .map(|j| {
            let logits: Vec<f64> = (0..h.len())
                .map(|k| leaky((0..d).map(|o| a[o] * z[j][o] + a[d + o] * z[k][o]).sum()))
                .collect();
            softmax(&logits)
        })
        .collect();
    (z, alpha)
}

pub fn reference(
    params: &ModelParams<Tensor>,
    cfg: &ModelConfig,
    meta_x: &[Vec<f64>],
    meta_y: &[usize],
    target_x: &[Vec<f64>],
) -> Reference {
    let n_cols = meta_x[0].len();
    let enc = &params.encoder;
    let pooled: Vec<Vec<f64>> = (0..n_cols)
        .map(|j| {
            let mut acc = vec![0.0; cfg.encoder_hidden];
            for (row, &y) in meta_x.iter().zip(meta_y) {
                let mut input = vec![row[j]];
                if cfg.n_classes == 2 {
                    input.push(y as f64);
                } else {
                    input.extend((0..cfg.n_classes).map(|k| (k == y) as usize as f64));
                }
                for (a, v) in acc.iter_mut().zip(residual(&input, &enc.f1.layers)) {
                    *a += v / meta_x.len() as f64;
                }
            }
            acc
        })
        .collect();
    let mut mean2 = vec![0.0; cfg.encoder_hidden];
    for pj in &pooled {
        for (a, v) in mean2.iter_mut().zip(plain(pj, &enc.f2.layers, true)) {
            *a += v / n_cols as f64;
        }
    }
    let e = residual(&mean2, &enc.f3.layers);
    let p: Vec<Vec<f64>> = pooled.iter().map(|pj| plain(pj, &enc.g.layers, false)).collect();

    let theta = params.theta();
    let raw: Vec<Vec<f64>> = params
        .decoder
        .generators
        .iter()
        .map(|h| {
            let width = h.shape()[1];
            (0..width).map(|c| (0..e.len()).map(|r| e[r] * h.data()[r * width + c]).sum()).collect()
        })
        .collect();
    let mut heads = Vec::new();
    for l in 0..cfg.gat_layers() {
        let d = cfg.head_dims[l];
        let d_in = cfg.gat_input_dim(l);
        let block = 3 * d + d * d_in;
        let mut layer = Vec::new();
        for h in 0..cfg.heads {
            let off = h * block;
            let a = unit_scaled(&raw[l][off..off + 2 * d], theta.attention);
            let b = unit_scaled(&raw[l][off + 2 * d..off + 3 * d], theta.bias);
            let wflat = unit_scaled(&raw[l][off + 3 * d..off + block], theta.transform);
            let w: Vec<Vec<f64>> = wflat.chunks(d_in).map(|c| c.to_vec()).collect();
            layer.push((a, b, w));
        }
        heads.push(layer);
    }
    let out_dim = cfg.gat_output_dim();
    let classifier: Vec<Vec<f64>> =
        unit_scaled(&raw[cfg.gat_layers()], theta.classifier).chunks(out_dim).map(|c| c.to_vec()).collect();

    let mut alpha_rows = Vec::new();
    let mut probs = Vec::new();
    for row in target_x {
        let mut h: Vec<Vec<f64>> = (0..n_cols)
            .map(|j| {
                let mut v = p[j].clone();
                v.push(row[j]);
                v
            })
            .collect();
        let mut first_alpha = Vec::new();
        for (l, layer) in heads.iter().enumerate() {
            let mut next = vec![Vec::new(); n_cols];
            for (a, b, w) in layer {
                let (z, alpha) = attention(&h, a, w);
                for j in 0..n_cols {
                    for o in 0..w.len() {
                        let agg: f64 = (0..n_cols).map(|k| alpha[j][k] * z[k][o]).sum();
                        next[j].push(agg + b[o]);
                    }
                }
                if l == 0 {
                    first_alpha.push(alpha);
                }
            }
            h = next;
        }
        let pooled_h: Vec<f64> = (0..out_dim).map(|o| h.iter().map(|hj| hj[o]).sum::<f64>() / n_cols as f64).collect();
        let logits: Vec<f64> = classifier.iter().map(|w| w.iter().zip(&pooled_h).map(|(a, b)| a * b).sum()).collect();
        probs.push(softmax(&logits));
        alpha_rows.push(first_alpha);
    }
    Reference { pooled, e, p, heads, classifier, alpha: alpha_rows, probs }
}

/// Deterministic small parameter values derived from position.
pub fn hand_set(params: &mut ModelParams<Tensor>, scale: f64) {
    for (t_idx, t) in params.tensors_mut().into_iter().enumerate() {
        let n = t.len();
        let data = t.data_mut();
        if n == 1 {
            continue;
        }
        for (i, v) in data.iter_mut().enumerate() {
            *v = scale * ((i as f64 * 0.37 + t_idx as f64 * 1.3).sin() + 0.25 * (i as f64 * 0.11).cos());
        }
    }
}

pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        n_classes: 2,
        encoder_hidden: 8,
        dataset_dim: 8,
        column_dim: 4,
        residual_blocks: 4,
        heads: 1,
        head_dims: vec![8, 4],
    }
}

pub fn rows(t: &Tensor) -> Vec<Vec<f64>> {
    (0..t.rows()).map(|i| t.row(i).to_vec()).collect()
}
