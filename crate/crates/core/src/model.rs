//! Model configuration, the trainable parameter tree and the end-to-end
//! forward pass (encode meta split, generate weights, run the target GAT).

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::Task;
use crate::encoder::{self, ColumnEmbeddings, DatasetEmbedding};
use crate::error::{FlatError, Result};
use crate::gatnet;
use crate::hypernet::{self, GeneratedWeights, Theta, ThetaInit};
use crate::numkernel::{NodeId, Tape, Tensor};
use crate::rng::FlatRng;

/// Floor applied to the true-class probability before taking its log.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub n_classes: usize,
    /// Width of every encoder MLP layer.
    pub encoder_hidden: usize,
    /// Length of the dataset embedding.
    pub dataset_dim: usize,
    /// Length of each column embedding; GAT nodes have one more entry.
    pub column_dim: usize,
    /// Blocks in each residual encoder MLP.
    pub residual_blocks: usize,
    pub heads: usize,
    /// Per-head output width of each GAT layer.
    pub head_dims: Vec<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_classes: 2,
            encoder_hidden: 64,
            dataset_dim: 64,
            column_dim: 15,
            residual_blocks: 4,
            heads: 2,
            head_dims: vec![64, 8],
        }
    }
}

impl ModelConfig {
    pub fn with_classes(n_classes: usize) -> Self {
        Self { n_classes, ..Self::default() }
    }

    /// Binary labels enter the encoder as one scalar, K-class labels one-hot.
    pub fn label_dim(&self) -> usize {
        if self.n_classes == 2 {
            1
        } else {
            self.n_classes
        }
    }

    pub fn gat_layers(&self) -> usize {
        self.head_dims.len()
    }

    pub fn gat_input_dim(&self, layer: usize) -> usize {
        if layer == 0 {
            self.column_dim + 1
        } else {
            self.heads * self.head_dims[layer - 1]
        }
    }

    pub fn gat_output_dim(&self) -> usize {
        self.heads * self.head_dims.last().copied().unwrap_or(0)
    }

    /// Flattened `[a, b, W]` size of one head in `layer`.
    pub fn head_block_size(&self, layer: usize) -> usize {
        let d = self.head_dims[layer];
        3 * d + d * self.gat_input_dim(layer)
    }

    pub fn generator_width(&self, layer: usize) -> usize {
        if layer < self.gat_layers() {
            self.heads * self.head_block_size(layer)
        } else {
            self.n_classes * self.gat_output_dim()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(FlatError::Config(msg.to_string()));
        if self.n_classes < 2 {
            return bad("n_classes must be at least 2");
        }
        if self.encoder_hidden == 0 || self.dataset_dim == 0 || self.column_dim == 0 {
            return bad("embedding widths must be positive");
        }
        if self.residual_blocks == 0 || self.heads == 0 || self.head_dims.is_empty() {
            return bad("need at least one residual block, head and GAT layer");
        }
        if self.head_dims.contains(&0) {
            return bad("GAT head widths must be positive");
        }
        Ok(())
    }
}

/// Affine layer `x W + b` with `W` stored `[in, out]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dense<T> {
    pub weight: T,
    pub bias: T,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mlp<T> {
    pub layers: Vec<Dense<T>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams<T> {
    pub f1: Mlp<T>,
    pub f2: Mlp<T>,
    pub f3: Mlp<T>,
    pub g: Mlp<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderParams<T> {
    /// One bias-free generator `[dataset_dim, width]` per GAT layer plus the classifier.
    pub generators: Vec<T>,
    /// Logarithms of the learnable weight norms.
    pub log_theta: Theta<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T = Tensor> {
    pub encoder: EncoderParams<T>,
    pub decoder: DecoderParams<T>,
}

impl<T> Mlp<T> {
    fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> Mlp<U> {
        Mlp { layers: self.layers.iter().map(|l| Dense { weight: f(&l.weight), bias: f(&l.bias) }).collect() }
    }

    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a T)>) {
        for (i, l) in self.layers.iter().enumerate() {
            out.push((format!("{prefix}.{i}.weight"), &l.weight));
            out.push((format!("{prefix}.{i}.bias"), &l.bias));
        }
    }

    fn visit_mut<'a>(&'a mut self, out: &mut Vec<&'a mut T>) {
        for l in &mut self.layers {
            out.push(&mut l.weight);
            out.push(&mut l.bias);
        }
    }
}

impl<T> ModelParams<T> {
    pub fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> ModelParams<U> {
        let e = &self.encoder;
        let lt = &self.decoder.log_theta;
        ModelParams {
            encoder: EncoderParams { f1: e.f1.map(f), f2: e.f2.map(f), f3: e.f3.map(f), g: e.g.map(f) },
            decoder: DecoderParams {
                generators: self.decoder.generators.iter().map(&mut *f).collect(),
                log_theta: Theta {
                    attention: f(&lt.attention),
                    bias: f(&lt.bias),
                    transform: f(&lt.transform),
                    classifier: f(&lt.classifier),
                },
            },
        }
    }

    /// Every parameter with its stable name, in canonical order.
    pub fn named(&self) -> Vec<(String, &T)> {
        let mut out = Vec::new();
        self.encoder.f1.visit("encoder.f1", &mut out);
        self.encoder.f2.visit("encoder.f2", &mut out);
        self.encoder.f3.visit("encoder.f3", &mut out);
        self.encoder.g.visit("encoder.g", &mut out);
        for (i, h) in self.decoder.generators.iter().enumerate() {
            out.push((format!("decoder.h{i}"), h));
        }
        let lt = &self.decoder.log_theta;
        out.push(("decoder.log_theta.attention".into(), &lt.attention));
        out.push(("decoder.log_theta.bias".into(), &lt.bias));
        out.push(("decoder.log_theta.transform".into(), &lt.transform));
        out.push(("decoder.log_theta.classifier".into(), &lt.classifier));
        out
    }

    pub fn tensors(&self) -> Vec<&T> {
        self.named().into_iter().map(|(_, t)| t).collect()
    }

    /// Mutable references in the same order as [`ModelParams::named`].
    pub fn tensors_mut(&mut self) -> Vec<&mut T> {
        let mut out = Vec::new();
        self.encoder.f1.visit_mut(&mut out);
        self.encoder.f2.visit_mut(&mut out);
        self.encoder.f3.visit_mut(&mut out);
        self.encoder.g.visit_mut(&mut out);
        out.extend(self.decoder.generators.iter_mut());
        let lt = &mut self.decoder.log_theta;
        out.extend([&mut lt.attention, &mut lt.bias, &mut lt.transform, &mut lt.classifier]);
        out
    }
}

fn uniform(rng: &mut FlatRng, shape: &[usize], bound: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-bound..=bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("init shape")
}

fn dense_init(rng: &mut FlatRng, fan_in: usize, fan_out: usize) -> Dense<Tensor> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    Dense { weight: uniform(rng, &[fan_in, fan_out], bound), bias: uniform(rng, &[fan_out], bound) }
}

fn mlp_init(rng: &mut FlatRng, dims: &[usize]) -> Mlp<Tensor> {
    Mlp { layers: dims.windows(2).map(|w| dense_init(rng, w[0], w[1])).collect() }
}

impl ModelParams<Tensor> {
    /// Fan-in scaled uniform initialization; the column encoder's output bias starts at zero.
    pub fn init(config: &ModelConfig, theta: &Theta<f64>, rng: &mut FlatRng) -> Result<Self> {
        config.validate()?;
        for v in theta.values() {
            if !(v > 0.0 && v.is_finite()) {
                return Err(FlatError::InvalidTheta(v));
            }
        }
        let h = config.encoder_hidden;
        let blocks = config.residual_blocks;
        let mut f1_dims = vec![1 + config.label_dim()];
        f1_dims.extend(std::iter::repeat(h).take(blocks));
        let mut f3_dims = vec![h; blocks];
        f3_dims.push(config.dataset_dim);
        let f1 = mlp_init(rng, &f1_dims);
        let f2 = mlp_init(rng, &[h, h, h]);
        let f3 = mlp_init(rng, &f3_dims);
        let mut g = mlp_init(rng, &[h, h, config.column_dim]);
        if let Some(last) = g.layers.last_mut() {
            last.bias = Tensor::zeros(&[config.column_dim]);
        }
        let de = config.dataset_dim;
        let bound = 1.0 / (de as f64).sqrt();
        let generators = (0..=config.gat_layers())
            .map(|l| uniform(rng, &[de, config.generator_width(l)], bound))
            .collect();
        let log_theta = Theta {
            attention: Tensor::scalar(theta.attention.ln()),
            bias: Tensor::scalar(theta.bias.ln()),
            transform: Tensor::scalar(theta.transform.ln()),
            classifier: Tensor::scalar(theta.classifier.ln()),
        };
        Ok(Self { encoder: EncoderParams { f1, f2, f3, g }, decoder: DecoderParams { generators, log_theta } })
    }

    pub fn theta(&self) -> Theta<f64> {
        let lt = &self.decoder.log_theta;
        Theta {
            attention: lt.attention.item().exp(),
            bias: lt.bias.item().exp(),
            transform: lt.transform.item().exp(),
            classifier: lt.classifier.item().exp(),
        }
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    /// Records every tensor on `tape`, as trainable leaves or constants.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> ModelParams<NodeId> {
        self.map(&mut |t: &Tensor| if trainable { tape.param(t.clone()) } else { tape.constant(t.clone()) })
    }

    /// Content hash of every tensor, used to confirm parameters were left untouched.
    pub fn fingerprint(&self) -> [u8; 32] {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        for (name, t) in self.named() {
            h.update(name.as_bytes());
            for v in t.data() {
                h.update(v.to_le_bytes());
            }
        }
        h.finalize().into()
    }
}

/// A configured FLAT model with concrete parameter values.
#[derive(Clone, Debug, PartialEq)]
pub struct FlatModel {
    pub config: ModelConfig,
    pub params: ModelParams<Tensor>,
}

impl FlatModel {
    pub fn new(config: ModelConfig, theta: ThetaInit, rng: &mut FlatRng) -> Result<Self> {
        let theta = hypernet::init_theta(&theta)?;
        let params = ModelParams::init(&config, &theta, rng)?;
        Ok(Self { config, params })
    }

    fn check_task(&self, task: &Task) -> Result<()> {
        if task.n_cols() < 2 {
            return Err(FlatError::TooFewColumns(task.n_cols()));
        }
        if task.n_meta() == 0 {
            return Err(FlatError::Dimension { what: "meta rows", expected: 1, found: 0 });
        }
        if let Some(&y) = task.meta_y.iter().find(|&&y| y >= self.config.n_classes) {
            return Err(FlatError::Dimension { what: "meta label bound", expected: self.config.n_classes, found: y + 1 });
        }
        Ok(())
    }

    /// Dataset and column embeddings of the task's meta split.
    pub fn embed(&self, task: &Task) -> Result<(DatasetEmbedding, ColumnEmbeddings)> {
        self.check_task(task)?;
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape, false);
        let pooled = encoder::pool_rows(&mut tape, &task.meta_x, &task.meta_y, &bound.encoder, &self.config)?;
        let e = encoder::encode_dataset(&mut tape, pooled, &bound.encoder)?;
        let p = encoder::encode_columns(&mut tape, pooled, &bound.encoder)?;
        Ok((DatasetEmbedding(tape.value(e).clone()), ColumnEmbeddings(tape.value(p).clone())))
    }

    /// Class probabilities for the target rows, one row per target row.
    pub fn predict_proba(&self, task: &Task) -> Result<Tensor> {
        self.check_task(task)?;
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape, false);
        let probs = forward(&mut tape, &bound, &self.config, &task.meta_x, &task.meta_y, &task.target_x)?;
        Ok(tape.value(probs).clone())
    }

    /// Probabilities from explicit embeddings instead of the encoder's.
    pub fn predict_from_embeddings(&self, x: &Tensor, e: &DatasetEmbedding, p: &ColumnEmbeddings) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape, false);
        let e = tape.constant(e.0.clone());
        let p = tape.constant(p.0.clone());
        let gw = hypernet::generate_weights(&mut tape, e, &bound.decoder, &self.config)?;
        let probs = gatnet::predict(&mut tape, x, p, &gw, &self.config)?;
        Ok(tape.value(probs).clone())
    }

    /// Generated weights for a given dataset embedding, as plain tensors.
    pub fn generated_weights(&self, e: &DatasetEmbedding) -> Result<GeneratedWeights<Tensor>> {
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape, false);
        let e = tape.constant(e.0.clone());
        let gw = hypernet::generate_weights(&mut tape, e, &bound.decoder, &self.config)?;
        Ok(gw.values(&tape))
    }
}

/// Full pipeline on one tape: returns the `[n_target, n_classes]` probability node.
pub fn forward(
    tape: &mut Tape,
    params: &ModelParams<NodeId>,
    config: &ModelConfig,
    meta_x: &Tensor,
    meta_y: &[usize],
    target_x: &Tensor,
) -> Result<NodeId> {
    let pooled = encoder::pool_rows(tape, meta_x, meta_y, &params.encoder, config)?;
    let e = encoder::encode_dataset(tape, pooled, &params.encoder)?;
    let p = encoder::encode_columns(tape, pooled, &params.encoder)?;
    let gw = hypernet::generate_weights(tape, e, &params.decoder, config)?;
    gatnet::predict(tape, target_x, p, &gw, config)
}

/// Mean negative log-probability of the true class; probabilities are floored at [`PROB_FLOOR`].
pub fn cross_entropy(tape: &mut Tape, probs: NodeId, labels: &[usize]) -> Result<NodeId> {
    let shape = tape.shape(probs).to_vec();
    if shape.len() != 2 || shape[0] != labels.len() {
        return Err(FlatError::Dimension { what: "label count", expected: shape.first().copied().unwrap_or(0), found: labels.len() });
    }
    let (n, k) = (shape[0], shape[1]);
    let mut onehot = vec![0.0; n * k];
    for (i, &y) in labels.iter().enumerate() {
        if y >= k {
            return Err(FlatError::Dimension { what: "label bound", expected: k, found: y + 1 });
        }
        onehot[i * k + y] = 1.0;
    }
    let mask = tape.constant(Tensor::matrix(n, k, onehot));
    let floored = tape.clamp_min(probs, PROB_FLOOR);
    let logp = tape.ln(floored);
    let picked = tape.mul(logp, mask)?;
    let total = tape.sum_all(picked);
    Ok(tape.scale(total, -1.0 / n.max(1) as f64))
}

/// Loss of predicting the task's target labels from its meta split.
pub fn task_loss(tape: &mut Tape, params: &ModelParams<NodeId>, config: &ModelConfig, task: &Task) -> Result<NodeId> {
    let labels = task
        .target_y
        .as_ref()
        .ok_or_else(|| FlatError::Config(format!("task from {} has no target labels", task.source_name)))?;
    let probs = forward(tape, params, config, &task.meta_x, &task.meta_y, &task.target_x)?;
    cross_entropy(tape, probs, labels)
}

/// Argmax per row; exact ties go to the lower class index.
pub fn argmax_rows(probs: &Tensor) -> Vec<usize> {
    (0..probs.rows())
        .map(|i| {
            let row = probs.row(i);
            let mut best = 0;
            for (c, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = c;
                }
            }
            best
        })
        .collect()
}
