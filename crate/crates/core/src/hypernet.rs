//! Weight decoder: bias-free linear generators map the dataset embedding to
//! every target-network weight, each block L2-normalized to a learnable norm.

use serde::{Deserialize, Serialize};

use crate::error::{FlatError, Result};
use crate::model::{DecoderParams, ModelConfig};
use crate::numkernel::{NodeId, Tape, Tensor};

/// Raw blocks whose norm falls below this cannot be normalized.
pub const MIN_BLOCK_NORM: f64 = 1e-12;

/// One value per generated parameter kind, shared across GAT layers.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Theta<T> {
    pub attention: T,
    pub bias: T,
    pub transform: T,
    pub classifier: T,
}

impl<T: Copy> Theta<T> {
    pub fn uniform(v: T) -> Self {
        Self { attention: v, bias: v, transform: v, classifier: v }
    }

    pub fn values(&self) -> [T; 4] {
        [self.attention, self.bias, self.transform, self.classifier]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum ThetaInit {
    Fixed(f64),
    /// Norms carried over from the end of an earlier run.
    Recorded(Theta<f64>),
}

impl Default for ThetaInit {
    fn default() -> Self {
        ThetaInit::Fixed(1.0)
    }
}

pub fn init_theta(init: &ThetaInit) -> Result<Theta<f64>> {
    let theta = match init {
        ThetaInit::Fixed(v) => Theta::uniform(*v),
        ThetaInit::Recorded(t) => *t,
    };
    for v in theta.values() {
        if !(v > 0.0 && v.is_finite()) {
            return Err(FlatError::InvalidTheta(v));
        }
    }
    Ok(theta)
}

/// Weights of one attention head: `attention` is `[2d]` (source half first),
/// `bias` is `[d]` and `transform` is `[d, d_in]`.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadWeights<T> {
    pub attention: T,
    pub bias: T,
    pub transform: T,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GeneratedWeights<T = NodeId> {
    /// `layers[l][h]` holds head `h` of GAT layer `l`.
    pub layers: Vec<Vec<HeadWeights<T>>>,
    /// `[n_classes, gat_output_dim]`.
    pub classifier: T,
}

impl GeneratedWeights<NodeId> {
    pub fn values(&self, tape: &Tape) -> GeneratedWeights<Tensor> {
        let v = |id: NodeId| tape.value(id).clone();
        GeneratedWeights {
            layers: self
                .layers
                .iter()
                .map(|heads| {
                    heads
                        .iter()
                        .map(|h| HeadWeights { attention: v(h.attention), bias: v(h.bias), transform: v(h.transform) })
                        .collect()
                })
                .collect(),
            classifier: v(self.classifier),
        }
    }
}

impl GeneratedWeights<Tensor> {
    pub fn bind(&self, tape: &mut Tape) -> GeneratedWeights<NodeId> {
        GeneratedWeights {
            layers: self
                .layers
                .iter()
                .map(|heads| {
                    heads
                        .iter()
                        .map(|h| HeadWeights {
                            attention: tape.constant(h.attention.clone()),
                            bias: tape.constant(h.bias.clone()),
                            transform: tape.constant(h.transform.clone()),
                        })
                        .collect()
                })
                .collect(),
            classifier: tape.constant(self.classifier.clone()),
        }
    }
}

/// Raw generator outputs, one flat vector per GAT layer followed by the classifier.
pub fn raw_outputs(tape: &mut Tape, e: NodeId, params: &DecoderParams<NodeId>) -> Result<Vec<NodeId>> {
    let e = match tape.shape(e).len() {
        1 => {
            let n = tape.shape(e)[0];
            tape.reshape(e, &[1, n])?
        }
        _ => e,
    };
    params
        .generators
        .iter()
        .map(|&h| {
            let out = tape.matmul(e, h)?;
            let n = tape.shape(out)[1];
            Ok(tape.reshape(out, &[n])?)
        })
        .collect()
}

fn normalized(tape: &mut Tape, block: NodeId, theta: NodeId, label: impl FnOnce() -> String) -> Result<NodeId> {
    let norm = tape.l2_norm(block);
    let value = tape.value(norm).item();
    if !(value >= MIN_BLOCK_NORM) {
        return Err(FlatError::DegenerateWeights { block: label(), norm: value });
    }
    let unit = tape.div(block, norm)?;
    Ok(tape.mul(unit, theta)?)
}

/// Splits raw outputs into per-head `[a, b, W]` blocks and rescales each to its norm.
pub fn normalize_raw(
    tape: &mut Tape,
    raw: &[NodeId],
    theta: &Theta<NodeId>,
    config: &ModelConfig,
) -> Result<GeneratedWeights<NodeId>> {
    let n_layers = config.gat_layers();
    if raw.len() != n_layers + 1 {
        return Err(FlatError::Dimension { what: "generator outputs", expected: n_layers + 1, found: raw.len() });
    }
    for (l, &r) in raw.iter().enumerate() {
        let found = tape.value(r).len();
        if found != config.generator_width(l) {
            return Err(FlatError::Dimension { what: "generator width", expected: config.generator_width(l), found });
        }
    }
    let mut layers = Vec::with_capacity(n_layers);
    for (l, &r) in raw.iter().take(n_layers).enumerate() {
        let d = config.head_dims[l];
        let d_in = config.gat_input_dim(l);
        let block = config.head_block_size(l);
        let mut heads = Vec::with_capacity(config.heads);
        for h in 0..config.heads {
            let off = h * block;
            let a = tape.narrow(r, 0, off, 2 * d)?;
            let b = tape.narrow(r, 0, off + 2 * d, d)?;
            let w = tape.narrow(r, 0, off + 3 * d, d * d_in)?;
            let attention = normalized(tape, a, theta.attention, || format!("layer {l} head {h} attention"))?;
            let bias = normalized(tape, b, theta.bias, || format!("layer {l} head {h} bias"))?;
            let w = normalized(tape, w, theta.transform, || format!("layer {l} head {h} transform"))?;
            let transform = tape.reshape(w, &[d, d_in])?;
            heads.push(HeadWeights { attention, bias, transform });
        }
        layers.push(heads);
    }
    let cls = normalized(tape, raw[n_layers], theta.classifier, || "classifier".to_string())?;
    let classifier = tape.reshape(cls, &[config.n_classes, config.gat_output_dim()])?;
    Ok(GeneratedWeights { layers, classifier })
}

/// Current norms `exp(log_theta)` as tape nodes.
pub fn theta_nodes(tape: &mut Tape, params: &DecoderParams<NodeId>) -> Theta<NodeId> {
    let lt = &params.log_theta;
    Theta {
        attention: tape.exp(lt.attention),
        bias: tape.exp(lt.bias),
        transform: tape.exp(lt.transform),
        classifier: tape.exp(lt.classifier),
    }
}

/// All target-network weights for dataset embedding `e` (`[1, d_e]` or `[d_e]`).
pub fn generate_weights(
    tape: &mut Tape,
    e: NodeId,
    params: &DecoderParams<NodeId>,
    config: &ModelConfig,
) -> Result<GeneratedWeights<NodeId>> {
    let raw = raw_outputs(tape, e, params)?;
    let theta = theta_nodes(tape, params);
    normalize_raw(tape, &raw, &theta, config)
}

/// Value-level normalization of raw generator outputs.
pub fn normalize_raw_values(raw: &[Tensor], theta: &Theta<f64>, config: &ModelConfig) -> Result<GeneratedWeights<Tensor>> {
    let mut tape = Tape::new();
    let raw: Vec<NodeId> = raw.iter().map(|r| tape.constant(r.clone())).collect();
    let theta = Theta {
        attention: tape.constant(Tensor::scalar(theta.attention)),
        bias: tape.constant(Tensor::scalar(theta.bias)),
        transform: tape.constant(Tensor::scalar(theta.transform)),
        classifier: tape.constant(Tensor::scalar(theta.classifier)),
    };
    let gw = normalize_raw(&mut tape, &raw, &theta, config)?;
    Ok(gw.values(&tape))
}
