//! Adam and AdamW with decoupled weight decay.
//!
//! ```text
//! p  <- p * (1 - lr * wd)          (AdamW only)
//! m  <- b1 * m + (1 - b1) * g
//! v  <- b2 * v + (1 - b2) * g^2
//! p  <- p - lr * (m / (1 - b1^t)) / (sqrt(v / (1 - b2^t)) + eps)
//! ```

use serde::{Deserialize, Serialize};

use super::{KernelError, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub step: u64,
    pub first_moment: Vec<Vec<f64>>,
    pub second_moment: Vec<Vec<f64>>,
}

/// Whether an update was applied or rejected because of a non-finite gradient.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StepOutcome {
    Applied,
    Skipped,
}

impl OptimizerState {
    /// Zeroed moments for parameters of the given shapes, with beta1=0.9, beta2=0.999.
    pub fn new<'a>(shapes: impl IntoIterator<Item = &'a [usize]>, lr: f64, eps: f64, weight_decay: f64) -> Self {
        let sizes: Vec<usize> = shapes.into_iter().map(|s| s.iter().product()).collect();
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps,
            weight_decay,
            step: 0,
            first_moment: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            second_moment: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn for_params(params: &[Tensor], lr: f64, eps: f64, weight_decay: f64) -> Self {
        Self::new(params.iter().map(Tensor::shape), lr, eps, weight_decay)
    }
}

fn apply<'a, I>(params: I, grads: &[Tensor], state: &mut OptimizerState, decay: f64) -> Result<StepOutcome, KernelError>
where
    I: IntoIterator<Item = &'a mut Tensor>,
{
    let params: Vec<&mut Tensor> = params.into_iter().collect();
    if params.len() != grads.len() || params.len() != state.first_moment.len() {
        return Err(KernelError::BadShape {
            op: "optimizer",
            detail: format!(
                "{} params, {} grads, {} moment slots",
                params.len(),
                grads.len(),
                state.first_moment.len()
            ),
        });
    }
    for ((p, g), m) in params.iter().zip(grads).zip(&state.first_moment) {
        if p.shape() != g.shape() || p.len() != m.len() {
            return Err(KernelError::ShapeMismatch { op: "optimizer", lhs: p.shape().to_vec(), rhs: g.shape().to_vec() });
        }
    }
    state.step += 1;
    if !grads.iter().all(Tensor::all_finite) {
        log::warn!("non-finite gradient at optimizer step {}; update skipped", state.step);
        return Ok(StepOutcome::Skipped);
    }
    let t = state.step as i32;
    let bc1 = 1.0 - state.beta1.powi(t);
    let bc2_sqrt = (1.0 - state.beta2.powi(t)).sqrt();
    let (b1, b2, lr, eps) = (state.beta1, state.beta2, state.lr, state.eps);
    let shrink = 1.0 - lr * decay;
    for (((p, g), m), v) in params
        .into_iter()
        .zip(grads)
        .zip(state.first_moment.iter_mut())
        .zip(state.second_moment.iter_mut())
    {
        for (((pi, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
            if decay != 0.0 {
                *pi *= shrink;
            }
            *mi = b1 * *mi + (1.0 - b1) * gi;
            *vi = b2 * *vi + (1.0 - b2) * gi * gi;
            let denom = vi.sqrt() / bc2_sqrt + eps;
            *pi -= lr * (*mi / bc1) / denom;
        }
    }
    Ok(StepOutcome::Applied)
}

/// One AdamW update using `state.weight_decay`.
pub fn adamw_step<'a, I>(params: I, grads: &[Tensor], state: &mut OptimizerState) -> Result<StepOutcome, KernelError>
where
    I: IntoIterator<Item = &'a mut Tensor>,
{
    let decay = state.weight_decay;
    apply(params, grads, state, decay)
}

/// One Adam update; the state's weight-decay field is ignored.
pub fn adam_step<'a, I>(params: I, grads: &[Tensor], state: &mut OptimizerState) -> Result<StepOutcome, KernelError>
where
    I: IntoIterator<Item = &'a mut Tensor>,
{
    apply(params, grads, state, 0.0)
}
