//! Central-difference gradient checking.

use super::{KernelError, NodeId, Tape, Tensor};

/// Max over coordinates of `|a - n| / max(1, |a|, |n|)` where `a` is the
/// supplied analytic gradient and `n` the central difference of `value`.
pub fn gradient_error<V>(value: V, params: &[Tensor], analytic: &[Tensor], step: f64) -> f64
where
    V: Fn(&[Tensor]) -> f64,
{
    let mut work: Vec<Tensor> = params.to_vec();
    let mut worst: f64 = 0.0;
    for (t, grad) in analytic.iter().enumerate() {
        for i in 0..work[t].len() {
            let orig = work[t].data()[i];
            work[t].data_mut()[i] = orig + step;
            let up = value(&work);
            work[t].data_mut()[i] = orig - step;
            let down = value(&work);
            work[t].data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * step);
            let a = grad.data()[i];
            let err = (a - numeric).abs() / 1f64.max(a.abs()).max(numeric.abs());
            worst = worst.max(err);
        }
    }
    worst
}

/// Records `f` on fresh tapes with every tensor in `params` as a trainable
/// leaf, then compares the tape gradient to central differences.
pub fn finite_diff_check<F>(f: F, params: &[Tensor], step: f64) -> Result<f64, KernelError>
where
    F: Fn(&mut Tape, &[NodeId]) -> Result<NodeId, KernelError>,
{
    let eval = |ps: &[Tensor]| -> Result<(Tape, Vec<NodeId>, NodeId), KernelError> {
        let mut tape = Tape::new();
        let ids: Vec<NodeId> = ps.iter().map(|p| tape.param(p.clone())).collect();
        let root = f(&mut tape, &ids)?;
        Ok((tape, ids, root))
    };
    let (mut tape, ids, root) = eval(params)?;
    tape.backward(root)?;
    let analytic: Vec<Tensor> = ids
        .iter()
        .zip(params)
        .map(|(id, p)| tape.grad(*id).unwrap_or_else(|| Tensor::zeros(p.shape())))
        .collect();
    // Shapes were validated by the first evaluation, so re-evaluation cannot fail.
    let value = |ps: &[Tensor]| {
        let (tape, _, root) = eval(ps).expect("re-evaluation with identical shapes");
        tape.value(root).item()
    };
    Ok(gradient_error(value, params, &analytic, step))
}
