//! Reference classifiers fitted on each task's meta split.

use nalgebra::{DMatrix, DVector};

use crate::data::Task;

const NEWTON_MAX_ITERS: usize = 100;
const NEWTON_TOL: f64 = 1e-12;

/// Binary L2-regularized logistic regression with an unpenalized intercept.
///
/// Minimizes `mean_i logloss(y_i, w.x_i + b) + |w|^2 / (2 c)` by Newton's method.
/// The mean makes the fit unchanged when every row is repeated equally often.
/// Returns `(w, b)`.
pub fn fit_logistic(x: &[&[f64]], y: &[bool], c: f64) -> (Vec<f64>, f64) {
    let d = x.first().map_or(0, |r| r.len());
    let n = x.len();
    // Parameters are [w_0 .. w_{d-1}, b].
    let design = DMatrix::from_fn(n, d + 1, |i, j| if j < d { x[i][j] } else { 1.0 });
    let target = DVector::from_fn(n, |i, _| if y[i] { 1.0 } else { 0.0 });
    let lambda = 1.0 / c;
    let mut theta = DVector::zeros(d + 1);
    let inv_n = 1.0 / n.max(1) as f64;
    let objective = |t: &DVector<f64>| {
        let z = &design * t;
        let ll: f64 = z
            .iter()
            .zip(target.iter())
            .map(|(&zi, &yi)| softplus(zi) - yi * zi)
            .sum();
        ll * inv_n + 0.5 * lambda * t.rows(0, d).norm_squared()
    };
    let mut current = objective(&theta);
    for _ in 0..NEWTON_MAX_ITERS {
        let z = &design * &theta;
        let p = z.map(sigmoid);
        let mut grad = design.transpose() * (&p - &target) * inv_n;
        let mut hess = design.transpose() * DMatrix::from_diagonal(&p.map(|v| v * (1.0 - v))) * &design * inv_n;
        for j in 0..d {
            grad[j] += lambda * theta[j];
            hess[(j, j)] += lambda;
        }
        // Keeps the intercept direction solvable when every prediction saturates.
        hess[(d, d)] += 1e-10;
        let Some(step) = hess.lu().solve(&grad) else { break };
        let mut scale = 1.0;
        let mut next = &theta - &step * scale;
        let mut next_obj = objective(&next);
        while next_obj > current && scale > 1e-10 {
            scale *= 0.5;
            next = &theta - &step * scale;
            next_obj = objective(&next);
        }
        let improvement = current - next_obj;
        theta = next;
        current = next_obj;
        if improvement.abs() <= NEWTON_TOL * current.abs().max(1.0) || step.norm() * scale < NEWTON_TOL {
            break;
        }
    }
    (theta.rows(0, d).iter().copied().collect(), theta[d])
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

fn distinct_classes(labels: &[usize]) -> Vec<usize> {
    let mut c = labels.to_vec();
    c.sort_unstable();
    c.dedup();
    c
}

/// Logistic regression on the meta split (one-vs-rest beyond two classes).
/// Abstains with `None` when the meta split holds a single class.
pub fn baseline_lr(task: &Task, c: f64) -> Option<Vec<usize>> {
    let classes = distinct_classes(&task.meta_y);
    if classes.len() < 2 {
        return None;
    }
    let rows: Vec<&[f64]> = (0..task.n_meta()).map(|i| task.meta_x.row(i)).collect();
    let fits: Vec<(usize, Vec<f64>, f64)> = if classes.len() == 2 {
        let (w, b) = fit_logistic(&rows, &task.meta_y.iter().map(|&y| y == classes[1]).collect::<Vec<_>>(), c);
        vec![(classes[1], w, b)]
    } else {
        classes
            .iter()
            .map(|&k| {
                let (w, b) = fit_logistic(&rows, &task.meta_y.iter().map(|&y| y == k).collect::<Vec<_>>(), c);
                (k, w, b)
            })
            .collect()
    };
    let score = |w: &[f64], b: f64, x: &[f64]| w.iter().zip(x).map(|(a, v)| a * v).sum::<f64>() + b;
    Some(
        (0..task.n_target())
            .map(|i| {
                let x = task.target_x.row(i);
                if fits.len() == 1 {
                    let (pos, w, b) = &fits[0];
                    if score(w, *b, x) > 0.0 {
                        *pos
                    } else {
                        classes[0]
                    }
                } else {
                    let mut best = (fits[0].0, f64::NEG_INFINITY);
                    for (k, w, b) in &fits {
                        let s = score(w, *b, x);
                        if s > best.1 {
                            best = (*k, s);
                        }
                    }
                    best.0
                }
            })
            .collect(),
    )
}

/// Euclidean k-nearest-neighbour vote; `k` is clamped to the meta size.
/// Distance ties go to the lower meta index, vote ties to the lower class.
pub fn knn_predict(meta_x: &[&[f64]], meta_y: &[usize], query: &[f64], k: usize) -> usize {
    let mut order: Vec<(f64, usize)> = meta_x
        .iter()
        .enumerate()
        .map(|(i, r)| (r.iter().zip(query).map(|(a, b)| (a - b) * (a - b)).sum::<f64>(), i))
        .collect();
    order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let k = k.clamp(1, meta_x.len());
    let n_classes = meta_y.iter().max().map_or(1, |m| m + 1);
    let mut votes = vec![0usize; n_classes];
    for &(_, i) in &order[..k] {
        votes[meta_y[i]] += 1;
    }
    let mut best = 0;
    for (c, &v) in votes.iter().enumerate() {
        if v > votes[best] {
            best = c;
        }
    }
    best
}

/// KNN on the meta split; abstains like [`baseline_lr`] on single-class meta splits.
pub fn baseline_knn(task: &Task, k: usize) -> Option<Vec<usize>> {
    if distinct_classes(&task.meta_y).len() < 2 {
        return None;
    }
    let rows: Vec<&[f64]> = (0..task.n_meta()).map(|i| task.meta_x.row(i)).collect();
    Some((0..task.n_target()).map(|i| knn_predict(&rows, &task.meta_y, task.target_x.row(i), k)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_nearest_neighbour_copies_label() {
        let a = [0.0, 0.0];
        let b = [5.0, 5.0];
        assert_eq!(knn_predict(&[&a, &b], &[1, 0], &[5.0, 5.0], 1), 0);
        assert_eq!(knn_predict(&[&a, &b], &[1, 0], &[0.0, 0.0], 1), 1);
    }

    #[test]
    fn full_k_is_majority_with_low_class_on_ties() {
        let pts: Vec<[f64; 1]> = vec![[0.0], [1.0], [2.0], [3.0]];
        let rows: Vec<&[f64]> = pts.iter().map(|p| p.as_slice()).collect();
        assert_eq!(knn_predict(&rows, &[1, 1, 0, 1], &[100.0], 4), 1);
        assert_eq!(knn_predict(&rows, &[1, 0, 0, 1], &[100.0], 4), 0);
    }

    #[test]
    fn equidistant_neighbours_prefer_lower_index() {
        let pts: Vec<[f64; 1]> = vec![[-1.0], [1.0]];
        let rows: Vec<&[f64]> = pts.iter().map(|p| p.as_slice()).collect();
        assert_eq!(knn_predict(&rows, &[1, 0], &[0.0], 1), 1);
    }

    #[test]
    fn logistic_separates_two_points() {
        let a = [-1.0];
        let b = [1.0];
        let (w, b0) = fit_logistic(&[&a, &b], &[false, true], 1.0);
        assert!(w[0] > 0.0);
        assert!(w[0] * -2.0 + b0 < 0.0 && w[0] * 2.0 + b0 > 0.0);
    }
}
