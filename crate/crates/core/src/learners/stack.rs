//! Convex stacking of candidate learners by cross-validated squared loss.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

const MAX_ITER: usize = 20_000;

/// Euclidean projection onto the probability simplex.
fn project_simplex(v: &[f64]) -> Vec<f64> {
    let mut u = v.to_vec();
    u.sort_by(|a, b| b.total_cmp(a));
    let mut css = 0.0;
    let mut theta = 0.0;
    for (j, uj) in u.iter().enumerate() {
        css += uj;
        let t = (css - 1.0) / (j + 1) as f64;
        if uj - t > 0.0 {
            theta = t;
        }
    }
    v.iter().map(|x| (x - theta).max(0.0)).collect()
}

/// Mean squared error of the combination `Σ w_j preds_j` against `target`.
pub fn combination_loss(preds: &[Vec<f64>], target: &[f64], w: &[f64]) -> f64 {
    let n = target.len();
    (0..n)
        .map(|i| {
            let f: f64 = preds.iter().zip(w).map(|(p, wj)| wj * p[i]).sum();
            (target[i] - f).powi(2)
        })
        .sum::<f64>()
        / n.max(1) as f64
}

/// Convex weights minimising the squared loss of the combined out-of-fold
/// predictions. `cv_predictions[j]` holds candidate `j`'s held-out predictions.
///
/// Solved by accelerated projected gradient from the uniform vector, so exact
/// ties stay uniform. The result never loses to the best single candidate.
pub fn stack_weights(cv_predictions: &[Vec<f64>], target: &[f64]) -> Vec<f64> {
    let m = cv_predictions.len();
    assert!(m >= 1, "stacking needs at least one candidate");
    if m == 1 {
        return vec![1.0];
    }
    let n = target.len().max(1) as f64;
    let q = DMatrix::from_fn(m, m, |a, b| {
        cv_predictions[a]
            .iter()
            .zip(&cv_predictions[b])
            .map(|(x, y)| x * y)
            .sum::<f64>()
            / n
    });
    let c = DVector::from_fn(m, |a, _| {
        cv_predictions[a].iter().zip(target).map(|(x, y)| x * y).sum::<f64>() / n
    });
    let lmax = SymmetricEigen::new(q.clone())
        .eigenvalues
        .iter()
        .fold(0.0f64, |acc, v| acc.max(*v));
    let mut w = vec![1.0 / m as f64; m];
    if lmax > 0.0 {
        let step = 1.0 / (2.0 * lmax);
        let mut y = w.clone();
        let mut t = 1.0f64;
        for _ in 0..MAX_ITER {
            let yv = DVector::from_column_slice(&y);
            let grad = (&q * &yv - &c) * 2.0;
            let cand: Vec<f64> = y.iter().zip(grad.iter()).map(|(a, g)| a - step * g).collect();
            let next = project_simplex(&cand);
            let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
            let momentum = (t - 1.0) / t_next;
            let delta = next
                .iter()
                .zip(&w)
                .fold(0.0f64, |acc, (a, b)| acc.max((a - b).abs()));
            y = next.iter().zip(&w).map(|(a, b)| a + momentum * (a - b)).collect();
            w = next;
            t = t_next;
            if delta < 1e-15 {
                break;
            }
        }
    }
    let mut best = combination_loss(cv_predictions, target, &w);
    for j in 0..m {
        let mut e = vec![0.0; m];
        e[j] = 1.0;
        let loss = combination_loss(cv_predictions, target, &e);
        if loss < best {
            best = loss;
            w = e;
        }
    }
    w
}
