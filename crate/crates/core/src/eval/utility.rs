use serde::{Deserialize, Serialize};

use crate::codes::CodeMatrix;
use crate::error::{Error, Result};
use crate::nn::ops::sigmoid;

const MAX_ITERS: usize = 5000;
const GRAD_TOL: f64 = 1e-6;

/// Logistic classifier `P(y = 1 | x) = σ(w·x + b)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogisticModel {
    pub weights: Vec<f64>,
    pub intercept: f64,
    pub iterations: usize,
    /// Gradient norm at the returned parameters.
    pub grad_norm: f64,
}

impl LogisticModel {
    pub fn predict_proba(&self, features: &CodeMatrix) -> Result<Vec<f64>> {
        if features.n_codes() != self.weights.len() {
            return Err(Error::ShapeMismatch(format!(
                "model has {} weights, features have {} codes",
                self.weights.len(),
                features.n_codes()
            )));
        }
        Ok(features.rows().map(|row| sigmoid(self.logit(row))).collect())
    }

    fn logit(&self, row: &[u8]) -> f64 {
        self.intercept + row.iter().zip(&self.weights).filter(|(&b, _)| b == 1).map(|(_, w)| w).sum::<f64>()
    }
}

/// Gradient of `mean log-loss + reg/2 ‖w‖²` (intercept unpenalized); the
/// last entry is the intercept component.
fn objective_grad(model: &LogisticModel, features: &CodeMatrix, labels: &[u8], reg: f64) -> Vec<f64> {
    let n = features.n_codes();
    let mut g = vec![0.0; n + 1];
    for (row, &y) in features.rows().zip(labels) {
        let r = sigmoid(model.logit(row)) - f64::from(y);
        for (gi, _) in g.iter_mut().zip(row).filter(|(_, &b)| b == 1) {
            *gi += r;
        }
        g[n] += r;
    }
    let inv = 1.0 / labels.len() as f64;
    for (gi, w) in g.iter_mut().zip(&model.weights) {
        *gi = *gi * inv + reg * w;
    }
    g[n] *= inv;
    g
}

/// Upper bound on the largest eigenvalue of `XᵀX / n` for the features with
/// a constant column appended, from power iteration plus a safety margin.
fn gram_spectral_bound(features: &CodeMatrix) -> f64 {
    let n = features.n_codes();
    let mut v = vec![1.0 / ((n + 1) as f64).sqrt(); n + 1];
    let mut lambda = 0.0;
    for _ in 0..50 {
        let mut next = vec![0.0; n + 1];
        for row in features.rows() {
            let xv = v[n] + row.iter().zip(&v).filter(|(&b, _)| b == 1).map(|(_, x)| x).sum::<f64>();
            for (o, _) in next.iter_mut().zip(row).filter(|(_, &b)| b == 1) {
                *o += xv;
            }
            next[n] += xv;
        }
        let norm = next.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            break;
        }
        lambda = norm / features.n_records() as f64;
        v = next.into_iter().map(|x| x / norm).collect();
    }
    // power iteration approaches from below; the trace bounds it from above
    let trace = (features.bits().iter().map(|&b| f64::from(b)).sum::<f64>() / features.n_records() as f64) + 1.0;
    (1.1 * lambda).min(trace)
}

/// Fit an L2-regularized logistic model by full-batch gradient descent.
///
/// Steps are taken in the metric `D = diag(G/4 + reg, …, G/4 + reg, G/4)`,
/// `G` bounding the spectrum of the augmented Gram matrix, so the intercept
/// is not slowed by a large penalty on the weights. In that metric the
/// Hessian is bounded by `1 + reg/(G/4 + reg)` and the step is its inverse.
/// Stops at gradient norm `≤ 1e-6` or after 5000 iterations.
pub fn train_downstream(features: &CodeMatrix, labels: &[u8], reg: f64) -> Result<LogisticModel> {
    if labels.len() != features.n_records() {
        return Err(Error::ShapeMismatch(format!(
            "{} labels for {} records",
            labels.len(),
            features.n_records()
        )));
    }
    if !(reg >= 0.0 && reg.is_finite()) {
        return Err(Error::InvalidConfig(format!("regularization must be >= 0, got {reg}")));
    }
    if labels.iter().any(|&y| y > 1) {
        return Err(Error::InvalidConfig("labels must be 0 or 1".into()));
    }
    let positives = labels.iter().filter(|&&y| y == 1).count();
    if labels.len() < 2 || positives == 0 || positives == labels.len() {
        return Err(Error::SingleClassLabels);
    }
    let n = features.n_codes();
    let g4 = 0.25 * gram_spectral_bound(features);
    let rho = reg / (g4 + reg);
    let (step_w, step_b) = (1.0 / ((1.0 + rho) * (g4 + reg)), 1.0 / ((1.0 + rho) * g4));
    let mut model = LogisticModel {
        weights: vec![0.0; n],
        intercept: 0.0,
        iterations: 0,
        grad_norm: f64::INFINITY,
    };
    loop {
        let g = objective_grad(&model, features, labels, reg);
        model.grad_norm = g.iter().map(|x| x * x).sum::<f64>().sqrt();
        if !model.grad_norm.is_finite() {
            return Err(Error::NonFiniteGradient);
        }
        if model.grad_norm <= GRAD_TOL || model.iterations == MAX_ITERS {
            break;
        }
        for (w, gi) in model.weights.iter_mut().zip(&g) {
            *w -= step_w * gi;
        }
        model.intercept -= step_b * g[n];
        model.iterations += 1;
    }
    Ok(model)
}

fn check_labels(scores: &[f64], labels: &[u8]) -> Result<()> {
    if scores.len() != labels.len() {
        return Err(Error::ShapeMismatch(format!("{} scores, {} labels", scores.len(), labels.len())));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::DegenerateInput("NaN score".into()));
    }
    Ok(())
}

/// Probability that a random positive outscores a random negative, ties
/// counting one half.
pub fn auroc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    check_labels(scores, labels)?;
    let pos = labels.iter().filter(|&&y| y == 1).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::SingleClassLabels);
    }
    let ranks = super::average_ranks(scores);
    let rank_sum: f64 = ranks.iter().zip(labels).filter(|(_, &y)| y == 1).map(|(r, _)| r).sum();
    let (p, q) = (pos as f64, neg as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * q))
}

/// Average precision: mean over positives of the precision at each
/// positive's rank, scores descending with ties in index order.
pub fn auprc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    check_labels(scores, labels)?;
    let pos = labels.iter().filter(|&&y| y == 1).count();
    if pos == 0 {
        return Err(Error::NoPositives);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut hits = 0usize;
    let mut total = 0.0;
    for (rank, &i) in order.iter().enumerate() {
        if labels[i] == 1 {
            hits += 1;
            total += hits as f64 / (rank + 1) as f64;
        }
    }
    Ok(total / pos as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn auroc_examples() {
        assert_eq!(auroc(&[0.9, 0.1], &[1, 0]).unwrap(), 1.0);
        assert_eq!(auroc(&[0.9, 0.8, 0.3], &[1, 0, 1]).unwrap(), 0.5);
        assert_eq!(auroc(&[0.4; 5], &[1, 0, 1, 0, 0]).unwrap(), 0.5);
        assert!(matches!(auroc(&[0.1, 0.2], &[1, 1]), Err(Error::SingleClassLabels)));
        assert!(auroc(&[0.1], &[1, 0]).is_err());
    }

    #[test]
    fn auprc_examples() {
        assert_eq!(auprc(&[0.9, 0.1], &[1, 0]).unwrap(), 1.0);
        assert_eq!(auprc(&[0.9, 0.1], &[0, 1]).unwrap(), 0.5);
        assert_eq!(auprc(&[0.9, 0.5, 0.4, 0.1], &[1, 0, 0, 0]).unwrap(), 1.0);
        // tie broken by index: the negative at index 0 ranks first
        assert_eq!(auprc(&[0.5, 0.5], &[0, 1]).unwrap(), 0.5);
        assert!(matches!(auprc(&[0.1, 0.2], &[0, 0]), Err(Error::NoPositives)));
    }

    #[test]
    fn separable_data_is_fit() {
        let x = CodeMatrix::from_rows(&[vec![1, 0], vec![1, 1], vec![0, 1], vec![0, 0]]).unwrap();
        let y = [1, 1, 0, 0];
        let model = train_downstream(&x, &y, 1e-3).unwrap();
        let p = model.predict_proba(&x).unwrap();
        let correct = p.iter().zip(&y).filter(|(p, &y)| (**p > 0.5) == (y == 1)).count();
        assert_eq!(correct, 4);
    }

    #[test]
    fn heavy_regularization_gives_base_rate() {
        let x = CodeMatrix::from_rows(&[vec![1, 0], vec![1, 1], vec![0, 1], vec![0, 0], vec![1, 0]]).unwrap();
        let y = [1, 0, 1, 0, 0];
        let model = train_downstream(&x, &y, 1e4).unwrap();
        assert!(model.weights.iter().all(|w| w.abs() < 1e-4));
        for p in model.predict_proba(&x).unwrap() {
            assert!((p - 0.4).abs() < 1e-4);
        }
    }

    /// Newton's method on the same objective, written against a dense
    /// design matrix.
    fn newton_oracle(x: &[[f64; 2]], y: &[f64], reg: f64) -> [f64; 3] {
        let mut theta = [0.0; 3];
        let n = x.len() as f64;
        for _ in 0..100 {
            let mut g = [0.0; 3];
            let mut h = [[0.0; 3]; 3];
            for (xi, &yi) in x.iter().zip(y) {
                let a = [xi[0], xi[1], 1.0];
                let z: f64 = (0..3).map(|k| a[k] * theta[k]).sum();
                let p = 1.0 / (1.0 + (-z).exp());
                for r in 0..3 {
                    g[r] += (p - yi) * a[r] / n;
                    for c in 0..3 {
                        h[r][c] += p * (1.0 - p) * a[r] * a[c] / n;
                    }
                }
            }
            for k in 0..2 {
                g[k] += reg * theta[k];
                h[k][k] += reg;
            }
            // Cramer's rule for the 3x3 system h d = g
            let det = |m: [[f64; 3]; 3]| {
                m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
                    + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
            };
            let d0 = det(h);
            for k in 0..3 {
                let mut m = h;
                for r in 0..3 {
                    m[r][k] = g[r];
                }
                theta[k] -= det(m) / d0;
            }
        }
        theta
    }

    #[test]
    fn matches_newton_oracle() {
        let rows = [[1.0, 0.0], [1.0, 1.0], [0.0, 1.0], [0.0, 0.0]];
        let y = [1.0, 0.0, 1.0, 0.0];
        let reg = 0.1;
        let want = newton_oracle(&rows, &y, reg);
        let x = CodeMatrix::from_rows(&rows.iter().map(|r| r.iter().map(|&v| v as u8).collect()).collect::<Vec<_>>())
            .unwrap();
        let model = train_downstream(&x, &[1, 0, 1, 0], reg).unwrap();
        assert!(model.grad_norm <= GRAD_TOL);
        assert!((model.weights[0] - want[0]).abs() < 1e-4);
        assert!((model.weights[1] - want[1]).abs() < 1e-4);
        assert!((model.intercept - want[2]).abs() < 1e-4);
    }

    #[test]
    fn rejects_bad_labels() {
        let x = CodeMatrix::zeros(3, 2);
        assert!(matches!(train_downstream(&x, &[1, 1, 1], 0.1), Err(Error::SingleClassLabels)));
        assert!(train_downstream(&x, &[1, 0], 0.1).is_err());
        assert!(train_downstream(&x, &[1, 0, 2], 0.1).is_err());
    }

    proptest! {
        #[test]
        fn rank_metrics_invariant_under_monotone_maps(
            raw in proptest::collection::vec((0u8..6, 0u8..2), 2..12),
        ) {
            let scores: Vec<f64> = raw.iter().map(|(s, _)| f64::from(*s) / 5.0).collect();
            let labels: Vec<u8> = raw.iter().map(|(_, y)| *y).collect();
            let mapped: Vec<f64> = scores.iter().map(|s| (3.0 * s).exp() - 7.0).collect();
            let pos = labels.iter().filter(|&&y| y == 1).count();
            if pos > 0 && pos < labels.len() {
                prop_assert_eq!(auroc(&scores, &labels).unwrap(), auroc(&mapped, &labels).unwrap());
            }
            if pos > 0 {
                let (a, b) = (auprc(&scores, &labels).unwrap(), auprc(&mapped, &labels).unwrap());
                prop_assert_eq!(a, b);
                prop_assert!(a > 0.0 && a <= 1.0);
            }
        }
    }
}
