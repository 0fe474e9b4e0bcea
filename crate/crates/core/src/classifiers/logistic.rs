//! L2-regularized logistic regression fitted by Newton's method.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{param_err, Error, Result};
use crate::loss::sigmoid;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogisticRegression {
    pub weights: Vec<f64>,
    pub intercept: f64,
}

pub(crate) fn check_labels(labels: &[u8]) -> Result<()> {
    if labels.is_empty() {
        return param_err("no training rows");
    }
    if labels.iter().all(|&y| y == labels[0]) {
        return param_err("training labels contain a single class");
    }
    Ok(())
}

impl LogisticRegression {
    /// Minimize mean log-loss plus `l2/2·‖w‖²` (intercept unpenalized).
    pub fn fit(rows: &[Vec<f64>], labels: &[u8], l2: f64) -> Result<Self> {
        check_labels(labels)?;
        if rows.len() != labels.len() {
            return param_err(format!("{} rows for {} labels", rows.len(), labels.len()));
        }
        let (n, f) = (rows.len(), rows[0].len());
        let x = DMatrix::from_fn(n, f + 1, |i, j| if j == f { 1.0 } else { rows[i][j] });
        let y = DVector::from_fn(n, |i, _| labels[i] as f64);
        let mut beta = DVector::zeros(f + 1);
        let mut reg = DMatrix::identity(f + 1, f + 1) * l2;
        reg[(f, f)] = 1e-10;
        for _ in 0..100 {
            let p = (&x * &beta).map(sigmoid);
            let mut grad = x.transpose() * (&p - &y) / n as f64;
            for j in 0..f {
                grad[j] += l2 * beta[j];
            }
            let w = p.map(|q| (q * (1.0 - q)).max(1e-12));
            let xw = DMatrix::from_fn(n, f + 1, |i, j| x[(i, j)] * w[i]);
            let hess = x.transpose() * xw / n as f64 + &reg;
            let step = hess.lu().solve(&grad).ok_or_else(|| Error::Undefined("singular Hessian in logistic regression".into()))?;
            beta -= &step;
            if step.amax() < 1e-10 {
                break;
            }
        }
        if beta.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { stage: "logistic regression".into(), step: 0 });
        }
        Ok(LogisticRegression { weights: beta.rows(0, f).iter().copied().collect(), intercept: beta[f] })
    }

    pub fn predict(&self, x: &[f64]) -> f64 {
        sigmoid(self.intercept + self.weights.iter().zip(x).map(|(w, v)| w * v).sum::<f64>())
    }
}
