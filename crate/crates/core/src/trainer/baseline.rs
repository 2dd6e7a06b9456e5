//! Static-FC logistic regression: the whole-recording correlation matrix,
//! upper triangle as features, ridge-penalized logistic fit by Newton steps.

use crate::autograd::{sigmoid, Mat};
use crate::error::{Error, Result};
use crate::segfc::pearson_fc;
use nalgebra::{DMatrix, DVector};

pub const DEFAULT_RIDGE: f64 = 1.0;
const NEWTON_STEPS: usize = 50;

/// Upper-triangle entries of the full-recording FC.
pub fn static_fc_features(signal: &Mat) -> Result<Vec<f64>> {
    let fc = pearson_fc(signal)?;
    let n = fc.nrows();
    Ok((0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))).map(|(i, j)| fc[[i, j]]).collect())
}

#[derive(Debug, Clone)]
pub struct LogisticModel {
    mean: Vec<f64>,
    scale: Vec<f64>,
    /// Intercept first.
    weights: DVector<f64>,
}

impl LogisticModel {
    /// Fit on standardized features; the intercept is not penalized.
    pub fn fit(features: &[Vec<f64>], labels: &[usize], ridge: f64) -> Result<Self> {
        let n = features.len();
        if n == 0 || n != labels.len() {
            return Err(Error::Dimension(format!("{n} feature rows for {} labels", labels.len())));
        }
        let p = features[0].len();
        let mean: Vec<f64> = (0..p).map(|j| features.iter().map(|f| f[j]).sum::<f64>() / n as f64).collect();
        let scale: Vec<f64> = (0..p)
            .map(|j| {
                let v = features.iter().map(|f| (f[j] - mean[j]).powi(2)).sum::<f64>() / n as f64;
                if v > 0.0 {
                    v.sqrt()
                } else {
                    1.0
                }
            })
            .collect();
        let x = DMatrix::from_fn(n, p + 1, |i, j| if j == 0 { 1.0 } else { (features[i][j - 1] - mean[j - 1]) / scale[j - 1] });
        let y = DVector::from_iterator(n, labels.iter().map(|&l| l as f64));
        let mut w = DVector::zeros(p + 1);
        let mut penalty = DMatrix::identity(p + 1, p + 1) * ridge;
        penalty[(0, 0)] = 0.0;
        for _ in 0..NEWTON_STEPS {
            let prob = (&x * &w).map(sigmoid);
            let grad = x.transpose() * (&prob - &y) + &penalty * &w;
            let weights = prob.map(|q| (q * (1.0 - q)).max(1e-10));
            let xw = DMatrix::from_fn(n, p + 1, |i, j| x[(i, j)] * weights[i]);
            let hess = x.transpose() * xw + &penalty + DMatrix::identity(p + 1, p + 1) * 1e-9;
            let step = hess.cholesky().ok_or_else(|| Error::Internal("logistic Hessian is not positive definite".into()))?.solve(&grad);
            w -= &step;
            if step.amax() < 1e-10 {
                break;
            }
        }
        Ok(Self { mean, scale, weights: w })
    }

    pub fn predict(&self, features: &[f64]) -> f64 {
        let z = self.weights[0] + features.iter().enumerate().map(|(j, f)| self.weights[j + 1] * (f - self.mean[j]) / self.scale[j]).sum::<f64>();
        sigmoid(z)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn separates_a_shifted_feature() {
        let feats: Vec<Vec<f64>> = (0..20).map(|i| vec![if i % 2 == 0 { -1.0 } else { 1.0 } + 0.1 * i as f64 / 20.0, 0.3]).collect();
        let labels: Vec<usize> = (0..20).map(|i| i % 2).collect();
        let m = LogisticModel::fit(&feats, &labels, DEFAULT_RIDGE).unwrap();
        for (f, &l) in feats.iter().zip(&labels) {
            assert_eq!(usize::from(m.predict(f) > 0.5), l);
        }
    }

    #[test]
    fn constant_features_predict_base_rate() {
        let feats = vec![vec![1.0]; 4];
        let m = LogisticModel::fit(&feats, &[1, 1, 1, 0], DEFAULT_RIDGE).unwrap();
        assert!((m.predict(&[1.0]) - 0.75).abs() < 1e-8);
    }
}
