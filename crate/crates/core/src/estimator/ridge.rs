use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::{EstimatorError, Result};

/// Linear map from features to the two normalized screen coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RidgeModel {
    /// One `(x, y)` coefficient pair per feature.
    pub coefficients: Vec<[f64; 2]>,
    /// Unpenalized offset.
    pub intercept: [f64; 2],
    pub lambda: f64,
}

/// Solves the centered normal equations `(XᵀX + λI) W = XᵀY`.
pub fn ridge_fit(features: &[Vec<f64>], targets: &[[f64; 2]], lambda: f64) -> Result<RidgeModel> {
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(EstimatorError::Hyperparams(format!("ridge lambda must be finite and >= 0, got {lambda}")));
    }
    if features.is_empty() {
        return Err(EstimatorError::EmptyBatch);
    }
    if features.len() != targets.len() {
        return Err(EstimatorError::Shape { layer: "ridge targets".into(), expected: features.len(), got: targets.len() });
    }
    let n = features.len();
    let d = features[0].len();
    if let Some(bad) = features.iter().find(|f| f.len() != d) {
        return Err(EstimatorError::Shape { layer: "ridge features".into(), expected: d, got: bad.len() });
    }
    if lambda == 0.0 && n < d {
        return Err(EstimatorError::Rank(format!("{n} samples cannot determine {d} coefficients without regularization")));
    }

    let x = DMatrix::from_fn(n, d, |i, j| features[i][j]);
    let y = DMatrix::from_fn(n, 2, |i, j| targets[i][j]);
    let x_mean = x.row_mean();
    let y_mean = y.row_mean();
    let mut xc = x;
    for mut row in xc.row_iter_mut() {
        row -= &x_mean;
    }
    let mut yc = y;
    for mut row in yc.row_iter_mut() {
        row -= &y_mean;
    }

    let mut gram = xc.transpose() * &xc;
    for i in 0..d {
        gram[(i, i)] += lambda;
    }
    let rhs = xc.transpose() * &yc;
    let scale = gram.diagonal().max().max(f64::MIN_POSITIVE);
    let chol = gram
        .cholesky()
        .ok_or_else(|| EstimatorError::Rank(format!("normal equations are singular at lambda {lambda}")))?;
    let weakest = chol.l_dirty().diagonal().iter().map(|v| v * v).fold(f64::INFINITY, f64::min);
    if weakest <= 1e-12 * scale {
        return Err(EstimatorError::Rank(format!("normal equations are numerically singular at lambda {lambda}")));
    }
    let w = chol.solve(&rhs);

    let offset = &y_mean - x_mean * &w;
    Ok(RidgeModel {
        coefficients: (0..d).map(|i| [w[(i, 0)], w[(i, 1)]]).collect(),
        intercept: [offset[0], offset[1]],
        lambda,
    })
}

pub fn ridge_predict(model: &RidgeModel, features: &[f64]) -> Result<[f64; 2]> {
    if features.len() != model.coefficients.len() {
        return Err(EstimatorError::Shape { layer: "ridge features".into(), expected: model.coefficients.len(), got: features.len() });
    }
    let f = DVector::from_column_slice(features);
    let mut out = model.intercept;
    for (c, v) in model.coefficients.iter().zip(f.iter()) {
        out[0] += c[0] * v;
        out[1] += c[1] * v;
    }
    Ok(out)
}
