//! Closed-form ridge regression with an unpenalized intercept.

use nalgebra::DMatrix;
use ndarray::{Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RidgeModel {
    /// `D x K`.
    pub weights: Array2<f64>,
    /// Length `K`.
    pub bias: Array1<f64>,
    pub l2: f64,
}

impl RidgeModel {
    pub fn predict(&self, x: ArrayView2<'_, f64>) -> Array2<f64> {
        x.dot(&self.weights) + &self.bias
    }
}

fn to_dmatrix(a: &Array2<f64>) -> DMatrix<f64> {
    DMatrix::from_fn(a.nrows(), a.ncols(), |i, j| a[[i, j]])
}

fn solve(xc: &Array2<f64>, yc: &Array2<f64>, l2: f64) -> Option<Array2<f64>> {
    let x = to_dmatrix(xc);
    let y = to_dmatrix(yc);
    let mut gram = x.transpose() * &x;
    for i in 0..gram.nrows() {
        gram[(i, i)] += l2;
    }
    let rhs = x.transpose() * y;
    let w = gram.cholesky()?.solve(&rhs);
    if w.iter().any(|v| !v.is_finite()) {
        return None;
    }
    Some(Array2::from_shape_fn((w.nrows(), w.ncols()), |(i, j)| w[(i, j)]))
}

/// Fits `Y ≈ X W + b` minimizing `‖Y − XW − b‖² + l2 ‖W‖²`. The intercept
/// is not penalized. A singular system at `l2 = 0` is solved at `fallback_l2`.
pub fn fit_ridge(x: ArrayView2<'_, f64>, y: ArrayView2<'_, f64>, l2: f64, fallback_l2: f64) -> Result<RidgeModel> {
    if x.nrows() == 0 {
        return Err(Error::Validation("ridge regression needs at least one row".into()));
    }
    if x.nrows() != y.nrows() {
        return Err(Error::Validation(format!("{} feature rows for {} target rows", x.nrows(), y.nrows())));
    }
    if !(l2 >= 0.0) {
        return Err(Error::Validation(format!("ridge strength {l2} must be non-negative")));
    }
    let x_mean = x.mean_axis(Axis(0)).expect("non-empty");
    let y_mean = y.mean_axis(Axis(0)).expect("non-empty");
    let xc = &x - &x_mean;
    let yc = &y - &y_mean;
    let (weights, l2) = match solve(&xc, &yc, l2) {
        Some(w) => (w, l2),
        None if l2 == 0.0 => {
            let w = solve(&xc, &yc, fallback_l2)
                .ok_or_else(|| Error::numerical(None, format!("ridge system singular at l2 = {fallback_l2}")))?;
            (w, fallback_l2)
        }
        None => return Err(Error::numerical(None, format!("ridge system singular at l2 = {l2}"))),
    };
    let bias = &y_mean - &x_mean.dot(&weights);
    Ok(RidgeModel { weights, bias, l2 })
}

/// Mean squared and mean absolute error over every predicted scalar.
pub fn mse_mae(pred: ArrayView2<'_, f64>, target: ArrayView2<'_, f64>) -> (f64, f64) {
    let n = pred.len().max(1) as f64;
    let diff = &pred - &target;
    let mse = diff.iter().map(|d| d * d).sum::<f64>() / n;
    let mae = diff.iter().map(|d| d.abs()).sum::<f64>() / n;
    (mse, mae)
}

/// Fits on the training rows at each grid value and keeps the model with
/// the lowest validation MSE (ties go to the earlier grid entry).
pub fn select_ridge(
    train: (ArrayView2<'_, f64>, ArrayView2<'_, f64>),
    valid: (ArrayView2<'_, f64>, ArrayView2<'_, f64>),
    grid: &[f64],
) -> Result<RidgeModel> {
    let smallest = grid
        .iter()
        .copied()
        .filter(|&g| g > 0.0)
        .fold(f64::INFINITY, f64::min);
    let fallback = if smallest.is_finite() { smallest } else { 1e-6 };
    let mut best: Option<(f64, RidgeModel)> = None;
    for &l2 in grid {
        let model = fit_ridge(train.0, train.1, l2, fallback)?;
        let score = if valid.0.nrows() == 0 {
            0.0
        } else {
            mse_mae(model.predict(valid.0).view(), valid.1).0
        };
        if best.as_ref().is_none_or(|(s, _)| score < *s) {
            best = Some((score, model));
        }
    }
    best.map(|(_, m)| m)
        .ok_or_else(|| Error::Validation("empty ridge grid".into()))
}
