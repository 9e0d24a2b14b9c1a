//! Validation metrics for a fitted coefficient vector.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::Link;
use crate::error::{Error, Result};
use crate::glm::predict;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    /// Mean of `xᵀ Cov(γ̂) x` over the validation rows.
    pub avg_pred_var: f64,
    /// Mean squared error against the true probabilities, when they are known.
    pub sse: Option<f64>,
    pub scaled_brier: f64,
    pub n_test: usize,
}

pub fn avg_prediction_variance(cov: &DMatrix<f64>, design: &DMatrix<f64>) -> Result<f64> {
    if cov.nrows() != cov.ncols() || cov.ncols() != design.ncols() {
        return Err(Error::Dimension(format!(
            "covariance is {}x{} but the design has {} columns",
            cov.nrows(),
            cov.ncols(),
            design.ncols()
        )));
    }
    if design.nrows() == 0 {
        return Err(Error::InvalidData("empty validation design".into()));
    }
    let xc = design * cov;
    let total: f64 = xc.component_mul(design).row_sum().iter().sum();
    Ok(total / design.nrows() as f64)
}

/// Mean squared difference between predicted and true probabilities.
pub fn sse(gamma: &DVector<f64>, design: &DMatrix<f64>, true_prob: &DVector<f64>, link: Link) -> Result<f64> {
    let (_, mu) = predict(gamma, design, link)?;
    if mu.len() != true_prob.len() {
        return Err(Error::Dimension("true probabilities do not match the design".into()));
    }
    Ok((mu - true_prob).norm_squared() / true_prob.len() as f64)
}

pub fn scaled_brier(gamma: &DVector<f64>, design: &DMatrix<f64>, y: &DVector<f64>, link: Link) -> Result<f64> {
    let (_, mu) = predict(gamma, design, link)?;
    if mu.len() != y.len() {
        return Err(Error::Dimension("outcome does not match the design".into()));
    }
    let ybar = y.mean();
    let denom: f64 = y.iter().map(|v| (v - ybar).powi(2)).sum();
    if denom <= 0.0 {
        return Err(Error::InvalidData("validation outcome is constant".into()));
    }
    Ok((y - mu).norm_squared() / denom)
}

pub fn evaluate(
    gamma: &DVector<f64>,
    cov: &DMatrix<f64>,
    design: &DMatrix<f64>,
    y: &DVector<f64>,
    true_prob: Option<&DVector<f64>>,
    link: Link,
) -> Result<MetricReport> {
    Ok(MetricReport {
        avg_pred_var: avg_prediction_variance(cov, design)?,
        sse: true_prob.map(|p| sse(gamma, design, p, link)).transpose()?,
        scaled_brier: scaled_brier(gamma, design, y, link)?,
        n_test: design.nrows(),
    })
}
