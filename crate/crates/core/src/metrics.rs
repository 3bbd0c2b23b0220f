//! Error measures between predicted and exact solution values.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricError {
    #[error("length mismatch: {pred} predictions vs {exact} reference values")]
    LengthMismatch { pred: usize, exact: usize },
    #[error("no points to compare")]
    EmptyInput,
    #[error("reference has zero norm")]
    ZeroReference,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorReport {
    pub relative_l2: f64,
    pub mean_abs_error: f64,
    pub mean_sq_error: f64,
    pub n_points: usize,
}

fn check(pred: &[f64], exact: &[f64]) -> Result<(), MetricError> {
    if pred.len() != exact.len() {
        return Err(MetricError::LengthMismatch {
            pred: pred.len(),
            exact: exact.len(),
        });
    }
    if pred.is_empty() {
        return Err(MetricError::EmptyInput);
    }
    Ok(())
}

/// `‖pred − exact‖₂ / ‖exact‖₂`.
pub fn relative_l2(pred: &[f64], exact: &[f64]) -> Result<f64, MetricError> {
    check(pred, exact)?;
    let den = exact.iter().map(|e| e * e).sum::<f64>();
    if den == 0.0 {
        return Err(MetricError::ZeroReference);
    }
    let num = pred
        .iter()
        .zip(exact)
        .map(|(p, e)| (p - e) * (p - e))
        .sum::<f64>();
    Ok((num / den).sqrt())
}

pub fn error_stats(pred: &[f64], exact: &[f64]) -> Result<ErrorReport, MetricError> {
    check(pred, exact)?;
    let n = pred.len() as f64;
    let (abs, sq) = pred.iter().zip(exact).fold((0.0, 0.0), |(a, s), (p, e)| {
        let d = p - e;
        (a + d.abs(), s + d * d)
    });
    Ok(ErrorReport {
        relative_l2: relative_l2(pred, exact)?,
        mean_abs_error: abs / n,
        mean_sq_error: sq / n,
        n_points: pred.len(),
    })
}

/// Percent error of an identified coefficient.
pub fn lambda_error(lambda_hat: f64, lambda_true: f64) -> Result<f64, MetricError> {
    if lambda_true == 0.0 {
        return Err(MetricError::ZeroReference);
    }
    Ok(100.0 * (lambda_hat - lambda_true).abs() / lambda_true.abs())
}
