//! Regression error metrics and maximum drawdown.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::Scalar;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MetricsError {
    #[error("series lengths differ: {actual} actual vs {predicted} predicted")]
    LengthMismatch { actual: usize, predicted: usize },
    #[error("empty series")]
    Empty,
    #[error("actual value at index {index} is zero")]
    ZeroActual { index: usize },
    #[error("portfolio value at index {index} is not positive")]
    NonPositiveValue { index: usize },
}

fn check<T>(actual: &[T], predicted: &[T]) -> Result<(), MetricsError> {
    if actual.len() != predicted.len() {
        return Err(MetricsError::LengthMismatch {
            actual: actual.len(),
            predicted: predicted.len(),
        });
    }
    if actual.is_empty() {
        return Err(MetricsError::Empty);
    }
    Ok(())
}

fn count<T: Scalar>(n: usize) -> T {
    T::from_usize(n).expect("length representable")
}

pub fn rmse<T: Scalar>(actual: &[T], predicted: &[T]) -> Result<T, MetricsError> {
    check(actual, predicted)?;
    let sse: T = actual
        .iter()
        .zip(predicted)
        .map(|(&y, &p)| (y - p) * (y - p))
        .sum();
    Ok((sse / count(actual.len())).sqrt())
}

/// Mean absolute percentage error, in percent.
pub fn mape<T: Scalar>(actual: &[T], predicted: &[T]) -> Result<T, MetricsError> {
    check(actual, predicted)?;
    if let Some(index) = actual.iter().position(|y| y.is_zero()) {
        return Err(MetricsError::ZeroActual { index });
    }
    let total: T = actual
        .iter()
        .zip(predicted)
        .map(|(&y, &p)| ((y - p) / y).abs())
        .sum();
    Ok(T::lit(100.0) * total / count(actual.len()))
}

pub fn mae<T: Scalar>(actual: &[T], predicted: &[T]) -> Result<T, MetricsError> {
    check(actual, predicted)?;
    let total: T = actual.iter().zip(predicted).map(|(&y, &p)| (y - p).abs()).sum();
    Ok(total / count(actual.len()))
}

/// Largest fractional decline from a running peak, in `[0, 1]`.
pub fn mdd<T: Scalar>(networth: &[T]) -> Result<T, MetricsError> {
    if networth.is_empty() {
        return Err(MetricsError::Empty);
    }
    if let Some(index) = networth.iter().position(|&v| !(v > T::zero())) {
        return Err(MetricsError::NonPositiveValue { index });
    }
    let mut peak = networth[0];
    let mut worst = T::zero();
    for &v in networth {
        peak = peak.max(v);
        worst = worst.max((peak - v) / peak);
    }
    Ok(worst)
}

/// RMSE, MAPE and MAE of one prediction series.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricReport<T> {
    pub rmse: T,
    /// Percent.
    pub mape: T,
    pub mae: T,
    pub n: usize,
}

impl<T: Scalar> MetricReport<T> {
    pub fn compute(actual: &[T], predicted: &[T]) -> Result<Self, MetricsError> {
        Ok(Self {
            rmse: rmse(actual, predicted)?,
            mape: mape(actual, predicted)?,
            mae: mae(actual, predicted)?,
            n: actual.len(),
        })
    }
}
