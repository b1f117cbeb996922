//! Pearson (PLCC) and Spearman (SRCC) correlation between predictions and targets.
//!
//! Raw Pearson is reported with no logistic remapping. Undefined correlations
//! (a constant input) are errors rather than zeros.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::Real;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CorrelationError {
    #[error("length mismatch: {0} predictions vs {1} targets")]
    LengthMismatch(usize, usize),
    #[error("need at least 2 pairs, got {0}")]
    TooFew(usize),
    #[error("correlation undefined: {0} input is constant")]
    Constant(&'static str),
    #[error("non-finite input value")]
    NonFinite,
}

fn validate<T: Real>(x: &[T], y: &[T]) -> Result<(), CorrelationError> {
    if x.len() != y.len() {
        return Err(CorrelationError::LengthMismatch(x.len(), y.len()));
    }
    if x.len() < 2 {
        return Err(CorrelationError::TooFew(x.len()));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(CorrelationError::NonFinite);
    }
    Ok(())
}

fn mean<T: Real>(v: &[T]) -> T {
    v.iter().copied().sum::<T>() / T::from_usize_lossy(v.len())
}

/// Pearson linear correlation coefficient.
pub fn plcc<T: Real>(x: &[T], y: &[T]) -> Result<T, CorrelationError> {
    validate(x, y)?;
    let mx = mean(x);
    let my = mean(y);
    let (mut sxy, mut sxx, mut syy) = (T::zero(), T::zero(), T::zero());
    for (&a, &b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == T::zero() {
        return Err(CorrelationError::Constant("first"));
    }
    if syy == T::zero() {
        return Err(CorrelationError::Constant("second"));
    }
    let r = sxy / (sxx * syy).sqrt();
    Ok(r.max(-T::one()).min(T::one()))
}

/// 1-based ranks; tied values share the mean of the positions they occupy.
pub fn ranks<T: Real>(x: &[T]) -> Vec<T> {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&a, &b| x[a].partial_cmp(&x[b]).unwrap_or(std::cmp::Ordering::Equal));
    let mut out = vec![T::zero(); x.len()];
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && x[order[end]] == x[order[start]] {
            end += 1;
        }
        // positions start+1 ..= end
        let avg = T::from_usize_lossy(start + 1 + end) / T::lit(2.0);
        for &i in &order[start..end] {
            out[i] = avg;
        }
        start = end;
    }
    out
}

/// Spearman rank-order correlation: Pearson over average ranks.
pub fn srcc<T: Real>(x: &[T], y: &[T]) -> Result<T, CorrelationError> {
    validate(x, y)?;
    plcc(&ranks(x), &ranks(y))
}

/// PLCC/SRCC of one metric channel.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Correlation {
    pub plcc: f64,
    pub srcc: f64,
    pub n: usize,
}

impl Correlation {
    pub fn compute(predictions: &[f64], targets: &[f64]) -> Result<Self, CorrelationError> {
        Ok(Correlation {
            plcc: plcc(predictions, targets)?,
            srcc: srcc(predictions, targets)?,
            n: predictions.len(),
        })
    }
}
