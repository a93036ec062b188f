//! Order-stable reductions and the bias/variance split of estimation errors.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Pairwise (cascade) summation in a fixed split order, so a given slice
/// always produces the same bits.
pub fn pairwise_sum(values: &[f64]) -> f64 {
    const LEAF: usize = 8;
    if values.len() <= LEAF {
        return values.iter().fold(0.0, |acc, x| acc + x);
    }
    let (left, right) = values.split_at(values.len() / 2);
    pairwise_sum(left) + pairwise_sum(right)
}

pub fn mean(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::Empty("values"));
    }
    Ok(pairwise_sum(values) / values.len() as f64)
}

/// `bias² = (mean e)²` and population variance of `e = estimate − truth`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ErrorSplit {
    pub mse: f64,
    pub bias2: f64,
    pub var: f64,
}

impl ErrorSplit {
    pub fn of_errors(errors: &[f64]) -> Result<Self> {
        let m = mean(errors)?;
        let squares: Vec<f64> = errors.iter().map(|e| e * e).collect();
        let centred: Vec<f64> = errors.iter().map(|e| (e - m) * (e - m)).collect();
        Ok(ErrorSplit {
            mse: mean(&squares)?,
            bias2: m * m,
            var: mean(&centred)?,
        })
    }

    pub fn of(estimates: &[f64], truths: &[f64]) -> Result<Self> {
        if estimates.len() != truths.len() {
            return Err(Error::dims(truths.len(), estimates.len()));
        }
        let errors: Vec<f64> = estimates.iter().zip(truths).map(|(e, t)| e - t).collect();
        Self::of_errors(&errors)
    }

    /// Share of the MSE carried by the bias term.
    pub fn bias_fraction(&self) -> f64 {
        if self.mse > 0.0 {
            self.bias2 / self.mse
        } else {
            0.0
        }
    }
}

/// Azimuth and velocity error splits for paired estimates and truths
/// `(θ, v)`.
pub fn bias_variance_decomposition(estimates: &[(f64, f64)], truths: &[(f64, f64)]) -> Result<(ErrorSplit, ErrorSplit)> {
    if estimates.len() != truths.len() {
        return Err(Error::dims(truths.len(), estimates.len()));
    }
    let (theta_hat, v_hat): (Vec<f64>, Vec<f64>) = estimates.iter().copied().unzip();
    let (theta, v): (Vec<f64>, Vec<f64>) = truths.iter().copied().unzip();
    Ok((ErrorSplit::of(&theta_hat, &theta)?, ErrorSplit::of(&v_hat, &v)?))
}
