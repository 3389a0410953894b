//! Reference forecasters scored next to the composite model.
//!
//! Both produce rolling one-step forecasts: each test step sees the true
//! values of every earlier step.

use log::warn;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Relative singular-value threshold below which the AR design matrix is
/// treated as rank deficient.
const RANK_TOL: f64 = 1e-10;

/// Which baselines a backtest runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Baseline {
    Naive,
    LinearAr,
}

/// Persistence forecast: step `i` predicts the value observed just before it.
pub fn naive_forecast(history: &[f64], actual: &[f64]) -> Result<Vec<f64>> {
    let last = *history
        .last()
        .ok_or_else(|| Error::InvalidArgument("naive forecast needs a non-empty history".into()))?;
    Ok(std::iter::once(last)
        .chain(actual.iter().copied())
        .take(actual.len())
        .collect())
}

/// A fitted autoregression `x_t = c + sum_k phi_k x_{t-k}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArModel {
    pub intercept: f64,
    /// `phi_1..phi_p`, most recent lag first.
    pub coefficients: Vec<f64>,
    /// Mean squared in-sample residual.
    pub residual_variance: f64,
}

impl ArModel {
    /// Least-squares fit on `train`. Returns `Ok(None)` when the regression
    /// is rank deficient.
    pub fn fit(train: &[f64], order: usize) -> Result<Option<Self>> {
        if order == 0 || order >= train.len() {
            return Err(Error::InvalidArgument(format!(
                "AR order {order} must be in 1..{}",
                train.len()
            )));
        }
        let rows = train.len() - order;
        if rows < order + 1 {
            return Ok(None);
        }
        let x = DMatrix::from_fn(rows, order + 1, |r, c| {
            if c == 0 {
                1.0
            } else {
                train[order + r - c]
            }
        });
        let y = DVector::from_iterator(rows, train[order..].iter().copied());
        let svd = x.clone().svd(true, true);
        let max_sv = svd.singular_values.max();
        if !(max_sv > 0.0) || svd.singular_values.min() <= RANK_TOL * max_sv {
            return Ok(None);
        }
        let beta = svd
            .solve(&y, RANK_TOL * max_sv)
            .map_err(|e| Error::InvalidArgument(format!("AR least squares failed: {e}")))?;
        let residual = &y - &x * &beta;
        Ok(Some(Self {
            intercept: beta[0],
            coefficients: beta.iter().skip(1).copied().collect(),
            residual_variance: residual.norm_squared() / rows as f64,
        }))
    }

    /// One-step prediction from `history`, whose last element is the most
    /// recent value.
    pub fn predict_next(&self, history: &[f64]) -> f64 {
        let n = history.len();
        self.intercept
            + self
                .coefficients
                .iter()
                .enumerate()
                .map(|(k, phi)| phi * history[n - 1 - k])
                .sum::<f64>()
    }
}

/// Rolling one-step AR forecasts over `actual`, falling back to the naive
/// forecast when the fit is degenerate.
pub fn linear_ar_forecast(
    train: &[f64],
    order: usize,
    actual: &[f64],
) -> Result<(Vec<f64>, Option<ArModel>)> {
    let Some(model) = ArModel::fit(train, order)? else {
        warn!("AR({order}) design matrix is rank deficient; using the naive forecast instead");
        return Ok((naive_forecast(train, actual)?, None));
    };
    let mut history = train.to_vec();
    let mut out = Vec::with_capacity(actual.len());
    for &a in actual {
        out.push(model.predict_next(&history));
        history.push(a);
    }
    Ok((out, Some(model)))
}
