//! Forecast error metrics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

fn check(actual: &[f64], predicted: &[f64]) -> Result<()> {
    if actual.len() != predicted.len() {
        return Err(Error::LengthMismatch {
            left: actual.len(),
            right: predicted.len(),
        });
    }
    if actual.is_empty() {
        return Err(Error::InvalidArgument(
            "cannot score an empty forecast".into(),
        ));
    }
    Ok(())
}

/// Mean squared error.
pub fn mse(actual: &[f64], predicted: &[f64]) -> Result<f64> {
    check(actual, predicted)?;
    let sum: f64 = actual
        .iter()
        .zip(predicted)
        .map(|(a, p)| (a - p) * (a - p))
        .sum();
    Ok(sum / actual.len() as f64)
}

/// Symmetric MAPE, `(2/n) * sum |a - p| / (|a| + |p|)`, in `[0, 2]`.
/// Points where both values are zero contribute nothing.
pub fn smape(actual: &[f64], predicted: &[f64]) -> Result<f64> {
    check(actual, predicted)?;
    let sum: f64 = actual
        .iter()
        .zip(predicted)
        .map(|(a, p)| {
            let denom = a.abs() + p.abs();
            if denom == 0.0 {
                0.0
            } else {
                (a - p).abs() / denom
            }
        })
        .sum();
    Ok(2.0 * sum / actual.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricPair {
    pub mse: f64,
    pub smape: f64,
}

impl MetricPair {
    pub fn compute(actual: &[f64], predicted: &[f64]) -> Result<Self> {
        Ok(Self {
            mse: mse(actual, predicted)?,
            smape: smape(actual, predicted)?,
        })
    }

    /// Element-wise mean of several pairs.
    pub fn mean(pairs: &[MetricPair]) -> Option<Self> {
        if pairs.is_empty() {
            return None;
        }
        let n = pairs.len() as f64;
        Some(Self {
            mse: pairs.iter().map(|p| p.mse).sum::<f64>() / n,
            smape: pairs.iter().map(|p| p.smape).sum::<f64>() / n,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn examples() {
        assert_eq!(mse(&[1.0, -2.0], &[1.0, -2.0]).unwrap(), 0.0);
        assert_eq!(mse(&[0.0], &[2.0]).unwrap(), 4.0);
        assert_eq!(smape(&[3.0, 4.0], &[3.0, 4.0]).unwrap(), 0.0);
        assert!((smape(&[2.0], &[1.0]).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(smape(&[0.0, 1.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert_eq!(smape(&[0.0], &[0.0]).unwrap(), 0.0);
        assert_eq!(smape(&[1.0], &[-1.0]).unwrap(), 2.0);
    }

    #[test]
    fn errors() {
        assert!(matches!(
            mse(&[1.0], &[1.0, 2.0]),
            Err(Error::LengthMismatch { .. })
        ));
        assert!(smape(&[], &[]).is_err());
    }

    #[test]
    fn mean_of_pairs() {
        let m = MetricPair::mean(&[
            MetricPair {
                mse: 1.0,
                smape: 0.1,
            },
            MetricPair {
                mse: 3.0,
                smape: 0.3,
            },
        ])
        .unwrap();
        assert_eq!(m.mse, 2.0);
        assert!((m.smape - 0.2).abs() < 1e-15);
        assert!(MetricPair::mean(&[]).is_none());
    }

    proptest! {
        #[test]
        fn mse_matches_direct_sum(pairs in prop::collection::vec((-1e3f64..1e3, -1e3f64..1e3), 1..200)) {
            let (a, p): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
            let mut acc = 0.0;
            for i in 0..a.len() {
                acc += (a[i] - p[i]).powi(2);
            }
            let oracle = acc / a.len() as f64;
            let got = mse(&a, &p).unwrap();
            prop_assert!((got - oracle).abs() <= 1e-12 * oracle.max(1e-300));
        }

        #[test]
        fn smape_is_bounded(pairs in prop::collection::vec((-1e3f64..1e3, -1e3f64..1e3), 1..200)) {
            let (a, p): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
            let s = smape(&a, &p).unwrap();
            prop_assert!((0.0..=2.0).contains(&s));
        }
    }
}
