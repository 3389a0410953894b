//! Adaptive scale-weighted loss.
//!
//! Each channel's loss is multiplied by a weight `w_i = M * softmax(theta)_i`.
//! The weights are positive and always sum to the number of channels `M`,
//! so the weighted objective stays on the scale of a plain sum. `theta` is
//! initialized from the raw value range of each channel (channels that move
//! more in price terms start heavier) and is then learned jointly with the
//! forecasters.

use crate::autodiff::{Parameter, Tape, Tensor, Var};
use crate::error::{Error, Result};

const RANGE_EPS: f64 = 1e-12;

/// The learnable logits behind the channel weights.
#[derive(Debug, Clone, PartialEq)]
pub struct ScaleWeights {
    theta: Parameter,
    init_ranges: Vec<f64>,
}

impl ScaleWeights {
    /// `theta_i = ln(range_i) - mean_j ln(range_j)`, which makes the initial
    /// weights proportional to the ranges.
    pub fn from_ranges(ranges: &[f64]) -> Result<Self> {
        if ranges.is_empty() {
            return Err(Error::InvalidArgument("no channels to weight".into()));
        }
        if let Some(index) = ranges.iter().position(|r| !r.is_finite() || *r < 0.0) {
            return Err(Error::InvalidArgument(format!(
                "channel {index} has invalid range {}",
                ranges[index]
            )));
        }
        if ranges.iter().all(|r| *r == 0.0) {
            return Err(Error::InvalidArgument(
                "every channel has zero range".into(),
            ));
        }
        let logs: Vec<f64> = ranges.iter().map(|r| (r + RANGE_EPS).ln()).collect();
        let mean = logs.iter().sum::<f64>() / logs.len() as f64;
        let mut out = Self::from_theta(logs.iter().map(|l| l - mean).collect())?;
        out.init_ranges = ranges.to_vec();
        Ok(out)
    }

    /// Every weight equal to 1.
    pub fn uniform(channels: usize) -> Result<Self> {
        if channels == 0 {
            return Err(Error::InvalidArgument("no channels to weight".into()));
        }
        Self::from_theta(vec![0.0; channels])
    }

    pub fn from_theta(theta: Vec<f64>) -> Result<Self> {
        if theta.is_empty() {
            return Err(Error::InvalidArgument("no channels to weight".into()));
        }
        if let Some(index) = theta.iter().position(|t| !t.is_finite()) {
            return Err(Error::NonFinite { index });
        }
        Ok(Self {
            theta: Parameter::new("aswl.theta", Tensor::vector(theta)),
            init_ranges: Vec::new(),
        })
    }

    pub fn channels(&self) -> usize {
        self.theta.value.len()
    }

    /// Raw channel ranges used for initialization (empty when built
    /// directly from `theta`).
    pub fn init_ranges(&self) -> &[f64] {
        &self.init_ranges
    }

    pub fn theta(&self) -> &[f64] {
        self.theta.value.data()
    }

    pub fn parameter_mut(&mut self) -> &mut Parameter {
        &mut self.theta
    }

    /// Current weights; they sum to [`channels`](Self::channels).
    pub fn weights(&self) -> Vec<f64> {
        let theta = self.theta();
        let m = theta.len() as f64;
        let max = theta.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = theta.iter().map(|t| (t - max).exp()).collect();
        let s: f64 = e.iter().sum();
        e.iter().map(|ei| (m * ei) / s).collect()
    }

    /// `sum_i w_i * losses_i`.
    pub fn weighted_loss(&self, losses: &[f64]) -> Result<f64> {
        self.check_len(losses)?;
        Ok(self.weights().iter().zip(losses).map(|(w, l)| w * l).sum())
    }

    /// The weighted loss together with its partial derivatives with respect
    /// to each channel loss (the weights) and to `theta`.
    pub fn weighted_loss_with_grads(&self, losses: &[f64]) -> Result<WeightedLoss> {
        self.check_len(losses)?;
        let mut tape = Tape::new();
        let theta = tape.param(self.theta.value.clone());
        let w = Self::weights_on(&mut tape, theta)?;
        let l = tape.param(Tensor::vector(losses.to_vec()));
        let wl = tape.mul(w, l)?;
        let total = tape.sum_all(wl)?;
        let mut grads = tape.backward(total)?;
        Ok(WeightedLoss {
            total: tape.value(total).item().expect("scalar"),
            weights: tape.value(w).data().to_vec(),
            d_losses: grads.take(l).expect("trainable leaf").into_data(),
            d_theta: grads.take(theta).expect("trainable leaf").into_data(),
        })
    }

    /// Records `M * softmax(theta)` on a tape, with the same arithmetic as
    /// [`weights`](Self::weights).
    pub fn weights_on(tape: &mut Tape, theta: Var) -> Result<Var> {
        let values = tape.value(theta).data();
        let m = values.len() as f64;
        let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let shifted = tape.add_scalar(theta, -max)?;
        let e = tape.exp(shifted)?;
        let s = tape.sum_all(e)?;
        let scaled = tape.scale(e, m)?;
        tape.div_scalar(scaled, s)
    }

    fn check_len(&self, losses: &[f64]) -> Result<()> {
        if losses.len() != self.channels() {
            return Err(Error::LengthMismatch {
                left: losses.len(),
                right: self.channels(),
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WeightedLoss {
    pub total: f64,
    pub weights: Vec<f64>,
    pub d_losses: Vec<f64>,
    pub d_theta: Vec<f64>,
}
