//! Minibatch training for one forecaster per channel.

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::model::{ForecastModel, StepOutput};
use crate::aswl::ScaleWeights;
use crate::autodiff::{Adam, AdamConfig, Parameter};
use crate::error::{Error, Result};
use crate::series::WindowBatch;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 32,
            learning_rate: 1e-3,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument(
                "training.batch_size must be positive".into(),
            ));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "training.learning_rate must be a non-negative number, got {}",
                self.learning_rate
            )));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.learning_rate,
            ..AdamConfig::default()
        }
    }
}

/// Input/target rows of one channel, `[count, L]` and `[count, T]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelWindows {
    pub inputs: Vec<f64>,
    pub targets: Vec<f64>,
    pub count: usize,
    pub lookback: usize,
    pub horizon: usize,
}

impl ChannelWindows {
    pub fn from_batch(batch: &WindowBatch, channel: usize) -> Self {
        Self {
            inputs: batch.channel_inputs(channel),
            targets: batch.channel_targets(channel),
            count: batch.batch,
            lookback: batch.lookback,
            horizon: batch.horizon,
        }
    }

    /// Copies rows `order` into contiguous input and target buffers.
    fn gather(&self, order: &[usize]) -> (Vec<f64>, Vec<f64>) {
        let (l, t) = (self.lookback, self.horizon);
        let mut x = Vec::with_capacity(order.len() * l);
        let mut y = Vec::with_capacity(order.len() * t);
        for &i in order {
            x.extend_from_slice(&self.inputs[i * l..(i + 1) * l]);
            y.extend_from_slice(&self.targets[i * t..(i + 1) * t]);
        }
        (x, y)
    }
}

fn shuffled(count: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut order: Vec<usize> = (0..count).collect();
    order.shuffle(rng);
    order
}

fn apply_step(
    model: &mut ForecastModel,
    opt: &mut Adam,
    step: &StepOutput,
    scale: f64,
) -> Result<()> {
    model.zero_grad();
    for (p, g) in model.parameters_mut().iter_mut().zip(&step.grads) {
        p.accumulate(g, scale)?;
    }
    let mut refs: Vec<&mut Parameter> = model.parameters_mut().iter_mut().collect();
    opt.step(&mut refs)?;
    model.update_running_stats(&step.batch_stats, step.rows);
    Ok(())
}

/// One pass over shuffled minibatches of a single channel. Returns the mean
/// minibatch MSE.
pub fn train_epoch(
    model: &mut ForecastModel,
    data: &ChannelWindows,
    opt: &mut Adam,
    batch_size: usize,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    if data.count == 0 {
        return Err(Error::TooShort("no training windows".into()));
    }
    let order = shuffled(data.count, rng);
    let mut total = 0.0;
    let mut batches = 0;
    for chunk in order.chunks(batch_size.max(1)) {
        let (x, y) = data.gather(chunk);
        let step = model.loss_and_grads(&x, &y, chunk.len())?;
        apply_step(model, opt, &step, 1.0)?;
        total += step.loss;
        batches += 1;
    }
    Ok(total / batches as f64)
}

/// How per-channel losses are combined.
#[derive(Debug, Clone, PartialEq)]
pub enum LossWeighting {
    /// Plain sum of channel losses.
    Uniform,
    /// Learned scale weights; `frozen` keeps `theta` at its initial value.
    Adaptive { weights: ScaleWeights, frozen: bool },
}

/// Per-epoch summary of joint training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    /// Mean weighted minibatch loss.
    pub loss: f64,
    /// Mean unweighted minibatch MSE of each channel.
    pub channel_losses: Vec<f64>,
    /// Channel weights at the end of the epoch.
    pub weights: Vec<f64>,
    /// Largest `|sum(w) - M|` seen after any optimizer step of the epoch.
    pub max_mass_error: f64,
    /// Smallest weight seen after any optimizer step of the epoch.
    pub min_weight: f64,
}

/// Trains one forecaster per channel against a shared, possibly weighted
/// objective. Channels share the minibatch order so each step sees the same
/// time windows across the decomposition.
pub struct JointTrainer {
    models: Vec<ForecastModel>,
    optimizers: Vec<Adam>,
    weighting: LossWeighting,
    weight_optimizer: Adam,
    epochs_done: usize,
    pub history: Vec<EpochStats>,
}

impl JointTrainer {
    pub fn new(
        models: Vec<ForecastModel>,
        adam: AdamConfig,
        weighting: LossWeighting,
    ) -> Result<Self> {
        if models.is_empty() {
            return Err(Error::InvalidArgument(
                "joint training needs at least one model".into(),
            ));
        }
        if let LossWeighting::Adaptive { weights, .. } = &weighting {
            if weights.channels() != models.len() {
                return Err(Error::LengthMismatch {
                    left: weights.channels(),
                    right: models.len(),
                });
            }
        }
        Ok(Self {
            optimizers: models.iter().map(|_| Adam::new(adam)).collect(),
            models,
            weighting,
            weight_optimizer: Adam::new(adam),
            epochs_done: 0,
            history: Vec::new(),
        })
    }

    pub fn models(&self) -> &[ForecastModel] {
        &self.models
    }

    pub fn into_models(self) -> Vec<ForecastModel> {
        self.models
    }

    pub fn weighting(&self) -> &LossWeighting {
        &self.weighting
    }

    /// Current channel weights (all 1 without adaptive weighting).
    pub fn weights(&self) -> Vec<f64> {
        match &self.weighting {
            LossWeighting::Uniform => vec![1.0; self.models.len()],
            LossWeighting::Adaptive { weights, .. } => weights.weights(),
        }
    }

    pub fn train_epoch(
        &mut self,
        data: &WindowBatch,
        batch_size: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<EpochStats> {
        let m = self.models.len();
        if data.channels != m {
            return Err(Error::LengthMismatch {
                left: data.channels,
                right: m,
            });
        }
        if data.batch == 0 {
            return Err(Error::TooShort("no training windows".into()));
        }
        let channels: Vec<ChannelWindows> = (0..m)
            .map(|c| ChannelWindows::from_batch(data, c))
            .collect();
        let order = shuffled(data.batch, rng);
        let epoch = self.epochs_done;
        let mut loss_sum = 0.0;
        let mut channel_sums = vec![0.0; m];
        let mut batches = 0;
        let mut max_mass_error: f64 = 0.0;
        let mut min_weight = f64::INFINITY;

        for chunk in order.chunks(batch_size.max(1)) {
            let steps: Vec<StepOutput> = self
                .models
                .par_iter()
                .zip(&channels)
                .enumerate()
                .map(|(c, (model, ch))| {
                    let (x, y) = ch.gather(chunk);
                    model
                        .loss_and_grads(&x, &y, chunk.len())
                        .map_err(|e| match e {
                            Error::Diverged(msg) => {
                                Error::Diverged(format!("channel {c}, epoch {}: {msg}", epoch + 1))
                            }
                            other => other,
                        })
                })
                .collect::<Result<_>>()?;
            let losses: Vec<f64> = steps.iter().map(|s| s.loss).collect();

            let (total, scales, d_theta) = match &self.weighting {
                LossWeighting::Uniform => (losses.iter().sum::<f64>(), vec![1.0; m], None),
                LossWeighting::Adaptive { weights, frozen } => {
                    let out = weights.weighted_loss_with_grads(&losses)?;
                    let d_theta = (!frozen).then_some(out.d_theta);
                    (out.total, out.d_losses, d_theta)
                }
            };
            if !total.is_finite() {
                return Err(Error::Diverged(format!(
                    "joint loss is {total} in epoch {}",
                    epoch + 1
                )));
            }

            for (((model, opt), step), scale) in self
                .models
                .iter_mut()
                .zip(&mut self.optimizers)
                .zip(&steps)
                .zip(&scales)
            {
                apply_step(model, opt, step, *scale)?;
            }
            if let (Some(g), LossWeighting::Adaptive { weights, .. }) =
                (d_theta, &mut self.weighting)
            {
                let theta = weights.parameter_mut();
                theta.zero_grad();
                theta.accumulate(&crate::autodiff::Tensor::vector(g), 1.0)?;
                self.weight_optimizer.step(&mut [theta])?;
            }

            let w = self.weights();
            max_mass_error = max_mass_error.max((w.iter().sum::<f64>() - m as f64).abs());
            min_weight = w.iter().copied().fold(min_weight, f64::min);
            loss_sum += total;
            for (acc, l) in channel_sums.iter_mut().zip(&losses) {
                *acc += l;
            }
            batches += 1;
        }

        self.epochs_done += 1;
        let stats = EpochStats {
            epoch: self.epochs_done,
            loss: loss_sum / batches as f64,
            channel_losses: channel_sums.iter().map(|s| s / batches as f64).collect(),
            weights: self.weights(),
            max_mass_error,
            min_weight,
        };
        self.history.push(stats.clone());
        Ok(stats)
    }
}
