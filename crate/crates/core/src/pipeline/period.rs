//! One backtest cell: a single period trained and scored under one seed.

use std::collections::BTreeMap;
use std::path::Path;

use chrono::NaiveDate;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::{ExperimentConfig, WeightInit};
use crate::aswl::ScaleWeights;
use crate::autodiff::Checkpoint;
use crate::baselines::{linear_ar_forecast, naive_forecast, Baseline};
use crate::error::{Error, Result, Stage, StageExt};
use crate::forecaster::{EpochStats, ForecastModel, JointTrainer, LossWeighting};
use crate::metrics::MetricPair;
use crate::series::{make_windows, NormalizationParams, PeriodSplit, PriceSeries, WindowBatch};
use crate::vmd::{decompose, VmdMetadata, VmdResult};

/// A period after decomposition, normalization and windowing.
#[derive(Debug, Clone)]
pub struct PreparedPeriod {
    pub split: PeriodSplit,
    /// Raw prices of the whole period (train then test).
    pub values: Vec<f64>,
    pub dates: Vec<NaiveDate>,
    /// Decomposition the training windows come from: the whole period, or
    /// only its training segment under strict causality.
    pub decomposition: VmdResult,
    /// Per-mode scaling fitted on the training segment.
    pub norms: Vec<NormalizationParams>,
    /// Normalized modes over `decomposition`'s span.
    pub normalized: Vec<Vec<f64>>,
    pub windows: WindowBatch,
    /// Raw range of each mode over the training segment.
    pub ranges: Vec<f64>,
    pub strict_causal: bool,
}

impl PreparedPeriod {
    pub fn n_train(&self) -> usize {
        self.split.train_len()
    }

    pub fn n_test(&self) -> usize {
        self.split.test_len()
    }

    pub fn channels(&self) -> usize {
        self.norms.len()
    }
}

/// Decomposes, normalizes and windows one period.
pub fn prepare_period(
    series: &PriceSeries,
    split: &PeriodSplit,
    config: &ExperimentConfig,
) -> Result<PreparedPeriod> {
    let block = split.block();
    let values = series.values()[block.clone()].to_vec();
    let dates = series.dates()[block].to_vec();
    let n_train = split.train_len();
    let strict = config.backtest.strict_causal;
    let (l, t) = (config.forecaster.lookback, config.forecaster.horizon);
    if n_train < l + t {
        return Err(Error::TooShort(format!(
            "period {} has {n_train} training points, fewer than lookback {l} + horizon {t}",
            split.period_index
        )))
        .stage(Stage::Window);
    }

    let span = if strict {
        &values[..n_train]
    } else {
        &values[..]
    };
    let decomposition = decompose(span, &config.vmd).stage(Stage::Decompose)?;

    let norms = decomposition
        .modes
        .iter()
        .map(|m| NormalizationParams::fit(&m[..n_train]))
        .collect::<Result<Vec<_>>>()
        .stage(Stage::Normalize)?;
    let normalized: Vec<Vec<f64>> = decomposition
        .modes
        .iter()
        .zip(&norms)
        .map(|(m, p)| p.apply(m))
        .collect();
    let ranges = norms.iter().map(|p| p.range()).collect();

    let train_channels: Vec<Vec<f64>> = normalized.iter().map(|m| m[..n_train].to_vec()).collect();
    let windows = make_windows(&train_channels, l, t).stage(Stage::Window)?;
    Ok(PreparedPeriod {
        split: split.clone(),
        values,
        dates,
        decomposition,
        norms,
        normalized,
        windows,
        ranges,
        strict_causal: strict,
    })
}

/// Seeds for one cell: one per channel model plus one for minibatch order.
fn cell_seeds(seed: u64, channels: usize) -> (Vec<u64>, u64) {
    let mut master = ChaCha8Rng::seed_from_u64(seed);
    let models = (0..channels).map(|_| master.next_u64()).collect();
    (models, master.next_u64())
}

/// ASWL weights at the start and end of training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightTrace {
    pub initial: Vec<f64>,
    pub r#final: Vec<f64>,
    /// Largest `|sum(w) - M|` after any optimizer step.
    pub max_mass_error: f64,
    /// Smallest weight after any optimizer step.
    pub min_weight: f64,
}

/// Trained channel models of one cell plus their training telemetry.
#[derive(Debug, Clone)]
pub struct TrainedPeriod {
    pub models: Vec<ForecastModel>,
    pub history: Vec<EpochStats>,
    pub weights: Option<WeightTrace>,
}

pub fn train_period(
    prep: &PreparedPeriod,
    config: &ExperimentConfig,
    seed: u64,
) -> Result<TrainedPeriod> {
    let m = prep.channels();
    let (model_seeds, order_seed) = cell_seeds(seed, m);
    let models = model_seeds
        .iter()
        .map(|s| ForecastModel::new(config.forecaster.clone(), *s))
        .collect::<Result<Vec<_>>>()?;
    let weighting = if config.aswl.enabled {
        let weights = match config.aswl.init {
            WeightInit::Ranges => ScaleWeights::from_ranges(&prep.ranges)?,
            WeightInit::Uniform => ScaleWeights::uniform(m)?,
        };
        LossWeighting::Adaptive {
            weights,
            frozen: config.aswl.frozen,
        }
    } else {
        LossWeighting::Uniform
    };
    let mut trainer = JointTrainer::new(models, config.training.adam(), weighting)?;
    let initial = trainer.weights();
    let mut rng = ChaCha8Rng::seed_from_u64(order_seed);
    for epoch in 0..config.training.epochs {
        let stats = trainer.train_epoch(&prep.windows, config.training.batch_size, &mut rng)?;
        log::debug!(
            "period {} seed {seed} epoch {}/{}: loss {:.6e}",
            prep.split.period_index,
            epoch + 1,
            config.training.epochs,
            stats.loss
        );
    }
    let weights = config.aswl.enabled.then(|| WeightTrace {
        initial,
        r#final: trainer.weights(),
        max_mass_error: trainer
            .history
            .iter()
            .map(|h| h.max_mass_error)
            .fold(0.0, f64::max),
        min_weight: trainer
            .history
            .iter()
            .map(|h| h.min_weight)
            .fold(f64::INFINITY, f64::min),
    });
    let history = trainer.history.clone();
    Ok(TrainedPeriod {
        models: trainer.into_models(),
        history,
        weights,
    })
}

/// Test-segment forecasts in price units.
#[derive(Debug, Clone, PartialEq)]
pub struct PeriodForecast {
    pub dates: Vec<NaiveDate>,
    pub actual: Vec<f64>,
    pub predicted: Vec<f64>,
    /// Per mode, the decomposed test values used as that mode's truth.
    pub mode_actual: Vec<Vec<f64>>,
    pub mode_predicted: Vec<Vec<f64>>,
}

/// Start offsets (within the period) of each forecast block.
fn forecast_origins(n_train: usize, n_test: usize, horizon: usize) -> Vec<usize> {
    (n_train..n_train + n_test).step_by(horizon).collect()
}

/// Rolling forecasts over the test segment. With horizon 1 every step sees
/// the true history; longer horizons forecast non-overlapping blocks.
pub fn forecast_period(
    prep: &PreparedPeriod,
    models: &[ForecastModel],
    config: &ExperimentConfig,
) -> Result<PeriodForecast> {
    let m = prep.channels();
    if models.len() != m {
        return Err(Error::LengthMismatch {
            left: models.len(),
            right: m,
        });
    }
    let (n_train, n_test) = (prep.n_train(), prep.n_test());
    let (l, t) = (config.forecaster.lookback, config.forecaster.horizon);
    let origins = forecast_origins(n_train, n_test, t);

    // Normalized lookback windows per channel, one row per origin.
    let mut windows: Vec<Vec<f64>> = vec![Vec::with_capacity(origins.len() * l); m];
    let mut mode_actual: Vec<Vec<f64>> = vec![Vec::with_capacity(n_test); m];
    if prep.strict_causal {
        for &o in &origins {
            let prefix = decompose(&prep.values[..o], &config.vmd)?;
            for c in 0..m {
                let w = prep.norms[c].apply(&prefix.modes[c][o - l..]);
                windows[c].extend_from_slice(&w);
            }
        }
        // With causal decomposition the per-mode truth is the final mode of
        // a decomposition that has seen the whole test segment.
        let full = decompose(&prep.values, &config.vmd)?;
        for c in 0..m {
            mode_actual[c].extend_from_slice(&full.modes[c][n_train..]);
        }
    } else {
        for &o in &origins {
            for c in 0..m {
                windows[c].extend_from_slice(&prep.normalized[c][o - l..o]);
            }
        }
        for c in 0..m {
            mode_actual[c].extend_from_slice(&prep.decomposition.modes[c][n_train..]);
        }
    }

    let mut mode_predicted = Vec::with_capacity(m);
    for c in 0..m {
        let normalized = models[c].predict_batch(&windows[c], origins.len())?;
        let mut raw = prep.norms[c].invert(&normalized);
        raw.truncate(n_test);
        mode_predicted.push(raw);
    }
    let predicted: Vec<f64> = (0..n_test)
        .map(|i| mode_predicted.iter().map(|p| p[i]).sum())
        .collect();
    if let Some(index) = predicted.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite { index });
    }
    Ok(PeriodForecast {
        dates: prep.dates[n_train..].to_vec(),
        actual: prep.values[n_train..].to_vec(),
        predicted,
        mode_actual,
        mode_predicted,
    })
}

/// Everything reported for one successful cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PeriodReport {
    pub period: usize,
    pub seed: u64,
    pub train_start: NaiveDate,
    pub test_start: NaiveDate,
    pub test_end: NaiveDate,
    pub n_train: usize,
    pub n_test: usize,
    pub vmd: VmdMetadata,
    /// Relative L2 error of the decomposition's reconstruction.
    pub reconstruction_error: f64,
    /// Largest gap between the summed test modes and the reconstruction.
    pub aggregation_error: f64,
    pub metrics: MetricPair,
    pub mode_metrics: Vec<MetricPair>,
    pub baselines: BTreeMap<String, MetricPair>,
    pub weights: Option<WeightTrace>,
    pub epoch_losses: Vec<f64>,
}

/// A finished cell: report plus the artifacts written to disk.
#[derive(Debug, Clone)]
pub struct PeriodOutcome {
    pub report: PeriodReport,
    pub forecast: PeriodForecast,
    pub prepared: PreparedPeriod,
    pub trained: TrainedPeriod,
}

fn relative_l2(reference: &[f64], approx: &[f64]) -> f64 {
    let num: f64 = reference
        .iter()
        .zip(approx)
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    let den: f64 = reference.iter().map(|a| a * a).sum();
    if den == 0.0 {
        num.sqrt()
    } else {
        (num / den).sqrt()
    }
}

pub fn baseline_name(b: Baseline) -> &'static str {
    match b {
        Baseline::Naive => "naive",
        Baseline::LinearAr => "linear_ar",
    }
}

pub fn score_period(
    prep: &PreparedPeriod,
    trained: &TrainedPeriod,
    forecast: &PeriodForecast,
    config: &ExperimentConfig,
    seed: u64,
) -> Result<PeriodReport> {
    let n_train = prep.n_train();
    let train = &prep.values[..n_train];
    let metrics = MetricPair::compute(&forecast.actual, &forecast.predicted)?;
    let mode_metrics = forecast
        .mode_actual
        .iter()
        .zip(&forecast.mode_predicted)
        .map(|(a, p)| MetricPair::compute(a, p))
        .collect::<Result<Vec<_>>>()?;
    let mut baselines = BTreeMap::new();
    for b in &config.backtest.baselines {
        let predicted = match b {
            Baseline::Naive => naive_forecast(train, &forecast.actual)?,
            Baseline::LinearAr => {
                linear_ar_forecast(train, config.backtest.ar_order, &forecast.actual)?.0
            }
        };
        baselines.insert(
            baseline_name(*b).to_string(),
            MetricPair::compute(&forecast.actual, &predicted)?,
        );
    }

    let reconstruction = prep.decomposition.reconstruction();
    let span = &prep.values[..reconstruction.len()];
    let reconstruction_error = relative_l2(span, &reconstruction);
    let aggregation_error = if prep.strict_causal {
        0.0
    } else {
        (0..forecast.actual.len())
            .map(|i| {
                let summed: f64 = forecast.mode_actual.iter().map(|m| m[i]).sum();
                (summed - reconstruction[n_train + i]).abs()
            })
            .fold(0.0, f64::max)
    };

    Ok(PeriodReport {
        period: prep.split.period_index,
        seed,
        train_start: prep.dates[0],
        test_start: prep.dates[n_train],
        test_end: *prep.dates.last().expect("non-empty period"),
        n_train,
        n_test: prep.n_test(),
        vmd: prep.decomposition.metadata(&config.vmd),
        reconstruction_error,
        aggregation_error,
        metrics,
        mode_metrics,
        baselines,
        weights: trained.weights.clone(),
        epoch_losses: trained.history.iter().map(|h| h.loss).collect(),
    })
}

/// Runs every stage for one period and seed.
pub fn run_period(
    series: &PriceSeries,
    split: &PeriodSplit,
    config: &ExperimentConfig,
    seed: u64,
) -> Result<PeriodOutcome> {
    let prepared = prepare_period(series, split, config)?;
    let trained = train_period(&prepared, config, seed).stage(Stage::Train)?;
    let forecast = forecast_period(&prepared, &trained.models, config).stage(Stage::Forecast)?;
    let report = score_period(&prepared, &trained, &forecast, config, seed).stage(Stage::Score)?;
    Ok(PeriodOutcome {
        report,
        forecast,
        prepared,
        trained,
    })
}

const BUNDLE_FILE: &str = "bundle.json";

/// Trained models of one cell, saved so forecasting can run later.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelBundle {
    pub config: ExperimentConfig,
    pub period: usize,
    pub seed: u64,
    pub norms: Vec<NormalizationParams>,
    pub epochs_trained: usize,
}

impl ModelBundle {
    fn checkpoint_name(channel: usize) -> String {
        format!("mode{channel}.ckpt")
    }

    /// Writes `bundle.json` and one checkpoint per mode into `dir`.
    pub fn save(&self, models: &[ForecastModel], dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (c, model) in models.iter().enumerate() {
            let meta = serde_json::json!({
                "seed": self.seed,
                "period": self.period,
                "channel": c,
                "epochs_trained": self.epochs_trained,
            });
            model
                .to_checkpoint(meta)?
                .save(dir.join(Self::checkpoint_name(c)))?;
        }
        let path = dir.join(BUNDLE_FILE);
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<(Self, Vec<ForecastModel>)> {
        let path = dir.join(BUNDLE_FILE);
        if !path.exists() {
            return Err(Error::MissingFile(path));
        }
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let bundle: Self = serde_json::from_str(&text)?;
        let models = (0..bundle.norms.len())
            .map(|c| {
                ForecastModel::from_checkpoint(&Checkpoint::load(
                    dir.join(Self::checkpoint_name(c)),
                )?)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok((bundle, models))
    }
}
