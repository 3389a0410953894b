//! The decompose, normalize, window, train, forecast and score flow, run
//! over rolling periods and seeds.

mod artifacts;
mod backtest;
mod config;
mod period;
mod report;

pub use artifacts::{
    sha256_file, write_columns, write_decomposition_csv, write_forecast_csv, write_json,
    write_text, ArtifactHash, Manifest,
};
pub use backtest::{run_backtest, run_backtest_on, BacktestRun};
pub use config::{Aggregate, AswlConfig, BacktestConfig, DataConfig, ExperimentConfig, WeightInit};
pub use period::{
    baseline_name, forecast_period, prepare_period, run_period, score_period, train_period,
    ModelBundle, PeriodForecast, PeriodOutcome, PeriodReport, PreparedPeriod, TrainedPeriod,
    WeightTrace,
};
pub use report::{CellFailure, CellResult, ExperimentReport, PeriodSummary, SeriesInfo};
