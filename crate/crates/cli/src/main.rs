//! `modecast` command-line front end.
//!
//! Exit codes: 0 success, 1 internal failure, 2 bad input or config.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use modecast::error::{Stage, StageExt};
use modecast::metrics::MetricPair;
use modecast::pipeline::{
    forecast_period, prepare_period, train_period, write_columns, write_decomposition_csv,
    write_forecast_csv, write_json, write_text, ExperimentConfig, ExperimentReport, Manifest,
    ModelBundle,
};
use modecast::series::split_periods;
use modecast::vmd::decompose;
use modecast::{Error, Result};
use serde_json::json;

#[derive(Parser)]
#[command(
    name = "modecast",
    version,
    about = "Decomposition-ensemble forecasting toolkit"
)]
struct Cli {
    /// More log output (-v info, -vv debug, -vvv trace).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Experiment config (TOML).
    #[arg(short, long)]
    config: PathBuf,
    /// Dotted-path override, e.g. `training.epochs=5`. Repeatable.
    #[arg(short = 'o', long = "override", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Output directory.
    #[arg(long, env = "MODECAST_OUT", default_value = "modecast-out")]
    out: PathBuf,
    /// Replaces the configured seed list with this single seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Decompose the configured series (or one period of it) into modes.
    Decompose {
        #[command(flatten)]
        common: Common,
        /// Period index; the whole series when omitted.
        #[arg(long)]
        period: Option<usize>,
    },
    /// Train the per-mode forecasters of one period and save them.
    Train {
        #[command(flatten)]
        common: Common,
        /// Period index; the last period when omitted.
        #[arg(long)]
        period: Option<usize>,
    },
    /// Forecast the test segment of a trained period.
    Forecast {
        /// Directory written by `train`.
        #[arg(long)]
        model: PathBuf,
        #[arg(long, env = "MODECAST_OUT", default_value = "modecast-out")]
        out: PathBuf,
    },
    /// Score a forecast CSV against an actual CSV.
    Evaluate {
        /// CSV holding the forecast (column `predicted`, else the last column).
        #[arg(long)]
        forecast: PathBuf,
        /// CSV holding the truth (column `actual`, else the last column).
        #[arg(long)]
        actual: PathBuf,
        #[arg(long, env = "MODECAST_OUT", default_value = "modecast-out")]
        out: PathBuf,
    },
    /// Run the full rolling backtest over all periods and seeds.
    Backtest {
        #[command(flatten)]
        common: Common,
    },
    /// Render the text report of a finished backtest.
    Report {
        /// Directory written by `backtest`.
        #[arg(long)]
        run: PathBuf,
        #[arg(long, env = "MODECAST_OUT", default_value = "modecast-out")]
        out: PathBuf,
    },
}

fn command_line() -> String {
    std::env::args().collect::<Vec<_>>().join(" ")
}

fn load_config(common: &Common) -> Result<ExperimentConfig> {
    let mut config = ExperimentConfig::load(&common.config)?;
    config.apply_overrides(&common.overrides)?;
    if let Some(seed) = common.seed {
        config.backtest.seeds = vec![seed];
    }
    config.validate()?;
    Ok(config)
}

fn manifest(out: &Path, seeds: &[u64], config: serde_json::Value, files: &[PathBuf]) -> Result<()> {
    Manifest::write(out, &command_line(), seeds, &config, files).stage(Stage::Write)?;
    Ok(())
}

fn run_decompose(common: &Common, period: Option<usize>) -> Result<ExitCode> {
    let config = load_config(common)?;
    let series = config.data.load().stage(Stage::Load)?;
    let range = match period {
        Some(p) => {
            let splits = split_periods(
                series.len(),
                config.backtest.n_periods,
                config.backtest.train_fraction,
            )
            .stage(Stage::Split)?;
            let split = splits.get(p).ok_or_else(|| {
                Error::InvalidArgument(format!("period {p} out of range (have {})", splits.len()))
            })?;
            split.block()
        }
        None => 0..series.len(),
    };
    let values = &series.values()[range.clone()];
    let result = decompose(values, &config.vmd).stage(Stage::Decompose)?;
    let out = &common.out;
    write_decomposition_csv(
        &out.join("decomposition.csv"),
        &series.dates()[range],
        &result.modes,
    )
    .stage(Stage::Write)?;
    write_json(
        &out.join("decomposition.json"),
        &result.metadata(&config.vmd),
    )
    .stage(Stage::Write)?;
    manifest(
        out,
        &[],
        json!(config),
        &["decomposition.csv".into(), "decomposition.json".into()],
    )?;
    println!(
        "{} modes, {} iterations, converged: {}",
        result.n_modes(),
        result.iterations,
        result.converged
    );
    for (k, w) in result.omegas.iter().enumerate() {
        println!("imf{k} omega {w:.6}");
    }
    Ok(ExitCode::SUCCESS)
}

fn run_train(common: &Common, period: Option<usize>) -> Result<ExitCode> {
    let config = load_config(common)?;
    let series = config.data.load().stage(Stage::Load)?;
    let splits = split_periods(
        series.len(),
        config.backtest.n_periods,
        config.backtest.train_fraction,
    )
    .stage(Stage::Split)?;
    let p = period.unwrap_or(splits.len() - 1);
    let split = splits.get(p).ok_or_else(|| {
        Error::InvalidArgument(format!("period {p} out of range (have {})", splits.len()))
    })?;
    let seed = config.backtest.seeds[0];
    let prep = prepare_period(&series, split, &config)?;
    let trained = train_period(&prep, &config, seed).stage(Stage::Train)?;

    let out = &common.out;
    let bundle = ModelBundle {
        config: config.clone(),
        period: p,
        seed,
        norms: prep.norms.clone(),
        epochs_trained: config.training.epochs,
    };
    bundle
        .save(&trained.models, &out.join("model"))
        .stage(Stage::Write)?;
    let losses: Vec<f64> = trained.history.iter().map(|h| h.loss).collect();
    let epochs: Vec<usize> = (1..=losses.len()).collect();
    write_columns(
        &out.join("plot_loss.csv"),
        &["epoch", "loss"].map(String::from),
        &epochs,
        &[&losses],
    )
    .stage(Stage::Write)?;
    let mut files: Vec<PathBuf> = vec!["plot_loss.csv".into(), "model/bundle.json".into()];
    files.extend((0..trained.models.len()).map(|c| PathBuf::from(format!("model/mode{c}.ckpt"))));
    manifest(out, &[seed], json!(config), &files)?;
    println!(
        "period {p} seed {seed}: {} models trained, final loss {:.6e}",
        trained.models.len(),
        losses.last().copied().unwrap_or(f64::NAN)
    );
    if let Some(w) = &trained.weights {
        println!("weights {:?} -> {:?}", w.initial, w.r#final);
    }
    Ok(ExitCode::SUCCESS)
}

fn run_forecast(model: &Path, out: &Path) -> Result<ExitCode> {
    let (bundle, models) = ModelBundle::load(model)?;
    let config = &bundle.config;
    let series = config.data.load().stage(Stage::Load)?;
    let splits = split_periods(
        series.len(),
        config.backtest.n_periods,
        config.backtest.train_fraction,
    )
    .stage(Stage::Split)?;
    let split = splits.get(bundle.period).ok_or_else(|| {
        Error::InvalidArgument(format!("bundle period {} out of range", bundle.period))
    })?;
    let prep = prepare_period(&series, split, config)?;
    if prep.norms != bundle.norms {
        return Err(Error::InvalidArgument(
            "data no longer matches the normalization the models were trained with".into(),
        ));
    }
    let f = forecast_period(&prep, &models, config).stage(Stage::Forecast)?;
    write_forecast_csv(&out.join("forecast.csv"), &f.dates, &f.actual, &f.predicted)
        .stage(Stage::Write)?;
    let mut files: Vec<PathBuf> = vec!["forecast.csv".into()];
    for (k, (a, p)) in f.mode_actual.iter().zip(&f.mode_predicted).enumerate() {
        let name = format!("plot_imf{k}_forecast.csv");
        write_forecast_csv(&out.join(&name), &f.dates, a, p).stage(Stage::Write)?;
        files.push(name.into());
    }
    let metrics = MetricPair::compute(&f.actual, &f.predicted).stage(Stage::Score)?;
    write_json(&out.join("metrics.json"), &metrics).stage(Stage::Write)?;
    files.push("metrics.json".into());
    manifest(out, &[bundle.seed], json!(config), &files)?;
    println!("{} forecasts", f.predicted.len());
    println!("mse {:?}", metrics.mse);
    println!("smape {:?}", metrics.smape);
    Ok(ExitCode::SUCCESS)
}

/// Reads the column named `preferred`, or the last column when absent.
fn read_column(path: &Path, preferred: &str) -> Result<Vec<f64>> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)?;
    let headers = reader.headers()?.clone();
    if headers.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "{}: no columns",
            path.display()
        )));
    }
    let idx = headers
        .iter()
        .position(|h| h == preferred)
        .unwrap_or(headers.len() - 1);
    let mut values = Vec::new();
    for (line, record) in reader.records().enumerate() {
        let record = record?;
        let raw = record.get(idx).unwrap_or("");
        let v: f64 = raw.parse().map_err(|_| {
            Error::InvalidArgument(format!(
                "{}: row {}: `{raw}` is not a number",
                path.display(),
                line + 2
            ))
        })?;
        values.push(v);
    }
    Ok(values)
}

fn run_evaluate(forecast: &Path, actual: &Path, out: &Path) -> Result<ExitCode> {
    let predicted = read_column(forecast, "predicted")?;
    let truth = read_column(actual, "actual")?;
    let metrics = MetricPair::compute(&truth, &predicted)?;
    write_json(
        &out.join("metrics.json"),
        &json!({
            "forecast": forecast,
            "actual": actual,
            "n": truth.len(),
            "mse": metrics.mse,
            "smape": metrics.smape,
        }),
    )
    .stage(Stage::Write)?;
    manifest(out, &[], json!({}), &["metrics.json".into()])?;
    println!("mse {:?}", metrics.mse);
    println!("smape {:?}", metrics.smape);
    Ok(ExitCode::SUCCESS)
}

fn run_backtest(common: &Common) -> Result<ExitCode> {
    let config = load_config(common)?;
    let run = modecast::pipeline::run_backtest(&config)?;
    run.write(&common.out, &command_line())?;
    print!("{}", run.report.to_text());
    if run.report.failed_cells > 0 {
        eprintln!("{} cell(s) failed", run.report.failed_cells);
        return Ok(ExitCode::from(1));
    }
    Ok(ExitCode::SUCCESS)
}

fn run_report(run: &Path, out: &Path) -> Result<ExitCode> {
    let path = run.join("report.json");
    if !path.exists() {
        return Err(Error::MissingFile(path));
    }
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let report: ExperimentReport = serde_json::from_str(&text)?;
    let rendered = report.to_text();
    write_text(&out.join("report.txt"), &rendered).stage(Stage::Write)?;
    manifest(
        out,
        &report.config.backtest.seeds,
        json!(report.config),
        &["report.txt".into()],
    )?;
    print!("{rendered}");
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        2 => "debug",
        _ => "trace",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();

    let result = match &cli.command {
        Command::Decompose { common, period } => run_decompose(common, *period),
        Command::Train { common, period } => run_train(common, *period),
        Command::Forecast { model, out } => run_forecast(model, out),
        Command::Evaluate {
            forecast,
            actual,
            out,
        } => run_evaluate(forecast, actual, out),
        Command::Backtest { common } => run_backtest(common),
        Command::Report { run, out } => run_report(run, out),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_user_error() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
