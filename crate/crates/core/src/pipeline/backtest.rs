use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::Serialize;

use super::artifacts::{
    write_columns, write_decomposition_csv, write_forecast_csv, write_json, write_text, Manifest,
};
use super::config::ExperimentConfig;
use super::period::{run_period, PeriodOutcome};
use super::report::{notes, summarize, CellFailure, CellResult, ExperimentReport, SeriesInfo};
use crate::error::{Error, Result, Stage, StageExt};
use crate::series::{split_periods, PriceSeries};

/// Result of [`run_backtest`]: the report plus in-memory cell outputs.
pub struct BacktestRun {
    pub report: ExperimentReport,
    /// One entry per cell in report order; `None` for failed cells.
    pub outcomes: Vec<Option<PeriodOutcome>>,
    /// Wall-clock seconds per cell, kept out of the report so reruns
    /// produce identical report files.
    pub cell_seconds: Vec<f64>,
}

#[derive(Serialize)]
struct Timing<'a> {
    total_seconds: f64,
    cells: Vec<CellTiming<'a>>,
}

#[derive(Serialize)]
struct CellTiming<'a> {
    period: usize,
    seed: u64,
    seconds: f64,
    status: &'a str,
}

/// Runs every period x seed cell. Failing cells are recorded in the report
/// and do not stop the others.
pub fn run_backtest_on(series: &PriceSeries, config: &ExperimentConfig) -> Result<BacktestRun> {
    config.validate()?;
    let b = &config.backtest;
    let splits = split_periods(series.len(), b.n_periods, b.train_fraction).stage(Stage::Split)?;
    let cells: Vec<(usize, u64)> = (0..splits.len())
        .flat_map(|p| b.seeds.iter().map(move |s| (p, *s)))
        .collect();

    let run_cells = || -> Vec<(Result<PeriodOutcome>, f64)> {
        cells
            .par_iter()
            .map(|&(p, seed)| {
                let start = Instant::now();
                let out = run_period(series, &splits[p], config, seed);
                (out, start.elapsed().as_secs_f64())
            })
            .collect()
    };
    let results = if b.workers > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(b.workers)
            .build()
            .map_err(|e| Error::Config(format!("cannot build worker pool: {e}")))?
            .install(run_cells)
    } else {
        run_cells()
    };

    let mut cell_results = Vec::with_capacity(cells.len());
    let mut outcomes = Vec::with_capacity(cells.len());
    let mut cell_seconds = Vec::with_capacity(cells.len());
    for ((p, seed), (res, secs)) in cells.iter().zip(results) {
        cell_seconds.push(secs);
        match res {
            Ok(o) => {
                cell_results.push(CellResult::Ok(Box::new(o.report.clone())));
                outcomes.push(Some(o));
            }
            Err(e) => {
                log::error!("period {p} seed {seed} failed: {e}");
                let stage = match &e {
                    Error::Stage { stage, .. } => Some(*stage),
                    _ => None,
                };
                cell_results.push(CellResult::Failed(CellFailure {
                    period: *p,
                    seed: *seed,
                    stage,
                    message: e.to_string(),
                }));
                outcomes.push(None);
            }
        }
    }

    let (periods, overall, overall_baselines) = summarize(splits.len(), &cell_results);
    let failed_cells = outcomes.iter().filter(|o| o.is_none()).count();
    let report = ExperimentReport {
        name: config.name.clone(),
        label: config.aswl.label().to_string(),
        decomposition_mode: if b.strict_causal {
            "strict-causal"
        } else {
            "look-ahead"
        }
        .to_string(),
        series: SeriesInfo {
            len: series.len(),
            start: series.dates()[0],
            end: *series.dates().last().expect("non-empty series"),
            dropped_rows: series.dropped,
        },
        config: config.clone(),
        cells: cell_results,
        periods,
        overall,
        overall_baselines,
        failed_cells,
        notes: notes(config),
    };
    Ok(BacktestRun {
        report,
        outcomes,
        cell_seconds,
    })
}

/// Loads the configured series and runs [`run_backtest_on`].
pub fn run_backtest(config: &ExperimentConfig) -> Result<BacktestRun> {
    let series = config.data.load().stage(Stage::Load)?;
    run_backtest_on(&series, config)
}

fn cell_dir(period: usize, seed: u64) -> PathBuf {
    PathBuf::from("cells").join(format!("period{period}_seed{seed}"))
}

impl BacktestRun {
    /// Writes the report, per-cell CSVs, plot data and a manifest into
    /// `dir`. Returns the paths written, relative to `dir`.
    pub fn write(&self, dir: &Path, command: &str) -> Result<Vec<PathBuf>> {
        let mut files: Vec<PathBuf> = Vec::new();
        let mut put = |rel: PathBuf| files.push(rel);

        write_json(&dir.join("report.json"), &self.report).stage(Stage::Write)?;
        put("report.json".into());
        write_text(&dir.join("report.txt"), &self.report.to_text()).stage(Stage::Write)?;
        put("report.txt".into());
        write_text(
            &dir.join("config.toml"),
            &self.report.config.to_toml_string()?,
        )
        .stage(Stage::Write)?;
        put("config.toml".into());

        for outcome in self.outcomes.iter().flatten() {
            let r = &outcome.report;
            let rel = cell_dir(r.period, r.seed);
            let abs = dir.join(&rel);
            let f = &outcome.forecast;
            let p = &outcome.prepared;
            let value_header = ["t", "value"].map(String::from);

            write_forecast_csv(&abs.join("forecast.csv"), &f.dates, &f.actual, &f.predicted)
                .stage(Stage::Write)?;
            put(rel.join("forecast.csv"));
            let span = &p.dates[..p.decomposition.modes[0].len()];
            write_decomposition_csv(&abs.join("decomposition.csv"), span, &p.decomposition.modes)
                .stage(Stage::Write)?;
            put(rel.join("decomposition.csv"));

            write_columns(
                &abs.join("plot_actual.csv"),
                &value_header,
                &f.dates,
                &[&f.actual],
            )
            .stage(Stage::Write)?;
            put(rel.join("plot_actual.csv"));
            write_columns(
                &abs.join("plot_predicted.csv"),
                &value_header,
                &f.dates,
                &[&f.predicted],
            )
            .stage(Stage::Write)?;
            put(rel.join("plot_predicted.csv"));
            for (k, (a, pr)) in f.mode_actual.iter().zip(&f.mode_predicted).enumerate() {
                let name = format!("plot_imf{k}_forecast.csv");
                write_forecast_csv(&abs.join(&name), &f.dates, a, pr).stage(Stage::Write)?;
                put(rel.join(name));
            }
            let epochs: Vec<usize> = (1..=r.epoch_losses.len()).collect();
            let loss_header = ["epoch", "loss"].map(String::from);
            write_columns(
                &abs.join("plot_loss.csv"),
                &loss_header,
                &epochs,
                &[&r.epoch_losses],
            )
            .stage(Stage::Write)?;
            put(rel.join("plot_loss.csv"));
        }

        let timing = Timing {
            total_seconds: self.cell_seconds.iter().sum(),
            cells: self
                .report
                .cells
                .iter()
                .zip(&self.cell_seconds)
                .map(|(c, s)| match c {
                    CellResult::Ok(r) => CellTiming {
                        period: r.period,
                        seed: r.seed,
                        seconds: *s,
                        status: "ok",
                    },
                    CellResult::Failed(f) => CellTiming {
                        period: f.period,
                        seed: f.seed,
                        seconds: *s,
                        status: "failed",
                    },
                })
                .collect(),
        };
        write_json(&dir.join("timing.json"), &timing).stage(Stage::Write)?;

        Manifest::write(
            dir,
            command,
            &self.report.config.backtest.seeds,
            &self.report.config,
            &files,
        )
        .stage(Stage::Write)?;
        Ok(files)
    }
}
