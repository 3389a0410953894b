//! Backtest flow: aggregation, failure isolation and report structure.

use chrono::NaiveDate;
use modecast::error::Stage;
use modecast::forecaster::ForecasterConfig;
use modecast::metrics::MetricPair;
use modecast::pipeline::{run_backtest_on, run_period, CellResult, ExperimentConfig};
use modecast::series::{split_periods, PriceSeries};
use modecast::synthetic::SyntheticConfig;
use modecast::Error;

fn tiny_config(modes: usize) -> ExperimentConfig {
    let mut c = ExperimentConfig::default();
    c.vmd.modes = modes;
    c.forecaster = ForecasterConfig {
        lookback: 16,
        patch_len: 4,
        stride: 4,
        d_model: 8,
        n_heads: 2,
        n_layers: 1,
        d_ff: 16,
        ..ForecasterConfig::default()
    };
    c.training.epochs = 2;
    c.training.batch_size = 16;
    c.backtest.seeds = vec![0];
    c
}

fn series(n: usize) -> PriceSeries {
    SyntheticConfig {
        n,
        ..SyntheticConfig::default()
    }
    .generate()
    .unwrap()
}

fn ok_reports(cells: &[CellResult]) -> Vec<&modecast::pipeline::PeriodReport> {
    cells.iter().filter_map(CellResult::report).collect()
}

#[test]
fn per_mode_metrics_have_one_row_per_mode() {
    let s = series(300);
    let config = tiny_config(3);
    let split = split_periods(s.len(), 1, 0.8).unwrap().remove(0);
    let out = run_period(&s, &split, &config, 0).unwrap();
    assert_eq!(out.report.mode_metrics.len(), 3);
    assert_eq!(out.forecast.mode_predicted.len(), 3);
    assert_eq!(out.report.n_test, out.forecast.predicted.len());
    let w = out.report.weights.as_ref().unwrap();
    assert_eq!(w.initial.len(), 3);
    assert!((w.r#final.iter().sum::<f64>() - 3.0).abs() < 1e-9);
}

#[test]
fn composite_forecast_is_sum_of_mode_forecasts() {
    let s = series(300);
    let config = tiny_config(2);
    let split = split_periods(s.len(), 1, 0.8).unwrap().remove(0);
    let f = run_period(&s, &split, &config, 1).unwrap().forecast;
    for i in 0..f.predicted.len() {
        let sum: f64 = f.mode_predicted.iter().map(|m| m[i]).sum();
        assert_eq!(sum.to_bits(), f.predicted[i].to_bits());
    }
}

#[test]
fn mode_truths_sum_to_reconstruction() {
    let s = series(300);
    let config = tiny_config(3);
    let split = split_periods(s.len(), 1, 0.8).unwrap().remove(0);
    let out = run_period(&s, &split, &config, 0).unwrap();
    assert!(
        out.report.aggregation_error <= 1e-9,
        "{}",
        out.report.aggregation_error
    );
    assert!(out.report.reconstruction_error < 0.1);
}

#[test]
fn five_periods_one_seed_give_five_reports_and_mean() {
    let s = series(800);
    let mut config = tiny_config(2);
    config.backtest.n_periods = 5;
    let run = run_backtest_on(&s, &config).unwrap();
    let reports = ok_reports(&run.report.cells);
    assert_eq!(reports.len(), 5);
    assert_eq!(run.report.failed_cells, 0);
    let pairs: Vec<MetricPair> = reports.iter().map(|r| r.metrics).collect();
    let mean = MetricPair::mean(&pairs).unwrap();
    let overall = run.report.overall.unwrap();
    assert!((overall.mse - mean.mse).abs() <= 1e-12 * mean.mse.max(1.0));
    assert!((overall.smape - mean.smape).abs() <= 1e-12);
    for (p, summary) in run.report.periods.iter().enumerate() {
        assert_eq!(summary.period, p);
        assert_eq!(summary.seeds_ok, 1);
        assert_eq!(summary.metrics.unwrap(), reports[p].metrics);
    }
}

#[test]
fn seeds_are_averaged_within_a_period() {
    let s = series(300);
    let mut config = tiny_config(2);
    config.backtest.n_periods = 1;
    config.backtest.seeds = vec![0, 1];
    let run = run_backtest_on(&s, &config).unwrap();
    let reports = ok_reports(&run.report.cells);
    assert_eq!(reports.len(), 2);
    assert_eq!(reports[0].seed, 0);
    assert_eq!(reports[1].seed, 1);
    assert_ne!(reports[0].metrics, reports[1].metrics);
    let summary = &run.report.periods[0];
    assert_eq!(summary.seeds_ok, 2);
    let m = summary.metrics.unwrap();
    assert!((m.mse - (reports[0].metrics.mse + reports[1].metrics.mse) / 2.0).abs() < 1e-12);
    // Baselines do not depend on the seed.
    assert_eq!(reports[0].baselines, reports[1].baselines);
}

#[test]
fn failing_cell_is_recorded_and_others_continue() {
    // The first period overflows the spectral solver; the second is ordinary.
    let mut values = SyntheticConfig {
        n: 400,
        ..SyntheticConfig::default()
    }
    .values()
    .unwrap();
    for v in &mut values[..200] {
        *v *= 1e200;
    }
    let s = PriceSeries::from_values(NaiveDate::from_ymd_opt(2001, 1, 1).unwrap(), values).unwrap();
    let mut config = tiny_config(2);
    config.backtest.n_periods = 2;
    let run = run_backtest_on(&s, &config).unwrap();
    assert_eq!(run.report.failed_cells, 1);
    match &run.report.cells[0] {
        CellResult::Failed(f) => {
            assert_eq!(f.period, 0);
            assert_eq!(f.stage, Some(Stage::Decompose));
            assert!(!f.message.is_empty());
        }
        other => panic!("expected failure, got {other:?}"),
    }
    assert!(run.report.cells[1].report().is_some());
    assert!(run.outcomes[0].is_none() && run.outcomes[1].is_some());
    assert!(run.report.periods[0].metrics.is_none());
    assert_eq!(run.report.overall, run.report.periods[1].metrics);
    assert!(run.report.to_text().contains("FAILED at decompose"));
}

#[test]
fn too_short_period_is_tagged_with_its_stage() {
    let s = series(60);
    let config = tiny_config(2);
    let split = split_periods(s.len(), 2, 0.5).unwrap().remove(0);
    let err = run_period(&s, &split, &config, 0).unwrap_err();
    match err {
        Error::Stage { stage, .. } => assert_eq!(stage, Stage::Window),
        other => panic!("expected stage error, got {other:?}"),
    }
}

#[test]
fn strict_causal_mode_runs_and_is_labelled() {
    let s = series(200);
    let mut config = tiny_config(2);
    config.vmd.max_iter = 50;
    config.backtest.n_periods = 1;
    config.backtest.strict_causal = true;
    let run = run_backtest_on(&s, &config).unwrap();
    assert_eq!(run.report.failed_cells, 0);
    assert_eq!(run.report.decomposition_mode, "strict-causal");
    let out = run.outcomes[0].as_ref().unwrap();
    assert_eq!(
        out.prepared.decomposition.modes[0].len(),
        out.prepared.n_train()
    );
    assert!(run.report.to_text().contains("Strict-causal"));
}

#[test]
fn override_switches_label() {
    let s = series(300);
    let mut config = tiny_config(2);
    config.backtest.n_periods = 1;
    config
        .apply_overrides(&["aswl.enabled=false".to_string()])
        .unwrap();
    let run = run_backtest_on(&s, &config).unwrap();
    assert_eq!(run.report.label, "ASWL-off");
    assert!(ok_reports(&run.report.cells)[0].weights.is_none());
    config
        .apply_overrides(&[
            "aswl.enabled=true".to_string(),
            "aswl.frozen=true".to_string(),
        ])
        .unwrap();
    assert_eq!(config.aswl.label(), "ASWL-frozen");
}

#[test]
fn written_run_has_manifest_covering_artifacts() {
    let s = series(300);
    let mut config = tiny_config(2);
    config.backtest.n_periods = 1;
    let run = run_backtest_on(&s, &config).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let files = run.write(dir.path(), "test").unwrap();
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("manifest.json")).unwrap())
            .unwrap();
    let listed = manifest["artifacts"].as_array().unwrap();
    assert_eq!(listed.len(), files.len());
    for entry in listed {
        let path = dir.path().join(entry["path"].as_str().unwrap());
        assert_eq!(
            modecast::pipeline::sha256_file(&path).unwrap(),
            entry["sha256"].as_str().unwrap()
        );
    }
    assert!(dir.path().join("timing.json").exists());
    assert!(dir
        .path()
        .join("cells/period0_seed0/plot_imf1_forecast.csv")
        .exists());
    let decomposition =
        std::fs::read_to_string(dir.path().join("cells/period0_seed0/decomposition.csv")).unwrap();
    assert!(decomposition.starts_with("t,imf0,imf1\n"));
}
