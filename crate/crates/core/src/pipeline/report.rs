//! Experiment report: per-cell results, aggregates and text rendering.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use super::period::PeriodReport;
use crate::error::Stage;
use crate::metrics::MetricPair;

/// A cell that did not finish.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellFailure {
    pub period: usize,
    pub seed: u64,
    pub stage: Option<Stage>,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum CellResult {
    Ok(Box<PeriodReport>),
    Failed(CellFailure),
}

impl CellResult {
    pub fn report(&self) -> Option<&PeriodReport> {
        match self {
            CellResult::Ok(r) => Some(r),
            CellResult::Failed(_) => None,
        }
    }
}

/// Mean over the successful seeds of one period.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PeriodSummary {
    pub period: usize,
    pub seeds_ok: usize,
    pub metrics: Option<MetricPair>,
    pub baselines: BTreeMap<String, MetricPair>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeriesInfo {
    pub len: usize,
    pub start: NaiveDate,
    pub end: NaiveDate,
    pub dropped_rows: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub name: String,
    /// `ASWL-on`, `ASWL-off` or `ASWL-frozen`.
    pub label: String,
    /// `look-ahead` (whole period decomposed) or `strict-causal`.
    pub decomposition_mode: String,
    pub series: SeriesInfo,
    pub config: ExperimentConfig,
    pub cells: Vec<CellResult>,
    pub periods: Vec<PeriodSummary>,
    /// Mean of the per-period means.
    pub overall: Option<MetricPair>,
    pub overall_baselines: BTreeMap<String, MetricPair>,
    pub failed_cells: usize,
    pub notes: Vec<String>,
}

pub(crate) fn notes(config: &ExperimentConfig) -> Vec<String> {
    let mut notes = vec![
        "Errors are computed on the raw price scale.".to_string(),
        "sMAPE = (2/n) * sum |x - x_hat| / (|x| + |x_hat|); points where both are zero contribute 0.".to_string(),
    ];
    if config.backtest.strict_causal {
        notes.push(
            "Strict-causal mode: each test step decomposes only the data observed before it."
                .to_string(),
        );
    } else {
        notes.push(
            "Look-ahead mode: each period is decomposed in full (train and test) before training, \
             so the training modes carry information from the test segment."
                .to_string(),
        );
    }
    notes
}

fn mean_baselines<'a>(
    reports: impl Iterator<Item = &'a BTreeMap<String, MetricPair>> + Clone,
) -> BTreeMap<String, MetricPair> {
    let mut names: Vec<&String> = reports.clone().flat_map(|b| b.keys()).collect();
    names.sort();
    names.dedup();
    names
        .into_iter()
        .filter_map(|name| {
            let pairs: Vec<MetricPair> = reports
                .clone()
                .filter_map(|b| b.get(name).copied())
                .collect();
            MetricPair::mean(&pairs).map(|m| (name.clone(), m))
        })
        .collect()
}

pub(crate) fn summarize(
    n_periods: usize,
    cells: &[CellResult],
) -> (
    Vec<PeriodSummary>,
    Option<MetricPair>,
    BTreeMap<String, MetricPair>,
) {
    let periods: Vec<PeriodSummary> = (0..n_periods)
        .map(|p| {
            let ok: Vec<&PeriodReport> = cells
                .iter()
                .filter_map(CellResult::report)
                .filter(|r| r.period == p)
                .collect();
            let metrics: Vec<MetricPair> = ok.iter().map(|r| r.metrics).collect();
            PeriodSummary {
                period: p,
                seeds_ok: ok.len(),
                metrics: MetricPair::mean(&metrics),
                baselines: mean_baselines(ok.iter().map(|r| &r.baselines)),
            }
        })
        .collect();
    let means: Vec<MetricPair> = periods.iter().filter_map(|p| p.metrics).collect();
    let overall = MetricPair::mean(&means);
    let overall_baselines = mean_baselines(
        periods
            .iter()
            .filter(|p| p.metrics.is_some())
            .map(|p| &p.baselines),
    );
    (periods, overall, overall_baselines)
}

fn fmt_pair(p: &MetricPair) -> String {
    format!("{:>14.6e} {:>12.6}", p.mse, p.smape)
}

impl ExperimentReport {
    /// Human-readable rendering: key-value header followed by tables.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "experiment          {}", self.name);
        let _ = writeln!(s, "label               {}", self.label);
        let _ = writeln!(s, "decomposition       {}", self.decomposition_mode);
        let _ = writeln!(
            s,
            "series              {} points, {} to {} ({} rows dropped)",
            self.series.len, self.series.start, self.series.end, self.series.dropped_rows
        );
        let c = &self.config;
        let _ = writeln!(s, "modes (K)           {}", c.vmd.modes);
        let _ = writeln!(
            s,
            "forecaster          L={} T={} P={} S={} D={} heads={} layers={} norm={:?}",
            c.forecaster.lookback,
            c.forecaster.horizon,
            c.forecaster.patch_len,
            c.forecaster.stride,
            c.forecaster.d_model,
            c.forecaster.n_heads,
            c.forecaster.n_layers,
            c.forecaster.norm
        );
        let _ = writeln!(
            s,
            "training            epochs={} batch={} lr={}",
            c.training.epochs, c.training.batch_size, c.training.learning_rate
        );
        let _ = writeln!(
            s,
            "periods x seeds     {} x {:?}",
            c.backtest.n_periods, c.backtest.seeds
        );
        let _ = writeln!(s, "failed cells        {}", self.failed_cells);
        if let Some(o) = &self.overall {
            let _ = writeln!(s, "overall MSE         {:.6e}", o.mse);
            let _ = writeln!(s, "overall sMAPE       {:.6}", o.smape);
        }
        for (name, m) in &self.overall_baselines {
            let _ = writeln!(
                s,
                "baseline {name:<10} MSE {:.6e}  sMAPE {:.6}",
                m.mse, m.smape
            );
        }

        let _ = writeln!(s, "\n== cells ==");
        let _ = writeln!(
            s,
            "{:>6} {:>6} {:>10} {:>10} {:>14} {:>12}   baselines (MSE)",
            "period", "seed", "test_from", "test_to", "mse", "smape"
        );
        for cell in &self.cells {
            match cell {
                CellResult::Ok(r) => {
                    let base: Vec<String> = r
                        .baselines
                        .iter()
                        .map(|(k, v)| format!("{k}={:.6e}", v.mse))
                        .collect();
                    let _ = writeln!(
                        s,
                        "{:>6} {:>6} {:>10} {:>10} {}   {}",
                        r.period,
                        r.seed,
                        r.test_start,
                        r.test_end,
                        fmt_pair(&r.metrics),
                        base.join(" ")
                    );
                }
                CellResult::Failed(f) => {
                    let stage = f.stage.map(|s| s.to_string()).unwrap_or_else(|| "-".into());
                    let _ = writeln!(
                        s,
                        "{:>6} {:>6} FAILED at {stage}: {}",
                        f.period, f.seed, f.message
                    );
                }
            }
        }

        let _ = writeln!(s, "\n== per-mode errors ==");
        let _ = writeln!(
            s,
            "{:>6} {:>6} {:>5} {:>12} {:>14} {:>12} {:>10} {:>10}",
            "period", "seed", "mode", "omega", "mse", "smape", "w_init", "w_final"
        );
        for r in self.cells.iter().filter_map(CellResult::report) {
            for (k, m) in r.mode_metrics.iter().enumerate() {
                let (wi, wf) = match &r.weights {
                    Some(w) => (
                        format!("{:.4}", w.initial[k]),
                        format!("{:.4}", w.r#final[k]),
                    ),
                    None => ("-".into(), "-".into()),
                };
                let _ = writeln!(
                    s,
                    "{:>6} {:>6} {:>5} {:>12.6} {} {:>10} {:>10}",
                    r.period,
                    r.seed,
                    k,
                    r.vmd.omegas[k],
                    fmt_pair(m),
                    wi,
                    wf
                );
            }
        }

        let _ = writeln!(s, "\n== decomposition ==");
        let _ = writeln!(
            s,
            "{:>6} {:>6} {:>6} {:>9} {:>14} {:>14}",
            "period", "seed", "iters", "converged", "recon_err", "aggr_err"
        );
        for r in self.cells.iter().filter_map(CellResult::report) {
            let _ = writeln!(
                s,
                "{:>6} {:>6} {:>6} {:>9} {:>14.6e} {:>14.6e}",
                r.period,
                r.seed,
                r.vmd.iterations,
                r.vmd.converged,
                r.reconstruction_error,
                r.aggregation_error
            );
        }

        let _ = writeln!(s, "\n== period means ==");
        let _ = writeln!(
            s,
            "{:>6} {:>8} {:>14} {:>12}",
            "period", "seeds_ok", "mse", "smape"
        );
        for p in &self.periods {
            match &p.metrics {
                Some(m) => {
                    let _ = writeln!(s, "{:>6} {:>8} {}", p.period, p.seeds_ok, fmt_pair(m));
                }
                None => {
                    let _ = writeln!(s, "{:>6} {:>8} {:>14} {:>12}", p.period, 0, "-", "-");
                }
            }
        }

        let _ = writeln!(s, "\n== notes ==");
        for n in &self.notes {
            let _ = writeln!(s, "- {n}");
        }
        s
    }
}
