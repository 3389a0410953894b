//! Price series ingestion, period splitting, min-max scaling and supervised
//! window construction.
//!
//! Everything here is a pure function of its inputs. Normalization
//! parameters are meant to be fitted on a training slice and reused
//! unchanged on test data, so [`NormalizationParams::apply`] never clamps.

use std::ops::Range;
use std::path::Path;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Timestamped univariate observations in strictly increasing date order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriceSeries {
    dates: Vec<NaiveDate>,
    values: Vec<f64>,
    /// Rows discarded during ingestion because the value did not parse.
    pub dropped: usize,
}

impl PriceSeries {
    /// Builds a series from parallel date and value vectors. Dates must be
    /// strictly increasing, values finite, and the length at least 2.
    pub fn new(dates: Vec<NaiveDate>, values: Vec<f64>) -> Result<Self> {
        if dates.len() != values.len() {
            return Err(Error::LengthMismatch {
                left: dates.len(),
                right: values.len(),
            });
        }
        if values.len() < 2 {
            return Err(Error::TooShort(format!(
                "price series needs at least 2 observations, got {}",
                values.len()
            )));
        }
        if let Some(index) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { index });
        }
        if let Some(w) = dates.windows(2).position(|w| w[0] >= w[1]) {
            return Err(Error::InvalidArgument(format!(
                "dates not strictly increasing at row {}: {} then {}",
                w + 1,
                dates[w],
                dates[w + 1]
            )));
        }
        Ok(Self {
            dates,
            values,
            dropped: 0,
        })
    }

    /// Series with consecutive calendar days starting at `start`.
    pub fn from_values(start: NaiveDate, values: Vec<f64>) -> Result<Self> {
        let dates = start.iter_days().take(values.len()).collect();
        Self::new(dates, values)
    }

    pub fn dates(&self) -> &[NaiveDate] {
        &self.dates
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Loads `column` from a CSV with a header row and an ISO-8601 date column.
///
/// The date column is the one named `date` (case-insensitive) if present,
/// otherwise the first column. Rows whose value does not parse as a finite
/// number are dropped and counted in [`PriceSeries::dropped`]; rows with an
/// unparseable date are an error. The result is sorted ascending by date.
pub fn load_csv(path: impl AsRef<Path>, column: &str) -> Result<PriceSeries> {
    let path = path.as_ref();
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .flexible(true)
        .from_path(path)?;
    let headers = reader.headers()?.clone();
    let value_idx =
        headers
            .iter()
            .position(|h| h == column)
            .ok_or_else(|| Error::MissingColumn {
                column: column.to_string(),
                available: headers.iter().collect::<Vec<_>>().join(", "),
            })?;
    let date_idx = headers
        .iter()
        .position(|h| h.eq_ignore_ascii_case("date"))
        .unwrap_or(0);
    if date_idx == value_idx {
        return Err(Error::InvalidArgument(format!(
            "value column `{column}` is also the date column"
        )));
    }

    let mut rows: Vec<(NaiveDate, f64)> = Vec::new();
    let mut dropped = 0;
    for (line, record) in reader.records().enumerate() {
        let record = record?;
        let raw_date = record.get(date_idx).unwrap_or("");
        let date = NaiveDate::parse_from_str(raw_date, "%Y-%m-%d").map_err(|_| {
            Error::InvalidArgument(format!(
                "{}: row {}: date `{raw_date}` is not YYYY-MM-DD",
                path.display(),
                line + 2
            ))
        })?;
        match record.get(value_idx).and_then(|v| v.parse::<f64>().ok()) {
            Some(v) if v.is_finite() => rows.push((date, v)),
            _ => dropped += 1,
        }
    }
    if rows.is_empty() {
        return Err(Error::NoValidRows {
            path: path.to_path_buf(),
            dropped,
        });
    }
    rows.sort_by_key(|(d, _)| *d);
    if dropped > 0 {
        log::warn!("{}: dropped {dropped} unparseable rows", path.display());
    }
    let (dates, values) = rows.into_iter().unzip();
    let mut series = PriceSeries::new(dates, values)?;
    series.dropped = dropped;
    Ok(series)
}

/// One experiment period: a contiguous block whose head is the training
/// range and whose tail is the test range.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PeriodSplit {
    pub period_index: usize,
    pub train: Range<usize>,
    pub test: Range<usize>,
}

impl PeriodSplit {
    /// Whole block covered by this period.
    pub fn block(&self) -> Range<usize> {
        self.train.start..self.test.end
    }

    pub fn train_len(&self) -> usize {
        self.train.len()
    }

    pub fn test_len(&self) -> usize {
        self.test.len()
    }
}

/// Partitions `[0, n)` into `n_periods` contiguous blocks whose sizes differ
/// by at most one (earliest blocks take the remainder), then splits each
/// block into `floor(train_fraction * block)` training indices followed by
/// the test indices.
pub fn split_periods(n: usize, n_periods: usize, train_fraction: f64) -> Result<Vec<PeriodSplit>> {
    if n_periods == 0 {
        return Err(Error::InvalidArgument("n_periods must be >= 1".into()));
    }
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "train_fraction must lie in (0, 1), got {train_fraction}"
        )));
    }
    if n < n_periods * 5 {
        return Err(Error::TooShort(format!(
            "{n} observations cannot be split into {n_periods} periods (need >= {})",
            n_periods * 5
        )));
    }
    let base = n / n_periods;
    let extra = n % n_periods;
    let mut start = 0;
    let mut out = Vec::with_capacity(n_periods);
    for period_index in 0..n_periods {
        let size = base + usize::from(period_index < extra);
        let n_train = (train_fraction * size as f64).floor() as usize;
        let n_train = n_train.clamp(1, size - 1);
        out.push(PeriodSplit {
            period_index,
            train: start..start + n_train,
            test: start + n_train..start + size,
        });
        start += size;
    }
    Ok(out)
}

/// Min-max scaling parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormalizationParams {
    pub min: f64,
    pub max: f64,
}

impl NormalizationParams {
    /// Fits the range of `values`.
    pub fn fit(values: &[f64]) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::InvalidArgument(
                "cannot fit normalization on an empty array".into(),
            ));
        }
        let (min, max) = values
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            });
        Ok(Self { min, max })
    }

    /// A constant fit range (`max == min`) cannot be scaled.
    pub fn is_degenerate(&self) -> bool {
        self.max <= self.min
    }

    pub fn range(&self) -> f64 {
        self.max - self.min
    }

    /// `(x - min) / (max - min)`, unclamped. Degenerate parameters map
    /// everything to zero.
    pub fn apply(&self, values: &[f64]) -> Vec<f64> {
        if self.is_degenerate() {
            log::warn!(
                "degenerate normalization range [{}, {}]; mapping to zeros",
                self.min,
                self.max
            );
            return vec![0.0; values.len()];
        }
        let span = self.range();
        values.iter().map(|&x| (x - self.min) / span).collect()
    }

    /// Inverse of [`apply`](Self::apply). Degenerate parameters invert to
    /// the constant `min`.
    pub fn invert(&self, values: &[f64]) -> Vec<f64> {
        if self.is_degenerate() {
            return vec![self.min; values.len()];
        }
        let span = self.range();
        values.iter().map(|&y| y * span + self.min).collect()
    }
}

/// Supervised windows over `M` aligned channels.
///
/// `inputs` is laid out `[batch, lookback, channels]` and `targets`
/// `[batch, horizon, channels]`, both row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowBatch {
    pub inputs: Vec<f64>,
    pub targets: Vec<f64>,
    pub batch: usize,
    pub lookback: usize,
    pub horizon: usize,
    pub channels: usize,
}

impl WindowBatch {
    /// Inputs of one channel, `[batch, lookback]` row-major.
    pub fn channel_inputs(&self, channel: usize) -> Vec<f64> {
        self.inputs
            .iter()
            .skip(channel)
            .step_by(self.channels)
            .copied()
            .collect()
    }

    /// Targets of one channel, `[batch, horizon]` row-major.
    pub fn channel_targets(&self, channel: usize) -> Vec<f64> {
        self.targets
            .iter()
            .skip(channel)
            .step_by(self.channels)
            .copied()
            .collect()
    }
}

/// Unit-stride windows over `channels`, given as `channels[m][t]`.
///
/// Window `b` takes rows `[b, b+lookback)` as input and rows
/// `[b+lookback, b+lookback+horizon)` as target, giving
/// `n - lookback - horizon + 1` windows.
pub fn make_windows(channels: &[Vec<f64>], lookback: usize, horizon: usize) -> Result<WindowBatch> {
    let m = channels.len();
    if m == 0 {
        return Err(Error::InvalidArgument("no channels to window".into()));
    }
    if lookback == 0 || horizon == 0 {
        return Err(Error::InvalidArgument(
            "lookback and horizon must be positive".into(),
        ));
    }
    let n = channels[0].len();
    if let Some(c) = channels.iter().find(|c| c.len() != n) {
        return Err(Error::LengthMismatch {
            left: n,
            right: c.len(),
        });
    }
    if n < lookback + horizon {
        return Err(Error::TooShort(format!(
            "{n} rows cannot form a window of lookback {lookback} + horizon {horizon}"
        )));
    }
    let batch = n - lookback - horizon + 1;
    let mut inputs = Vec::with_capacity(batch * lookback * m);
    let mut targets = Vec::with_capacity(batch * horizon * m);
    for b in 0..batch {
        for t in b..b + lookback {
            inputs.extend(channels.iter().map(|c| c[t]));
        }
        for t in b + lookback..b + lookback + horizon {
            targets.extend(channels.iter().map(|c| c[t]));
        }
    }
    Ok(WindowBatch {
        inputs,
        targets,
        batch,
        lookback,
        horizon,
        channels: m,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write_csv(body: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(body.as_bytes()).unwrap();
        f
    }

    #[test]
    fn load_identity() {
        let f = write_csv("date,close\n2020-01-01,1.0\n2020-01-02,2.0\n2020-01-03,3.0\n");
        let s = load_csv(f.path(), "close").unwrap();
        assert_eq!(s.values(), &[1.0, 2.0, 3.0]);
        assert_eq!(s.dropped, 0);
    }

    #[test]
    fn load_drops_unparseable_rows() {
        let f = write_csv(
            "date,close\n2020-01-01,1.0\n2020-01-02,n/a\n2020-01-03,3.0\n2020-01-04,4.0\n",
        );
        let s = load_csv(f.path(), "close").unwrap();
        assert_eq!(s.len(), 3);
        assert_eq!(s.dropped, 1);
        assert_eq!(s.values(), &[1.0, 3.0, 4.0]);
    }

    #[test]
    fn load_sorts_descending_input() {
        let f = write_csv("Date,open,close\n2020-01-03,0,3\n2020-01-02,0,2\n2020-01-01,0,1\n");
        let s = load_csv(f.path(), "close").unwrap();
        assert_eq!(s.values(), &[1.0, 2.0, 3.0]);
        assert!(s.dates().windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn load_errors() {
        assert!(matches!(
            load_csv("/definitely/not/here.csv", "close"),
            Err(Error::MissingFile(_))
        ));
        let f = write_csv("date,close\n2020-01-01,1.0\n");
        assert!(matches!(
            load_csv(f.path(), "open"),
            Err(Error::MissingColumn { .. })
        ));
        let f = write_csv("date,close\n2020-01-01,x\n2020-01-02,y\n");
        assert!(matches!(
            load_csv(f.path(), "close"),
            Err(Error::NoValidRows { dropped: 2, .. })
        ));
        let f = write_csv("date,close\n01/02/2020,1.0\n");
        assert!(matches!(
            load_csv(f.path(), "close"),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn split_even_blocks() {
        let splits = split_periods(100, 5, 0.8).unwrap();
        assert_eq!(splits.len(), 5);
        for (i, s) in splits.iter().enumerate() {
            assert_eq!(s.train, i * 20..i * 20 + 16);
            assert_eq!(s.test, i * 20 + 16..i * 20 + 20);
        }
    }

    #[test]
    fn split_single_period() {
        let splits = split_periods(10, 1, 0.8).unwrap();
        assert_eq!(splits[0].train, 0..8);
        assert_eq!(splits[0].test, 8..10);
    }

    #[test]
    fn split_remainder_goes_first() {
        let sizes: Vec<usize> = split_periods(101, 5, 0.8)
            .unwrap()
            .iter()
            .map(|s| s.block().len())
            .collect();
        assert_eq!(sizes, vec![21, 20, 20, 20, 20]);
    }

    #[test]
    fn split_rejects_short_series() {
        assert!(matches!(split_periods(24, 5, 0.8), Err(Error::TooShort(_))));
        assert!(split_periods(100, 0, 0.8).is_err());
        assert!(split_periods(100, 5, 1.0).is_err());
    }

    #[test]
    fn minmax_examples() {
        let p = NormalizationParams::fit(&[2.0, 4.0, 6.0]).unwrap();
        assert_eq!(p, NormalizationParams { min: 2.0, max: 6.0 });
        assert_eq!(p.apply(&[2.0, 4.0, 6.0]), vec![0.0, 0.5, 1.0]);
        assert_eq!(p.apply(&[8.0]), vec![1.5]);
        assert_eq!(p.invert(&[0.0, 0.5, 1.0]), vec![2.0, 4.0, 6.0]);

        let p = NormalizationParams::fit(&[-1.0, 0.0, 3.0]).unwrap();
        assert_eq!((p.min, p.max), (-1.0, 3.0));

        let d = NormalizationParams::fit(&[5.0, 5.0, 5.0]).unwrap();
        assert!(d.is_degenerate());
        assert_eq!(d.apply(&[5.0, 5.0]), vec![0.0, 0.0]);
        assert_eq!(d.invert(&[0.3]), vec![5.0]);

        assert!(NormalizationParams::fit(&[]).is_err());
    }

    #[test]
    fn window_counts() {
        let ch = vec![(0..10).map(f64::from).collect::<Vec<_>>()];
        assert_eq!(make_windows(&ch, 4, 1).unwrap().batch, 6);

        let ch = vec![(0..5).map(f64::from).collect::<Vec<_>>()];
        let w = make_windows(&ch, 4, 1).unwrap();
        assert_eq!(w.batch, 1);
        assert_eq!(w.inputs, vec![0.0, 1.0, 2.0, 3.0]);
        assert_eq!(w.targets, vec![4.0]);

        let ch = vec![(0..4).map(f64::from).collect::<Vec<_>>()];
        assert!(matches!(make_windows(&ch, 4, 1), Err(Error::TooShort(_))));
    }

    #[test]
    fn window_channel_layout() {
        let a: Vec<f64> = (0..6).map(f64::from).collect();
        let b: Vec<f64> = (0..6).map(|t| 100.0 + t as f64).collect();
        let w = make_windows(&[a, b], 3, 2).unwrap();
        assert_eq!(w.batch, 2);
        assert_eq!(
            w.channel_inputs(1),
            vec![100.0, 101.0, 102.0, 101.0, 102.0, 103.0]
        );
        assert_eq!(w.channel_targets(0), vec![3.0, 4.0, 4.0, 5.0]);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn round_trip(xs in proptest::collection::vec(-1e6f64..1e6, 2..200),
                          extra in proptest::collection::vec(-1e7f64..1e7, 0..20)) {
                let p = NormalizationParams::fit(&xs).unwrap();
                prop_assume!(!p.is_degenerate());
                let all: Vec<f64> = xs.iter().chain(&extra).copied().collect();
                let back = p.invert(&p.apply(&all));
                for (x, y) in all.iter().zip(&back) {
                    prop_assert!((x - y).abs() <= 1e-12 * x.abs().max(p.range()).max(1.0));
                }
                for y in p.apply(&xs) {
                    prop_assert!((0.0..=1.0).contains(&y));
                }
            }

            #[test]
            fn split_partitions(n in 25usize..2000, k in 1usize..6, frac in 0.05f64..0.95) {
                prop_assume!(n >= 5 * k);
                let splits = split_periods(n, k, frac).unwrap();
                let mut next = 0;
                for s in &splits {
                    prop_assert_eq!(s.train.start, next);
                    prop_assert_eq!(s.train.end, s.test.start);
                    prop_assert!(!s.train.is_empty() && !s.test.is_empty());
                    let block = s.block().len();
                    let expected = (frac * block as f64).floor() as usize;
                    prop_assert!(s.train_len().abs_diff(expected) <= 1);
                    next = s.test.end;
                }
                prop_assert_eq!(next, n);
                let sizes: Vec<usize> = splits.iter().map(|s| s.block().len()).collect();
                prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
            }

            #[test]
            fn window_count_formula(n in 2usize..120, l in 1usize..40, t in 1usize..10) {
                prop_assume!(n >= l + t);
                let ch = vec![vec![0.0; n]];
                prop_assert_eq!(make_windows(&ch, l, t).unwrap().batch, n - l - t + 1);
            }
        }
    }

    #[test]
    fn round_trip_thousand_random_values() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let xs: Vec<f64> = (0..1000).map(|_| rng.random_range(-50.0..150.0)).collect();
        let p = NormalizationParams::fit(&xs).unwrap();
        let back = p.invert(&p.apply(&xs));
        let worst = xs
            .iter()
            .zip(&back)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(worst < 1e-12, "worst {worst}");
    }
}
