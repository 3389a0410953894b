use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::baselines::Baseline;
use crate::error::{Error, Result};
use crate::forecaster::{ForecasterConfig, TrainingConfig};
use crate::series::{load_csv, PriceSeries};
use crate::synthetic::SyntheticConfig;
use crate::vmd::VmdConfig;

/// Where the price series comes from: a CSV file or the built-in generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub path: Option<PathBuf>,
    pub column: String,
    pub synthetic: Option<SyntheticConfig>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            path: None,
            column: "close".into(),
            synthetic: None,
        }
    }
}

impl DataConfig {
    pub fn load(&self) -> Result<PriceSeries> {
        match (&self.path, &self.synthetic) {
            (Some(path), None) => load_csv(path, &self.column),
            (None, Some(s)) => s.generate(),
            (Some(_), Some(_)) => Err(Error::Config(
                "set either data.path or data.synthetic, not both".into(),
            )),
            (None, None) => Err(Error::Config(
                "no data source: set data.path or data.synthetic".into(),
            )),
        }
    }
}

/// How ASWL starts its logits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightInit {
    /// Proportional to each mode's raw range over the training segment.
    Ranges,
    /// All weights 1.
    Uniform,
}

/// How per-mode forecasts are combined. Only summation is supported.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregate {
    Sum,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AswlConfig {
    pub enabled: bool,
    pub init: WeightInit,
    /// Keep the logits at their initial values.
    pub frozen: bool,
    pub aggregate: Aggregate,
}

impl Default for AswlConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            init: WeightInit::Ranges,
            frozen: false,
            aggregate: Aggregate::Sum,
        }
    }
}

impl AswlConfig {
    /// Short label used in reports.
    pub fn label(&self) -> &'static str {
        match (self.enabled, self.frozen) {
            (false, _) => "ASWL-off",
            (true, false) => "ASWL-on",
            (true, true) => "ASWL-frozen",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BacktestConfig {
    pub n_periods: usize,
    pub train_fraction: f64,
    /// One run per seed for every period.
    pub seeds: Vec<u64>,
    /// Decompose only data observed so far instead of the whole period.
    pub strict_causal: bool,
    /// Worker threads for period x seed cells; 0 uses every core.
    pub workers: usize,
    pub baselines: Vec<Baseline>,
    pub ar_order: usize,
}

impl Default for BacktestConfig {
    fn default() -> Self {
        Self {
            n_periods: 5,
            train_fraction: 0.8,
            seeds: vec![0, 1, 2, 3, 4],
            strict_causal: false,
            workers: 0,
            baselines: vec![Baseline::Naive, Baseline::LinearAr],
            ar_order: 5,
        }
    }
}

/// Everything needed to reproduce a backtest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub data: DataConfig,
    pub vmd: VmdConfig,
    pub forecaster: ForecasterConfig,
    pub training: TrainingConfig,
    pub aswl: AswlConfig,
    pub backtest: BacktestConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            name: "experiment".into(),
            data: DataConfig::default(),
            vmd: VmdConfig::default(),
            forecaster: ForecasterConfig::default(),
            training: TrainingConfig::default(),
            aswl: AswlConfig::default(),
            backtest: BacktestConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    /// Reads a TOML config. A relative `data.path` is resolved against the
    /// config file's directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut config = Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })?;
        if let (Some(data), Some(dir)) = (config.data.path.as_mut(), path.parent()) {
            if data.is_relative() {
                *data = dir.join(&*data);
            }
        }
        Ok(config)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Applies `key.path=value` overrides. Values are parsed as TOML
    /// (numbers, booleans, arrays, inline tables) and otherwise taken as
    /// strings. Every key must name an existing config field.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, overrides: &[S]) -> Result<()> {
        if overrides.is_empty() {
            return Ok(());
        }
        let mut root = toml::Table::try_from(&*self).map_err(|e| Error::Config(e.to_string()))?;
        for raw in overrides {
            let raw = raw.as_ref();
            let (key, value) = raw.split_once('=').ok_or_else(|| {
                Error::Config(format!("override `{raw}` is not of the form key=value"))
            })?;
            let key = key.trim();
            set_dotted(&mut root, key, parse_value(value.trim()))?;
        }
        *self = root
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(format!("after overrides: {e}")))?;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.vmd.validate()?;
        self.forecaster.validate()?;
        self.training.validate()?;
        if self.training.epochs == 0 {
            return Err(Error::Config("training.epochs must be at least 1".into()));
        }
        let b = &self.backtest;
        if b.n_periods == 0 {
            return Err(Error::Config(
                "backtest.n_periods must be at least 1".into(),
            ));
        }
        if !(b.train_fraction > 0.0 && b.train_fraction < 1.0) {
            return Err(Error::Config(format!(
                "backtest.train_fraction must be in (0, 1), got {}",
                b.train_fraction
            )));
        }
        if b.seeds.is_empty() {
            return Err(Error::Config(
                "backtest.seeds must list at least one seed".into(),
            ));
        }
        if b.ar_order == 0 {
            return Err(Error::Config("backtest.ar_order must be at least 1".into()));
        }
        Ok(())
    }
}

fn parse_value(text: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {text}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(text.to_string()))
}

fn set_dotted(root: &mut toml::Table, key: &str, value: toml::Value) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("invalid override key `{key}`")));
    }
    let (leaf, parents) = parts.split_last().expect("non-empty split");
    let mut table = root;
    for (i, part) in parents.iter().enumerate() {
        table = match table.get_mut(*part) {
            Some(toml::Value::Table(t)) => t,
            _ => {
                return Err(Error::Config(format!(
                    "unknown config key `{}` in override `{key}`",
                    parts[..=i].join(".")
                )))
            }
        };
    }
    table.insert((*leaf).to_string(), value);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips_through_toml() {
        let config = ExperimentConfig::default();
        let text = config.to_toml_string().unwrap();
        assert_eq!(ExperimentConfig::from_toml_str(&text).unwrap(), config);
    }

    #[test]
    fn partial_config_uses_defaults() {
        let c =
            ExperimentConfig::from_toml_str("[vmd]\nmodes = 3\n[training]\nepochs = 4\n").unwrap();
        assert_eq!(c.vmd.modes, 3);
        assert_eq!(c.vmd.alpha, 2000.0);
        assert_eq!(c.training.epochs, 4);
        assert_eq!(c.training.batch_size, 32);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(ExperimentConfig::from_toml_str("[vmd]\nmode = 3\n").is_err());
        let mut c = ExperimentConfig::default();
        assert!(c.apply_overrides(&["vmd.mode=3"]).is_err());
        assert!(c.apply_overrides(&["nothing.here=3"]).is_err());
        assert!(c.apply_overrides(&["vmd.modes"]).is_err());
    }

    #[test]
    fn overrides_set_nested_values() {
        let mut c = ExperimentConfig::default();
        c.apply_overrides(&[
            "aswl.enabled=false",
            "vmd.modes=3",
            "vmd.alpha=500",
            "backtest.seeds=[4, 5]",
            "name=trial",
            "data.column=adj_close",
            "forecaster.norm=layer",
        ])
        .unwrap();
        assert!(!c.aswl.enabled);
        assert_eq!(c.aswl.label(), "ASWL-off");
        assert_eq!(c.vmd.modes, 3);
        assert_eq!(c.vmd.alpha, 500.0);
        assert_eq!(c.backtest.seeds, vec![4, 5]);
        assert_eq!(c.name, "trial");
        assert_eq!(c.data.column, "adj_close");
        assert_eq!(c.forecaster.norm, crate::forecaster::NormKind::Layer);
    }

    #[test]
    fn validation() {
        let mut c = ExperimentConfig::default();
        c.training.epochs = 0;
        assert!(c.validate().is_err());
        let mut c = ExperimentConfig::default();
        c.backtest.train_fraction = 1.0;
        assert!(c.validate().is_err());
        assert!(ExperimentConfig::default().validate().is_ok());
    }

    #[test]
    fn data_source_must_be_unique() {
        let mut d = DataConfig::default();
        assert!(d.load().is_err());
        d.synthetic = Some(SyntheticConfig {
            n: 50,
            ..Default::default()
        });
        assert_eq!(d.load().unwrap().len(), 50);
        d.path = Some("x.csv".into());
        assert!(d.load().is_err());
    }
}
