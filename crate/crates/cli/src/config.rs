//! Run configuration: one TOML file with nested tables, overridable per key.

use std::path::{Path, PathBuf};

use cryptomamba::data::SplitSpec;
use cryptomamba::model::ModelConfig;
use cryptomamba::trading::{Strategy, StrategyParams};
use cryptomamba::train::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::CliError;

/// Environment variable naming the config file when `--config` is absent.
pub const CONFIG_ENV: &str = "CRYPTOMAMBA_CONFIG";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BacktestConfig {
    pub strategies: Vec<Strategy>,
    pub threshold: f64,
    /// Percent.
    pub risk: f64,
    /// BTC.
    pub max_short: f64,
    pub fee_rate: f64,
    /// USD.
    pub initial_cash: f64,
}

impl Default for BacktestConfig {
    fn default() -> Self {
        let p = StrategyParams::default();
        Self {
            strategies: Strategy::ALL.to_vec(),
            threshold: p.threshold,
            risk: p.risk,
            max_short: p.max_short,
            fee_rate: p.fee_rate,
            initial_cash: 100.0,
        }
    }
}

impl BacktestConfig {
    pub fn params(&self) -> StrategyParams<f64> {
        StrategyParams {
            threshold: self.threshold,
            risk: self.risk,
            max_short: self.max_short,
            fee_rate: self.fee_rate,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub data_path: PathBuf,
    pub output_dir: PathBuf,
    #[serde(default)]
    pub split: SplitSpec,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub backtest: BacktestConfig,
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), CliError> {
        self.model.validate().map_err(|e| CliError::Config(e.to_string()))?;
        self.train.validate().map_err(|e| CliError::Config(e.to_string()))?;
        let s = &self.split;
        if !(s.train_start < s.train_end && s.train_end < s.val_end && s.val_end < s.test_end) {
            return Err(CliError::Config(
                "split dates must satisfy train_start < train_end < val_end < test_end".into(),
            ));
        }
        let b = &self.backtest;
        if b.strategies.is_empty() {
            return Err(CliError::Config("backtest.strategies is empty".into()));
        }
        for (i, s) in b.strategies.iter().enumerate() {
            if b.strategies[..i].contains(s) {
                return Err(CliError::Config(format!("strategy `{s}` listed twice")));
            }
        }
        let checks = [
            (b.threshold >= 0.0 && b.threshold.is_finite(), "threshold must be >= 0"),
            (b.risk > 0.0 && b.risk < 100.0, "risk must lie in (0, 100)"),
            (b.max_short >= 0.0 && b.max_short.is_finite(), "max_short must be >= 0"),
            (b.fee_rate >= 0.0 && b.fee_rate < 1.0, "fee_rate must lie in [0, 1)"),
            (b.initial_cash > 0.0 && b.initial_cash.is_finite(), "initial_cash must be positive"),
        ];
        for (ok, msg) in checks {
            if !ok {
                return Err(CliError::Config(format!("backtest.{msg}")));
            }
        }
        Ok(())
    }

    /// Canonical TOML text of the effective configuration.
    pub fn echo(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

fn parse_override(raw: &str) -> Result<(Vec<String>, String), CliError> {
    let (key, value) = raw
        .split_once('=')
        .ok_or_else(|| CliError::Config(format!("override `{raw}` is not key=value")))?;
    let path: Vec<String> = key.trim().split('.').map(str::to_string).collect();
    if path.iter().any(String::is_empty) {
        return Err(CliError::Config(format!("bad override key `{key}`")));
    }
    Ok((path, value.trim().to_string()))
}

/// Sets `path` in `table`, parsing `value` as a TOML literal. Existing string
/// slots (paths, dates, names) take the raw text.
fn apply_override(table: &mut toml::Table, path: &[String], value: &str) -> Result<(), CliError> {
    let (last, parents) = path.split_last().expect("non-empty path");
    let mut cur = table;
    for key in parents {
        let slot = cur
            .entry(key.clone())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = slot
            .as_table_mut()
            .ok_or_else(|| CliError::Config(format!("`{key}` is not a table")))?;
    }
    let existing_is_string = matches!(cur.get(last), Some(toml::Value::String(_)));
    let parsed = format!("v = {value}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"));
    let new = match parsed {
        Some(v) if !(existing_is_string && !v.is_str()) => v,
        _ => toml::Value::String(value.to_string()),
    };
    cur.insert(last.clone(), new);
    Ok(())
}

/// Parses TOML text, applies `key=value` overrides, and validates.
pub fn parse_config(text: &str, overrides: &[String]) -> Result<RunConfig, CliError> {
    let mut table: toml::Table = text
        .parse()
        .map_err(|e| CliError::Config(format!("invalid TOML: {e}")))?;
    if !overrides.is_empty() {
        // seed absent slots from defaults so date overrides see a string slot
        let defaults = toml::Table::try_from(RunConfig {
            data_path: PathBuf::new(),
            output_dir: PathBuf::new(),
            split: SplitSpec::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            backtest: BacktestConfig::default(),
        })
        .expect("defaults serialize");
        merge_missing(&mut table, &defaults);
    }
    for raw in overrides {
        let (path, value) = parse_override(raw)?;
        apply_override(&mut table, &path, &value)?;
    }
    let cfg: RunConfig = table
        .try_into()
        .map_err(|e: toml::de::Error| CliError::Config(e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

fn merge_missing(into: &mut toml::Table, defaults: &toml::Table) {
    for (k, v) in defaults {
        match (into.get_mut(k), v) {
            (Some(toml::Value::Table(a)), toml::Value::Table(b)) => merge_missing(a, b),
            (Some(_), _) => {}
            (None, _) => {
                if !(k == "data_path" || k == "output_dir") {
                    into.insert(k.clone(), v.clone());
                }
            }
        }
    }
}

/// Resolves the config path from `--config` or the environment variable.
pub fn resolve_path(flag: Option<&Path>) -> Result<PathBuf, CliError> {
    if let Some(p) = flag {
        return Ok(p.to_path_buf());
    }
    std::env::var_os(CONFIG_ENV)
        .map(PathBuf::from)
        .ok_or_else(|| CliError::Config(format!("no --config given and {CONFIG_ENV} is unset")))
}

pub fn load_config(path: &Path, overrides: &[String]) -> Result<RunConfig, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
    parse_config(&text, overrides)
}
