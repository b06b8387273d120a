//! The six subcommands. Every artifact lands under `output_dir` with a fixed
//! name.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use chrono::{Duration, NaiveDate};
use cryptomamba::data::{fit_normalizer, make_windows, parse_csv, split, Dataset, Normalizer, SplitName};
use cryptomamba::model::{count_parameters, init_params, predict_next_close, predict_normalized};
use cryptomamba::trading::backtest as simulate;
use cryptomamba::train::{read_checkpoint, train as fit, write_checkpoint, write_history, Checkpoint};
use cryptomamba::{MetricReport, ParamStore};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::CliError;

pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const HISTORY_FILE: &str = "history.csv";
pub const CONFIG_ECHO_FILE: &str = "config.toml";
pub const REPORT_FILE: &str = "report.json";

/// Published test MAPE (percent) of the volume-inclusive model, shown next to
/// ours for comparison only.
pub const REFERENCE_TEST_MAPE: f64 = 2.034;

pub fn metrics_file(split: SplitName) -> String {
    format!("metrics_{split}.csv")
}

pub fn backtest_file(split: SplitName, strategy: cryptomamba::trading::Strategy) -> String {
    format!("backtest_{split}_{strategy}.csv")
}

pub fn backtest_summary_file(split: SplitName) -> String {
    format!("backtest_summary_{split}.csv")
}

/// One row of `metrics_<split>.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub split: String,
    pub model: String,
    pub rmse: f64,
    /// Percent.
    pub mape: f64,
    pub mae: f64,
    pub n: usize,
}

/// One row of `backtest_summary_<split>.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub strategy: String,
    pub final_balance: f64,
    pub mdd_percent: f64,
    pub trades: usize,
    pub nonpositive_networth: bool,
}

fn runtime(e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}

fn load_dataset(path: &Path) -> Result<Dataset, CliError> {
    let file = File::open(path)
        .map_err(|e| CliError::Data(format!("cannot open {}: {e}", path.display())))?;
    Ok(parse_csv(BufReader::new(file))?)
}

fn create_output(cfg: &RunConfig, name: &str) -> Result<BufWriter<File>, CliError> {
    std::fs::create_dir_all(&cfg.output_dir)?;
    let path = cfg.output_dir.join(name);
    let file = File::create(&path).map_err(|e| runtime(format!("{}: {e}", path.display())))?;
    Ok(BufWriter::new(file))
}

pub fn ingest(path: &Path, out: &mut impl Write) -> Result<(), CliError> {
    let ds = load_dataset(path)?;
    let (first, last) = (ds.first_date().expect("non-empty"), ds.last_date().expect("non-empty"));
    writeln!(out, "{} bars from {first} to {last}", ds.len())?;
    Ok(())
}

pub fn train(cfg: &RunConfig, out: &mut impl Write) -> Result<(), CliError> {
    let ds = load_dataset(&cfg.data_path)?;
    let splits = split(&ds, &cfg.split)?;
    let m = &cfg.model;
    let norm = fit_normalizer(&splits.train, m.use_volume)?;
    let train_windows = make_windows(&splits.train, m.lookback, m.use_volume, &norm)?;
    let val_windows = make_windows(&splits.val, m.lookback, m.use_volume, &norm)?;
    let initial = init_params::<f64>(m, cfg.train.seed).map_err(runtime)?;
    writeln!(out, "parameters: {}", count_parameters(&initial))?;
    let outcome = fit(m, initial, &train_windows, &val_windows, &cfg.train).map_err(|e| match e {
        cryptomamba::train::TrainError::Config(msg) => CliError::Config(msg),
        other => runtime(other),
    })?;
    let echo = cfg.echo();
    let ckpt = Checkpoint {
        config: echo.clone(),
        val_rmse: outcome.best_val_rmse.unwrap_or(f64::NAN),
        normalizer: Some(norm),
        params: outcome.params,
    };
    let mut w = create_output(cfg, CHECKPOINT_FILE)?;
    write_checkpoint(&mut w, &ckpt).map_err(runtime)?;
    w.flush()?;
    let mut h = create_output(cfg, HISTORY_FILE)?;
    write_history(&mut h, &outcome.history)?;
    h.flush()?;
    create_output(cfg, CONFIG_ECHO_FILE)?.write_all(echo.as_bytes())?;
    match (outcome.best_epoch, outcome.best_val_rmse) {
        (Some(epoch), Some(rmse)) => writeln!(
            out,
            "trained {} epochs; best validation RMSE {rmse:.6} (normalized) at epoch {epoch}",
            outcome.history.len()
        )?,
        _ => writeln!(out, "trained 0 epochs; initial parameters saved")?,
    }
    Ok(())
}

/// Loads a checkpoint and checks it against the configured model.
pub fn load_checkpoint(
    cfg: &RunConfig,
    path: Option<&Path>,
) -> Result<(ParamStore, Normalizer), CliError> {
    let path = path
        .map(Path::to_path_buf)
        .unwrap_or_else(|| cfg.output_dir.join(CHECKPOINT_FILE));
    let file = File::open(&path)
        .map_err(|e| runtime(format!("cannot open checkpoint {}: {e}", path.display())))?;
    let ckpt = read_checkpoint(BufReader::new(file))
        .map_err(|e| runtime(format!("{}: {e}", path.display())))?;
    let expected = init_params::<f64>(&cfg.model, 0).map_err(runtime)?;
    let shapes = |s: &ParamStore| -> BTreeMap<String, Vec<usize>> {
        s.iter()
            .map(|(p, v)| (p.to_string(), v.value.shape().to_vec()))
            .collect()
    };
    let (want, got) = (shapes(&expected), shapes(&ckpt.params));
    if want != got {
        let diff = want
            .iter()
            .find(|(k, v)| got.get(*k) != Some(v))
            .map(|(k, v)| format!("`{k}` expected {v:?}, found {:?}", got.get(k)))
            .or_else(|| got.keys().find(|k| !want.contains_key(*k)).map(|k| format!("unexpected `{k}`")))
            .unwrap_or_default();
        return Err(CliError::Config(format!(
            "checkpoint does not match the configured model: {diff}"
        )));
    }
    let norm = ckpt
        .normalizer
        .ok_or_else(|| runtime("checkpoint carries no normalizer"))?;
    if norm.num_features() != cfg.model.num_features() {
        return Err(CliError::Config(format!(
            "checkpoint normalizer has {} features, model expects {}",
            norm.num_features(),
            cfg.model.num_features()
        )));
    }
    Ok((ckpt.params, norm))
}

/// USD forecasts over one split segment.
///
/// `predictions[i]` is made at `closes[i]` for `closes[i + 1]`; `closes`
/// starts at the last warm-up day, so it is one longer than `predictions`.
pub struct SegmentForecast {
    pub dates: Vec<NaiveDate>,
    pub closes: Vec<f64>,
    pub predictions: Vec<f64>,
}

impl SegmentForecast {
    pub fn actual(&self) -> &[f64] {
        &self.closes[1..]
    }

    /// Yesterday's close as today's forecast.
    pub fn persistence(&self) -> &[f64] {
        &self.closes[..self.closes.len() - 1]
    }
}

pub fn forecast_segment(
    cfg: &RunConfig,
    params: &ParamStore,
    norm: &Normalizer,
    segment: &Dataset,
) -> Result<SegmentForecast, CliError> {
    let m = &cfg.model;
    let windows = make_windows(segment, m.lookback, m.use_volume, norm)?;
    let inputs: Vec<&[f64]> = windows.iter().map(|w| w.inputs.as_slice()).collect();
    let normalized =
        predict_normalized(&inputs, params, m, cfg.train.batch_size).map_err(runtime)?;
    let first = m.lookback - 1;
    Ok(SegmentForecast {
        dates: segment.dates()[first..].to_vec(),
        closes: segment.closes()[first..].to_vec(),
        predictions: normalized.iter().map(|&y| norm.target.invert(y)).collect(),
    })
}

fn segment_forecast(
    cfg: &RunConfig,
    checkpoint: Option<&Path>,
    split_name: SplitName,
) -> Result<SegmentForecast, CliError> {
    let (params, norm) = load_checkpoint(cfg, checkpoint)?;
    let ds = load_dataset(&cfg.data_path)?;
    let splits = split(&ds, &cfg.split)?;
    forecast_segment(cfg, &params, &norm, splits.get(split_name))
}

pub fn evaluate(
    cfg: &RunConfig,
    checkpoint: Option<&Path>,
    split_name: SplitName,
    out: &mut impl Write,
) -> Result<(), CliError> {
    let fc = segment_forecast(cfg, checkpoint, split_name)?;
    let row = |model: &str, pred: &[f64]| -> Result<MetricsRow, CliError> {
        let r = MetricReport::compute(fc.actual(), pred).map_err(runtime)?;
        Ok(MetricsRow {
            split: split_name.to_string(),
            model: model.into(),
            rmse: r.rmse,
            mape: r.mape,
            mae: r.mae,
            n: r.n,
        })
    };
    let rows = [row("cryptomamba", &fc.predictions)?, row("persistence", fc.persistence())?];
    let mut w = csv::Writer::from_writer(create_output(cfg, &metrics_file(split_name))?);
    for r in &rows {
        w.serialize(r)?;
        writeln!(
            out,
            "{:<12} {split_name}: RMSE {:.3}  MAPE {:.4}%  MAE {:.3}  n {}",
            r.model, r.rmse, r.mape, r.mae, r.n
        )?;
    }
    w.flush()?;
    if split_name == SplitName::Test {
        writeln!(out, "reference test MAPE {REFERENCE_TEST_MAPE}%")?;
    }
    Ok(())
}

pub fn predict(cfg: &RunConfig, checkpoint: Option<&Path>, out: &mut impl Write) -> Result<(), CliError> {
    let (params, norm) = load_checkpoint(cfg, checkpoint)?;
    let ds = load_dataset(&cfg.data_path)?;
    let l = cfg.model.lookback;
    if ds.len() < l {
        return Err(CliError::Data(format!(
            "{} bars available, the model needs {l}",
            ds.len()
        )));
    }
    let price = predict_next_close(&params, &cfg.model, &ds.bars()[ds.len() - l..], &norm)
        .map_err(runtime)?;
    let next = ds.last_date().expect("non-empty") + Duration::days(1);
    writeln!(out, "{next} predicted close {price:.2}")?;
    Ok(())
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn backtest(
    cfg: &RunConfig,
    checkpoint: Option<&Path>,
    split_name: SplitName,
    out: &mut impl Write,
) -> Result<(), CliError> {
    let fc = segment_forecast(cfg, checkpoint, split_name)?;
    let b = &cfg.backtest;
    let params = b.params();
    let mut summary = Vec::new();
    for &strategy in &b.strategies {
        let r = simulate(&fc.closes, &fc.predictions, strategy, &params, b.initial_cash)
            .map_err(runtime)?;
        let mut w = csv::Writer::from_writer(create_output(cfg, &backtest_file(split_name, strategy))?);
        w.write_record([
            "date", "close", "prediction", "decision", "fraction", "cash", "position", "networth",
        ])?;
        for (date, row) in fc.dates.iter().zip(&r.trace) {
            w.write_record([
                date.to_string(),
                row.close.to_string(),
                fmt_opt(row.prediction),
                row.decision.name().to_string(),
                fmt_opt(row.decision.fraction()),
                row.cash.to_string(),
                row.position.to_string(),
                row.networth.to_string(),
            ])?;
        }
        w.flush()?;
        writeln!(
            out,
            "{strategy:<15} final balance {:.2}  MDD {:.2}%  trades {}{}",
            r.final_balance,
            r.mdd,
            r.trades,
            if r.nonpositive_networth_flag { "  (net worth reached zero)" } else { "" }
        )?;
        summary.push(SummaryRow {
            strategy: strategy.to_string(),
            final_balance: r.final_balance,
            mdd_percent: r.mdd,
            trades: r.trades,
            nonpositive_networth: r.nonpositive_networth_flag,
        });
    }
    let mut w = csv::Writer::from_writer(create_output(cfg, &backtest_summary_file(split_name))?);
    for row in &summary {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

/// Contents of `report.json`; see `docs/report-schema.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub schema_version: u32,
    pub seed: u64,
    /// Effective config as TOML text.
    pub config: String,
    pub parameter_count: usize,
    pub epochs_trained: usize,
    /// Best validation RMSE in normalized units; null when no epoch ran.
    pub best_val_rmse: Option<f64>,
    pub reference_test_mape: f64,
    /// Keyed by split, then by model name.
    pub metrics: BTreeMap<String, BTreeMap<String, MetricsRow>>,
    /// Keyed by split.
    pub backtests: BTreeMap<String, Vec<SummaryRow>>,
}

fn require(dir: &Path, name: &str) -> Result<PathBuf, CliError> {
    let path = dir.join(name);
    if path.is_file() {
        Ok(path)
    } else {
        Err(runtime(format!("missing artifact {}", path.display())))
    }
}

fn read_rows<R: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<R>, CliError> {
    let mut rd = csv::Reader::from_path(path)?;
    rd.deserialize()
        .collect::<Result<Vec<R>, _>>()
        .map_err(|e| runtime(format!("{}: {e}", path.display())))
}

/// Gathers artifacts into a report; test-split metrics and backtests are
/// required, other splits are included when present.
pub fn build_report(cfg: &RunConfig) -> Result<Report, CliError> {
    let dir = &cfg.output_dir;
    let ckpt_path = require(dir, CHECKPOINT_FILE)?;
    let ckpt = read_checkpoint(BufReader::new(File::open(&ckpt_path)?)).map_err(runtime)?;
    let history: Vec<cryptomamba::train::EpochRecord> = read_rows(&require(dir, HISTORY_FILE)?)?;
    let mut metrics = BTreeMap::new();
    let mut backtests = BTreeMap::new();
    for split_name in SplitName::ALL {
        let needed = split_name == SplitName::Test;
        let m = metrics_file(split_name);
        if needed || dir.join(&m).is_file() {
            let rows: Vec<MetricsRow> = read_rows(&require(dir, &m)?)?;
            let by_model = rows.into_iter().map(|r| (r.model.clone(), r)).collect();
            metrics.insert(split_name.to_string(), by_model);
        }
        let s = backtest_summary_file(split_name);
        if needed || dir.join(&s).is_file() {
            backtests.insert(split_name.to_string(), read_rows(&require(dir, &s)?)?);
        }
    }
    Ok(Report {
        schema_version: 1,
        seed: cfg.train.seed,
        config: cfg.echo(),
        parameter_count: count_parameters(&ckpt.params),
        epochs_trained: history.len(),
        best_val_rmse: ckpt.val_rmse.is_finite().then_some(ckpt.val_rmse),
        reference_test_mape: REFERENCE_TEST_MAPE,
        metrics,
        backtests,
    })
}

pub fn report(cfg: &RunConfig, out: &mut impl Write) -> Result<(), CliError> {
    let report = build_report(cfg)?;
    let mut text = serde_json::to_string_pretty(&report).map_err(runtime)?;
    text.push('\n');
    create_output(cfg, REPORT_FILE)?.write_all(text.as_bytes())?;
    writeln!(out, "wrote {}", cfg.output_dir.join(REPORT_FILE).display())?;
    Ok(())
}
