#[path = "../../core/tests/common/mod.rs"]
mod common;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use chrono::NaiveDate;
use cryptomamba::data::{serialize_csv, synthetic::bars_from_closes, Dataset};
use cryptomamba::model::{count_parameters, init_params, ModelConfig};
use cryptomamba::train::{read_checkpoint, write_checkpoint};
use cryptomamba::Tensor;
use cryptomamba_cli::config::{load_config, CONFIG_ENV};
use tempfile::TempDir;

fn ymd(y: i32, m: u32, d: u32) -> NaiveDate {
    NaiveDate::from_ymd_opt(y, m, d).unwrap()
}

fn write_dataset(path: &Path, ds: &Dataset) {
    let mut buf = Vec::new();
    serialize_csv(ds, &mut buf).unwrap();
    fs::write(path, buf).unwrap();
}

fn wavy(n: usize) -> Vec<f64> {
    (0..n)
        .map(|t| 100.0 + 8.0 * (t as f64 / 6.0).sin() + 0.1 * t as f64)
        .collect()
}

const TINY: &str = r#"
[split]
train_start = "2020-01-01"
train_end = "2020-03-15"
val_end = "2020-04-10"
test_end = "2020-04-29"

[model]
cblock_seq_lens = [5, 6]
final_seq_len = 6
cmblocks_per_cblock = 1
d_state = 4
model_dim = 4
lookback = 5

[train]
batch_size = 8
max_epochs = 1
"#;

/// A temp directory holding 120 synthetic days and a tiny config.
struct Run {
    dir: TempDir,
}

impl Run {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let data = dir.path().join("bars.csv");
        write_dataset(&data, &bars_from_closes(ymd(2020, 1, 1), &wavy(120), 1));
        let text = format!(
            "data_path = {:?}\noutput_dir = {:?}\n{TINY}",
            data,
            dir.path().join("out")
        );
        fs::write(dir.path().join("run.toml"), text).unwrap();
        Self { dir }
    }

    fn config(&self) -> PathBuf {
        self.dir.path().join("run.toml")
    }

    fn out(&self, name: &str) -> PathBuf {
        self.dir.path().join("out").join(name)
    }

    fn cli(&self, args: &[&str]) -> Output {
        let config = self.config();
        let mut full = vec!["--config", config.to_str().unwrap()];
        full.extend_from_slice(args);
        cli(&full)
    }
}

fn cli(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cryptomamba"))
        .args(args)
        .env_remove(CONFIG_ENV)
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn ok(o: Output) -> String {
    assert!(o.status.success(), "stdout: {}\nstderr: {}", stdout(&o), stderr(&o));
    stdout(&o)
}

#[test]
fn ingest_reports_count_and_range() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("six.csv");
    let n = (ymd(2024, 9, 17) - ymd(2018, 9, 17)).num_days() as usize + 1;
    write_dataset(&path, &bars_from_closes(ymd(2018, 9, 17), &wavy(n), 2));
    let text = ok(cli(&["ingest", path.to_str().unwrap()]));
    assert!(text.contains("2193 bars from 2018-09-17 to 2024-09-17"), "{text}");
}

#[test]
fn ingest_rejects_gaps_and_empty_files() {
    let dir = tempfile::tempdir().unwrap();
    let good = dir.path().join("good.csv");
    write_dataset(&good, &bars_from_closes(ymd(2021, 1, 1), &wavy(5), 3));
    let text = fs::read_to_string(&good).unwrap();
    let gap: Vec<&str> = text.lines().enumerate().filter(|(i, _)| *i != 3).map(|(_, l)| l).collect();
    let gapped = dir.path().join("gap.csv");
    fs::write(&gapped, gap.join("\n")).unwrap();
    let o = cli(&["ingest", gapped.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("2021-01-04"), "{}", stderr(&o));

    let empty = dir.path().join("empty.csv");
    fs::write(&empty, "").unwrap();
    let o = cli(&["ingest", empty.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("no data rows"), "{}", stderr(&o));

    let o = cli(&["ingest", dir.path().join("absent.csv").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn config_errors_exit_with_code_two() {
    let run = Run::new();
    assert_eq!(run.cli(&["--set", "train.batch_size=0", "train"]).status.code(), Some(2));
    assert_eq!(run.cli(&["--set", "model.bogus=1", "train"]).status.code(), Some(2));
    let o = cli(&["train"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains(CONFIG_ENV));
}

#[test]
fn env_var_supplies_the_config() {
    let run = Run::new();
    let o = Command::new(env!("CARGO_BIN_EXE_cryptomamba"))
        .arg("ingest")
        .env(CONFIG_ENV, run.config())
        .output()
        .unwrap();
    assert!(ok(o).contains("120 bars"));
}

#[test]
fn full_pipeline() {
    let run = Run::new();
    let data = run.dir.path().join("bars.csv");
    let data_before = fs::read(&data).unwrap();

    let text = ok(run.cli(&["train"]));
    let cfg = load_config(&run.config(), &[]).unwrap();
    let expected = count_parameters(&init_params::<f64>(&cfg.model, 0).unwrap());
    assert!(text.contains(&format!("parameters: {expected}")), "{text}");
    let history = fs::read_to_string(run.out("history.csv")).unwrap();
    assert_eq!(history.lines().count(), 2, "{history}");
    assert!(history.starts_with("epoch,train_rmse,val_rmse,lr"));
    let first = fs::read(run.out("checkpoint.bin")).unwrap();
    ok(run.cli(&["train"]));
    assert_eq!(fs::read(run.out("checkpoint.bin")).unwrap(), first);

    let o = run.cli(&["report"]);
    assert_eq!(o.status.code(), Some(4));
    assert!(stderr(&o).contains("metrics_test.csv"), "{}", stderr(&o));

    let text = ok(run.cli(&["evaluate", "--split", "test"]));
    assert!(text.contains("reference test MAPE 2.034%"));
    check_metrics(&run, &cfg.model);

    ok(run.cli(&["backtest", "--split", "test"]));
    check_backtests(&run);

    let text = ok(run.cli(&["predict"]));
    let (date, price) = text.trim().split_once(" predicted close ").unwrap();
    assert_eq!(date, "2020-04-30");
    assert!(price.parse::<f64>().unwrap() > 0.0);

    ok(run.cli(&["report"]));
    let a = fs::read(run.out("report.json")).unwrap();
    ok(run.cli(&["report"]));
    assert_eq!(fs::read(run.out("report.json")).unwrap(), a);
    check_report(&run, &a);

    assert_eq!(fs::read(&data).unwrap(), data_before);
}

fn check_metrics(run: &Run, model: &ModelConfig) {
    let text = fs::read_to_string(run.out("metrics_test.csv")).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("split,model,rmse,mape,mae,n"));
    let rows: Vec<Vec<&str>> = lines.map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[0][1], "cryptomamba");
    assert_eq!(rows[1][1], "persistence");

    // test segment: 2020-04-10..=2020-04-28, i.e. days 100..=118
    let closes = &wavy(120)[100..119];
    let l = model.lookback;
    let (actual, prev) = (&closes[l..], &closes[l - 1..closes.len() - 1]);
    let n = actual.len() as f64;
    let rmse = (actual.iter().zip(prev).map(|(a, p)| (a - p).powi(2)).sum::<f64>() / n).sqrt();
    let mae = actual.iter().zip(prev).map(|(a, p)| (a - p).abs()).sum::<f64>() / n;
    let field = |i: usize| rows[1][i].parse::<f64>().unwrap();
    assert!((field(2) - rmse).abs() < 1e-9 * rmse.max(1.0));
    assert!((field(4) - mae).abs() < 1e-9 * mae.max(1.0));
    assert_eq!(rows[1][5], actual.len().to_string());
}

fn check_backtests(run: &Run) {
    let summary = fs::read_to_string(run.out("backtest_summary_test.csv")).unwrap();
    let names: Vec<&str> = summary.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(names, ["vanilla", "smart", "extended_smart"]);
    for name in names {
        let trace = fs::read_to_string(run.out(&format!("backtest_test_{name}.csv"))).unwrap();
        let mut lines = trace.lines();
        assert_eq!(
            lines.next(),
            Some("date,close,prediction,decision,fraction,cash,position,networth")
        );
        let rows: Vec<Vec<&str>> = lines.map(|l| l.split(',').collect()).collect();
        // first decision on the last warm-up day; last day valuation only
        assert_eq!(rows[0][0], "2020-04-14");
        assert_eq!(rows.last().unwrap()[2], "");
        let closes: Vec<f64> = rows.iter().map(|r| r[1].parse().unwrap()).collect();
        let preds: Vec<f64> = rows.iter().filter(|r| !r[2].is_empty()).map(|r| r[2].parse().unwrap()).collect();
        let (nw, _) = common::reference_backtest(&closes, &preds, name, 0.01, 2.0, 0.002, 0.0, 100.0);
        let got: Vec<f64> = rows.iter().map(|r| r[7].parse().unwrap()).collect();
        assert_eq!(got, nw, "{name}");
    }
}

fn check_report(run: &Run, bytes: &[u8]) {
    let report: serde_json::Value = serde_json::from_slice(bytes).unwrap();
    let schema_path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../docs/report-schema.json");
    let schema: serde_json::Value = serde_json::from_str(&fs::read_to_string(schema_path).unwrap()).unwrap();
    let validator = jsonschema::validator_for(&schema).unwrap();
    let errors: Vec<String> = validator.iter_errors(&report).map(|e| e.to_string()).collect();
    assert!(errors.is_empty(), "{errors:?}");
    let cfg = load_config(&run.config(), &[]).unwrap();
    assert_eq!(report["config"].as_str().unwrap(), cfg.echo());
    assert_eq!(report["seed"], 42);
    assert_eq!(report["epochs_trained"], 1);
}

#[test]
fn constant_low_forecast_never_trades_under_smart() {
    let run = Run::new();
    ok(run.cli(&["train"]));
    let path = run.out("checkpoint.bin");
    let mut ckpt = read_checkpoint(fs::File::open(&path).unwrap()).unwrap();
    let target = ckpt.normalizer.as_ref().unwrap().target;
    let w = ckpt.params.get_mut("merge.weight").unwrap();
    *w = Tensor::zeros(w.shape());
    // far below every close, so Smart only ever sells an empty position
    *ckpt.params.get_mut("merge.bias").unwrap() = Tensor::vector(vec![target.apply(1.0)]).unwrap();
    write_checkpoint(&mut fs::File::create(&path).unwrap(), &ckpt).unwrap();
    ok(run.cli(&["--set", "backtest.strategies=[\"smart\"]", "backtest"]));
    let summary = fs::read_to_string(run.out("backtest_summary_test.csv")).unwrap();
    let row: Vec<&str> = summary.lines().nth(1).unwrap().split(',').collect();
    assert_eq!(row[0], "smart");
    assert_eq!(row[1].parse::<f64>().unwrap(), 100.0);
    assert_eq!(row[3], "0");
    assert_eq!(summary.lines().count(), 2);
}

#[test]
fn checkpoint_shape_mismatch_is_a_config_error() {
    let run = Run::new();
    ok(run.cli(&["train"]));
    let o = run.cli(&["--set", "model.d_state=5", "evaluate"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("does not match"), "{}", stderr(&o));
    let o = run.cli(&["--set", "output_dir=/nonexistent/dir", "predict"]);
    assert_eq!(o.status.code(), Some(4));
}
