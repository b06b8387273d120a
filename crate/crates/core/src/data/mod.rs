//! Daily OHLCV ingestion, date-based splitting and lookback windows.

mod csv;
mod normalize;
pub mod synthetic;

pub use self::csv::{parse_csv, serialize_csv};
pub use normalize::{fit_normalizer, Affine, Normalizer};

use chrono::{Duration, NaiveDate};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DataError {
    #[error("input contains no data rows")]
    EmptyInput,
    #[error("malformed row at line {line}: {reason}")]
    MalformedRow { line: usize, reason: String },
    #[error("dates not strictly increasing at line {line}: {date} follows {previous}")]
    NonMonotonicDates {
        line: usize,
        previous: NaiveDate,
        date: NaiveDate,
    },
    #[error("missing day at line {line}: expected {expected}, found {found}")]
    MissingDay {
        line: usize,
        expected: NaiveDate,
        found: NaiveDate,
    },
    #[error("insufficient coverage: {0}")]
    InsufficientCoverage(String),
    #[error("segment of {len} bars is too short for a lookback of {lookback}")]
    SegmentTooShort { len: usize, lookback: usize },
    #[error("feature `{0}` is constant over the training segment")]
    DegenerateFeature(&'static str),
    #[error("normalizer has {got} features, expected {expected}")]
    FeatureMismatch { expected: usize, got: usize },
    #[error("invalid bar on {date}: {reason}")]
    InvalidBar { date: NaiveDate, reason: String },
}

/// One daily candle. Prices in USD, volume in traded units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OhlcvBar {
    pub date: NaiveDate,
    pub open: f64,
    pub high: f64,
    pub low: f64,
    pub close: f64,
    pub volume: f64,
}

pub const FEATURE_NAMES: [&str; 5] = ["open", "high", "low", "close", "volume"];

impl OhlcvBar {
    pub fn validate(&self) -> Result<(), String> {
        let prices = [self.open, self.high, self.low, self.close];
        if prices.iter().chain([&self.volume]).any(|v| !v.is_finite()) {
            return Err("non-finite value".into());
        }
        if prices.iter().any(|&p| p <= 0.0) {
            return Err("prices must be positive".into());
        }
        if self.volume < 0.0 {
            return Err("negative volume".into());
        }
        if self.low > self.open.min(self.close) {
            return Err(format!("low {} above min(open, close)", self.low));
        }
        if self.high < self.open.max(self.close) {
            return Err(format!("high {} below max(open, close)", self.high));
        }
        if self.low > self.high {
            return Err(format!("low {} above high {}", self.low, self.high));
        }
        Ok(())
    }

    /// Feature vector in model order: open, high, low, close[, volume].
    pub fn features(&self, use_volume: bool) -> impl Iterator<Item = f64> {
        let all = [self.open, self.high, self.low, self.close, self.volume];
        all.into_iter().take(num_features(use_volume))
    }
}

pub fn num_features(use_volume: bool) -> usize {
    if use_volume {
        5
    } else {
        4
    }
}

/// Gapless, strictly increasing run of daily bars.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dataset {
    bars: Vec<OhlcvBar>,
}

impl Dataset {
    /// Validates bar invariants and one-day spacing.
    pub fn new(bars: Vec<OhlcvBar>) -> Result<Self, DataError> {
        for (i, bar) in bars.iter().enumerate() {
            bar.validate().map_err(|reason| DataError::InvalidBar {
                date: bar.date,
                reason,
            })?;
            if i > 0 {
                check_succession(bars[i - 1].date, bar.date, i + 1)?;
            }
        }
        Ok(Self { bars })
    }

    pub fn bars(&self) -> &[OhlcvBar] {
        &self.bars
    }

    pub fn len(&self) -> usize {
        self.bars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bars.is_empty()
    }

    pub fn first_date(&self) -> Option<NaiveDate> {
        self.bars.first().map(|b| b.date)
    }

    pub fn last_date(&self) -> Option<NaiveDate> {
        self.bars.last().map(|b| b.date)
    }

    pub fn closes(&self) -> Vec<f64> {
        self.bars.iter().map(|b| b.close).collect()
    }

    pub fn dates(&self) -> Vec<NaiveDate> {
        self.bars.iter().map(|b| b.date).collect()
    }

    /// Contiguous sub-range; stays a valid dataset.
    pub fn slice(&self, range: std::ops::Range<usize>) -> Dataset {
        Dataset {
            bars: self.bars[range].to_vec(),
        }
    }

    /// Bars with `start <= date < end`.
    pub fn between(&self, start: NaiveDate, end: NaiveDate) -> Dataset {
        let lo = self.bars.partition_point(|b| b.date < start);
        let hi = self.bars.partition_point(|b| b.date < end);
        self.slice(lo..hi.max(lo))
    }
}

/// Checks `date` is exactly one day after `previous`; `line` is for reporting.
pub(crate) fn check_succession(
    previous: NaiveDate,
    date: NaiveDate,
    line: usize,
) -> Result<(), DataError> {
    if date <= previous {
        return Err(DataError::NonMonotonicDates {
            line,
            previous,
            date,
        });
    }
    let expected = previous + Duration::days(1);
    if date != expected {
        return Err(DataError::MissingDay {
            line,
            expected,
            found: date,
        });
    }
    Ok(())
}

/// Split boundaries; each segment is the half-open interval `[start, end)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train_start: NaiveDate,
    pub train_end: NaiveDate,
    pub val_end: NaiveDate,
    pub test_end: NaiveDate,
}

impl Default for SplitSpec {
    /// Four years of training, then one year each of validation and test,
    /// starting 2018-09-17.
    fn default() -> Self {
        let d = |y, m, day| NaiveDate::from_ymd_opt(y, m, day).expect("valid date");
        Self {
            train_start: d(2018, 9, 17),
            train_end: d(2022, 9, 17),
            val_end: d(2023, 9, 17),
            test_end: d(2024, 9, 17),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitName {
    Train,
    Val,
    Test,
}

impl SplitName {
    pub const ALL: [SplitName; 3] = [SplitName::Train, SplitName::Val, SplitName::Test];

    pub fn as_str(&self) -> &'static str {
        match self {
            SplitName::Train => "train",
            SplitName::Val => "val",
            SplitName::Test => "test",
        }
    }
}

impl std::str::FromStr for SplitName {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(SplitName::Train),
            "val" | "validation" => Ok(SplitName::Val),
            "test" => Ok(SplitName::Test),
            other => Err(format!("unknown split `{other}` (expected train, val or test)")),
        }
    }
}

impl std::fmt::Display for SplitName {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Splits {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

impl Splits {
    pub fn get(&self, name: SplitName) -> &Dataset {
        match name {
            SplitName::Train => &self.train,
            SplitName::Val => &self.val,
            SplitName::Test => &self.test,
        }
    }
}

/// Partitions `dataset` into train/validation/test by date.
///
/// A boundary date belongs to the later segment.
pub fn split(dataset: &Dataset, spec: &SplitSpec) -> Result<Splits, DataError> {
    let SplitSpec {
        train_start,
        train_end,
        val_end,
        test_end,
    } = *spec;
    for (name, lo, hi) in [
        ("train", train_start, train_end),
        ("validation", train_end, val_end),
        ("test", val_end, test_end),
    ] {
        if lo >= hi {
            return Err(DataError::InsufficientCoverage(format!(
                "empty {name} interval [{lo}, {hi})"
            )));
        }
    }
    let (first, last) = match (dataset.first_date(), dataset.last_date()) {
        (Some(f), Some(l)) => (f, l),
        _ => return Err(DataError::InsufficientCoverage("empty dataset".into())),
    };
    let needed_last = test_end - Duration::days(1);
    if first > train_start || last < needed_last {
        return Err(DataError::InsufficientCoverage(format!(
            "data spans {first}..={last}, splits need {train_start}..={needed_last}"
        )));
    }
    Ok(Splits {
        train: dataset.between(train_start, train_end),
        val: dataset.between(train_end, val_end),
        test: dataset.between(val_end, test_end),
    })
}

/// Normalized lookback matrix and the next-day close it predicts.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowSample {
    /// Row-major `lookback x num_features`.
    pub inputs: Vec<f64>,
    pub lookback: usize,
    pub num_features: usize,
    /// Normalized close of `target_date`.
    pub target: f64,
    pub target_date: NaiveDate,
}

impl WindowSample {
    /// Dates of the input rows, oldest first.
    pub fn input_dates(&self) -> impl Iterator<Item = NaiveDate> + '_ {
        (1..=self.lookback)
            .rev()
            .map(|k| self.target_date - Duration::days(k as i64))
    }
}

/// One sample per day of `segment` whose full lookback lies inside it.
pub fn make_windows(
    segment: &Dataset,
    lookback: usize,
    use_volume: bool,
    normalizer: &Normalizer,
) -> Result<Vec<WindowSample>, DataError> {
    if lookback == 0 || segment.len() <= lookback {
        return Err(DataError::SegmentTooShort {
            len: segment.len(),
            lookback,
        });
    }
    let nf = num_features(use_volume);
    if normalizer.num_features() != nf {
        return Err(DataError::FeatureMismatch {
            expected: nf,
            got: normalizer.num_features(),
        });
    }
    let bars = segment.bars();
    let rows: Vec<Vec<f64>> = bars
        .iter()
        .map(|b| normalizer.apply_features(b.features(use_volume)))
        .collect();
    Ok((lookback..bars.len())
        .map(|t| WindowSample {
            inputs: rows[t - lookback..t].concat(),
            lookback,
            num_features: nf,
            target: normalizer.target.apply(bars[t].close),
            target_date: bars[t].date,
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bar(date: NaiveDate, close: f64) -> OhlcvBar {
        OhlcvBar {
            date,
            open: close,
            high: close * 1.01,
            low: close * 0.99,
            close,
            volume: close * 10.0,
        }
    }

    fn daily(start: NaiveDate, n: usize) -> Dataset {
        Dataset::new(
            (0..n)
                .map(|i| bar(start + Duration::days(i as i64), 100.0 + i as f64))
                .collect(),
        )
        .unwrap()
    }

    fn ymd(y: i32, m: u32, d: u32) -> NaiveDate {
        NaiveDate::from_ymd_opt(y, m, d).unwrap()
    }

    #[test]
    fn split_counts_half_open() {
        let ds = daily(ymd(2020, 1, 1), 30);
        let spec = SplitSpec {
            train_start: ymd(2020, 1, 1),
            train_end: ymd(2020, 1, 21),
            val_end: ymd(2020, 1, 26),
            test_end: ymd(2020, 1, 31),
        };
        let s = split(&ds, &spec).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (20, 5, 5));
        assert_eq!(s.val.first_date(), Some(ymd(2020, 1, 21)));
    }

    #[test]
    fn split_rejects_empty_train() {
        let ds = daily(ymd(2020, 1, 1), 30);
        let spec = SplitSpec {
            train_start: ymd(2020, 1, 1),
            train_end: ymd(2020, 1, 1),
            val_end: ymd(2020, 1, 26),
            test_end: ymd(2020, 1, 31),
        };
        assert!(matches!(
            split(&ds, &spec),
            Err(DataError::InsufficientCoverage(_))
        ));
    }

    #[test]
    fn split_rejects_short_dataset() {
        let ds = daily(ymd(2020, 1, 1), 29);
        let spec = SplitSpec {
            train_start: ymd(2020, 1, 1),
            train_end: ymd(2020, 1, 21),
            val_end: ymd(2020, 1, 26),
            test_end: ymd(2020, 1, 31),
        };
        assert!(split(&ds, &spec).is_err());
    }

    #[test]
    fn window_count_and_width() {
        let ds = daily(ymd(2020, 1, 1), 379);
        let norm = Normalizer::fit(&ds, false).unwrap();
        let w = make_windows(&ds, 14, false, &norm).unwrap();
        assert_eq!(w.len(), 365);
        assert!(w.iter().all(|s| s.inputs.len() == 14 * 4 && s.num_features == 4));
        assert_eq!(w[0].target_date, ymd(2020, 1, 15));
    }

    #[test]
    fn window_needs_one_target_day() {
        let ds = daily(ymd(2020, 1, 1), 14);
        let norm = Normalizer::fit(&ds, true).unwrap();
        assert!(matches!(
            make_windows(&ds, 14, true, &norm),
            Err(DataError::SegmentTooShort { len: 14, lookback: 14 })
        ));
    }

    #[test]
    fn window_rows_are_the_preceding_days() {
        let ds = daily(ymd(2020, 1, 1), 20);
        let norm = Normalizer::fit(&ds, true).unwrap();
        let w = make_windows(&ds, 3, true, &norm).unwrap();
        let s = &w[2];
        // rows are bars 2, 3, 4; target is bar 5
        let close_col = 3;
        let closes: Vec<f64> = (0..3)
            .map(|r| norm.features[close_col].invert(s.inputs[r * 5 + close_col]))
            .collect();
        for (got, want) in closes.iter().zip([102.0, 103.0, 104.0]) {
            assert!((got - want).abs() < 1e-9);
        }
        assert!((norm.target.invert(s.target) - 105.0).abs() < 1e-9);
        let dates: Vec<_> = s.input_dates().collect();
        assert_eq!(dates, vec![ymd(2020, 1, 3), ymd(2020, 1, 4), ymd(2020, 1, 5)]);
    }

    #[test]
    fn dataset_rejects_gaps() {
        let bars = vec![bar(ymd(2020, 1, 1), 1.0), bar(ymd(2020, 1, 3), 1.0)];
        assert!(matches!(
            Dataset::new(bars),
            Err(DataError::MissingDay { .. })
        ));
    }
}
