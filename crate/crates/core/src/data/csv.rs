//! Yahoo-style daily CSV: `Date,Open,High,Low,Close[,Adj Close],Volume`.

use std::io::{Read, Write};

use chrono::NaiveDate;

use super::{check_succession, DataError, Dataset, OhlcvBar};

const REQUIRED: [&str; 6] = ["Date", "Open", "High", "Low", "Close", "Volume"];

/// Parses and validates a daily OHLCV CSV. Line numbers in errors are
/// 1-based with the header on line 1.
pub fn parse_csv<R: Read>(reader: R) -> Result<Dataset, DataError> {
    let mut rdr = ::csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(::csv::Trim::All)
        .from_reader(reader);
    let headers = rdr
        .headers()
        .map_err(|e| DataError::MalformedRow {
            line: 1,
            reason: e.to_string(),
        })?
        .clone();
    if headers.iter().all(|h| h.is_empty()) {
        return Err(DataError::EmptyInput);
    }
    let mut cols = [0usize; 6];
    for (slot, name) in cols.iter_mut().zip(REQUIRED) {
        *slot = headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| DataError::MalformedRow {
                line: 1,
                reason: format!("header is missing column `{name}`"),
            })?;
    }

    let mut bars: Vec<OhlcvBar> = Vec::new();
    for (i, record) in rdr.records().enumerate() {
        let line = i + 2;
        let record = record.map_err(|e| DataError::MalformedRow {
            line,
            reason: e.to_string(),
        })?;
        if record.iter().all(|f| f.is_empty()) {
            continue;
        }
        let field = |k: usize| -> Result<&str, DataError> {
            record.get(cols[k]).ok_or_else(|| DataError::MalformedRow {
                line,
                reason: format!("missing `{}` field", REQUIRED[k]),
            })
        };
        let number = |k: usize| -> Result<f64, DataError> {
            let raw = field(k)?;
            raw.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| DataError::MalformedRow {
                    line,
                    reason: format!("cannot parse {} `{raw}`", REQUIRED[k]),
                })
        };
        let raw_date = field(0)?;
        let date = NaiveDate::parse_from_str(raw_date, "%Y-%m-%d").map_err(|_| {
            DataError::MalformedRow {
                line,
                reason: format!("cannot parse date `{raw_date}`"),
            }
        })?;
        let bar = OhlcvBar {
            date,
            open: number(1)?,
            high: number(2)?,
            low: number(3)?,
            close: number(4)?,
            volume: number(5)?,
        };
        bar.validate()
            .map_err(|reason| DataError::MalformedRow { line, reason })?;
        if let Some(prev) = bars.last() {
            check_succession(prev.date, date, line)?;
        }
        bars.push(bar);
    }
    if bars.is_empty() {
        return Err(DataError::EmptyInput);
    }
    Dataset::new(bars)
}

/// Writes `dataset` in the format [`parse_csv`] reads. Values use the
/// shortest representation that parses back to the same `f64`.
pub fn serialize_csv<W: Write>(dataset: &Dataset, mut out: W) -> std::io::Result<()> {
    writeln!(out, "{}", REQUIRED.join(","))?;
    for b in dataset.bars() {
        writeln!(
            out,
            "{},{},{},{},{},{}",
            b.date.format("%Y-%m-%d"),
            b.open,
            b.high,
            b.low,
            b.close,
            b.volume
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::Duration;
    use proptest::prelude::*;

    const HEADER: &str = "Date,Open,High,Low,Close,Volume\n";

    #[test]
    fn single_row() {
        let text = format!("{HEADER}2023-09-17,26534.1,26619.3,26420.0,26527.8,7.1e9\n");
        let ds = parse_csv(text.as_bytes()).unwrap();
        assert_eq!(ds.len(), 1);
        assert_eq!(ds.bars()[0].close, 26527.8);
        assert_eq!(ds.bars()[0].volume, 7.1e9);
    }

    #[test]
    fn adj_close_is_ignored() {
        let text = "Date,Open,High,Low,Close,Adj Close,Volume\n\
                    2023-09-17,10,12,9,11,999,5\n\
                    2023-09-18,11,13,10,12,999,6\n";
        let ds = parse_csv(text.as_bytes()).unwrap();
        assert_eq!(ds.closes(), vec![11.0, 12.0]);
    }

    #[test]
    fn descending_dates_rejected() {
        let text = format!("{HEADER}2023-09-18,10,12,9,11,5\n2023-09-17,10,12,9,11,5\n");
        assert!(matches!(
            parse_csv(text.as_bytes()),
            Err(DataError::NonMonotonicDates { line: 3, .. })
        ));
    }

    #[test]
    fn low_above_high_rejected() {
        let text = format!("{HEADER}2023-09-17,10,9,12,10,5\n");
        assert!(matches!(
            parse_csv(text.as_bytes()),
            Err(DataError::MalformedRow { line: 2, .. })
        ));
    }

    #[test]
    fn gap_rejected() {
        let text = format!("{HEADER}2023-09-17,10,12,9,11,5\n2023-09-19,10,12,9,11,5\n");
        let err = parse_csv(text.as_bytes()).unwrap_err();
        assert!(matches!(err, DataError::MissingDay { line: 3, .. }));
        assert!(err.to_string().contains("2023-09-18"));
    }

    #[test]
    fn empty_inputs() {
        assert_eq!(parse_csv("".as_bytes()), Err(DataError::EmptyInput));
        assert_eq!(parse_csv(HEADER.as_bytes()), Err(DataError::EmptyInput));
    }

    #[test]
    fn unparseable_field() {
        let text = format!("{HEADER}2023-09-17,10,12,null,11,5\n");
        assert!(matches!(
            parse_csv(text.as_bytes()),
            Err(DataError::MalformedRow { line: 2, .. })
        ));
    }

    #[test]
    fn missing_column() {
        let text = "Date,Open,High,Low,Close\n2023-09-17,10,12,9,11\n";
        assert!(matches!(
            parse_csv(text.as_bytes()),
            Err(DataError::MalformedRow { line: 1, .. })
        ));
    }

    fn arb_dataset() -> impl Strategy<Value = Dataset> {
        prop::collection::vec(
            (1e-3f64..1e6, 0.0f64..0.2, 0.0f64..0.2, 0.0f64..1.0, 0.0f64..1e12),
            1..60,
        )
        .prop_map(|rows| {
            let start = NaiveDate::from_ymd_opt(2018, 1, 1).unwrap();
            let bars = rows
                .into_iter()
                .enumerate()
                .map(|(i, (mid, up, down, mix, volume))| {
                    let high = mid * (1.0 + up);
                    let low = mid * (1.0 - down);
                    let open = low + (high - low) * mix;
                    let close = low + (high - low) * (1.0 - mix);
                    OhlcvBar {
                        date: start + Duration::days(i as i64),
                        open,
                        high,
                        low,
                        close,
                        volume,
                    }
                })
                .collect();
            Dataset::new(bars).unwrap()
        })
    }

    proptest! {
        #[test]
        fn serialize_then_parse_is_identity(ds in arb_dataset()) {
            let mut buf = Vec::new();
            serialize_csv(&ds, &mut buf).unwrap();
            let back = parse_csv(buf.as_slice()).unwrap();
            prop_assert_eq!(back, ds);
        }
    }
}
