//! Seeded synthetic daily series for tests and smoke runs.

use chrono::{Duration, NaiveDate};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};

use super::{Dataset, OhlcvBar};

/// Close path `level + trend * t + amplitude * sin(2 pi t / period) + noise`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SineTrend {
    pub start: NaiveDate,
    pub days: usize,
    pub level: f64,
    pub trend: f64,
    pub amplitude: f64,
    pub period: f64,
    pub noise: f64,
    pub seed: u64,
}

impl Default for SineTrend {
    fn default() -> Self {
        Self {
            start: NaiveDate::from_ymd_opt(2018, 9, 17).expect("valid date"),
            days: 2000,
            level: 100.0,
            trend: 0.01,
            amplitude: 10.0,
            period: 30.0,
            noise: 0.5,
            seed: 7,
        }
    }
}

impl SineTrend {
    pub fn closes(&self) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let noise = Normal::new(0.0, self.noise).expect("noise std must be finite and >= 0");
        (0..self.days)
            .map(|t| {
                let t = t as f64;
                self.level
                    + self.trend * t
                    + self.amplitude * (std::f64::consts::TAU * t / self.period).sin()
                    + noise.sample(&mut rng)
            })
            .collect()
    }

    /// Bars whose open is the previous close and whose high/low bracket both.
    pub fn dataset(&self) -> Dataset {
        bars_from_closes(self.start, &self.closes(), self.seed.wrapping_add(1))
    }
}

/// Wraps a close path into valid daily bars with seeded wicks and volume.
pub fn bars_from_closes(start: NaiveDate, closes: &[f64], seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let wick = Uniform::new(0.0, 0.01).expect("valid range");
    let volume = Uniform::new(1e3, 2e3).expect("valid range");
    let bars = closes
        .iter()
        .enumerate()
        .map(|(i, &close)| {
            let open = if i == 0 { close } else { closes[i - 1] };
            let high = open.max(close) * (1.0 + wick.sample(&mut rng));
            let low = open.min(close) * (1.0 - wick.sample(&mut rng));
            OhlcvBar {
                date: start + Duration::days(i as i64),
                open,
                high,
                low,
                close,
                volume: volume.sample(&mut rng),
            }
        })
        .collect();
    Dataset::new(bars).expect("synthetic bars satisfy invariants")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seeded_series_is_reproducible() {
        let cfg = SineTrend {
            days: 50,
            ..Default::default()
        };
        assert_eq!(cfg.dataset(), cfg.dataset());
        assert_eq!(cfg.dataset().len(), 50);
    }
}
