//! Prediction-driven trading rules and a daily backtest simulator.
//!
//! All three rules compare today's close `x` with tomorrow's predicted close
//! `y`. Vanilla goes all-in or all-out once the relative gap reaches a
//! threshold. Smart scales the trade size by where `x` sits inside the band
//! `[(1 - risk) y, (1 + risk) y]`. Extended Smart additionally sells short,
//! down to a fixed cap, when `x` is above the band.

mod backtest;

pub use backtest::{backtest, BacktestResult, Strategy, StrategyParams, TraceRow};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::Scalar;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TradingError {
    #[error("prices must be positive (today {today}, predicted {predicted})")]
    NonPositivePrice { today: f64, predicted: f64 },
    #[error("risk must lie strictly between 0 and 100 percent, got {0}")]
    BadRisk(f64),
    #[error("position {position} is beyond the short cap {max_short}")]
    ShortCapExceeded { position: f64, max_short: f64 },
    #[error("portfolio invariant violated: {0}")]
    InvariantViolation(String),
    #[error("alignment error: {0}")]
    AlignmentError(String),
}

/// Cash in USD and holdings in BTC. Holdings go negative only under
/// Extended Smart.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PortfolioState<T> {
    pub cash: T,
    pub position: T,
}

impl<T: Scalar> PortfolioState<T> {
    pub fn new(cash: T) -> Self {
        Self {
            cash,
            position: T::zero(),
        }
    }

    pub fn networth(&self, price: T) -> T {
        self.cash + self.position * price
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TradeDecision<T> {
    Hold,
    /// Spend this fraction of cash.
    BuyFraction { fraction: T },
    /// Sell this fraction of a long position.
    SellFraction { fraction: T },
    BuyAll,
    SellAll,
    /// Sell until the position equals `-max_short`.
    SellToShortCap { max_short: T },
}

impl<T: Scalar> TradeDecision<T> {
    pub fn name(&self) -> &'static str {
        match self {
            TradeDecision::Hold => "hold",
            TradeDecision::BuyFraction { .. } => "buy_fraction",
            TradeDecision::SellFraction { .. } => "sell_fraction",
            TradeDecision::BuyAll => "buy_all",
            TradeDecision::SellAll => "sell_all",
            TradeDecision::SellToShortCap { .. } => "sell_to_short_cap",
        }
    }

    pub fn fraction(&self) -> Option<T> {
        match *self {
            TradeDecision::BuyFraction { fraction } | TradeDecision::SellFraction { fraction } => {
                Some(fraction)
            }
            _ => None,
        }
    }
}

fn check_prices<T: Scalar>(x: T, y: T) -> Result<(), TradingError> {
    if !(x > T::zero() && y > T::zero()) {
        return Err(TradingError::NonPositivePrice {
            today: x.to_f64_lossy(),
            predicted: y.to_f64_lossy(),
        });
    }
    Ok(())
}

fn band<T: Scalar>(y: T, risk: T) -> Result<(T, T), TradingError> {
    if !(risk > T::zero() && risk < T::lit(100.0)) {
        return Err(TradingError::BadRisk(risk.to_f64_lossy()));
    }
    let r = risk / T::lit(100.0);
    Ok(((T::one() + r) * y, (T::one() - r) * y))
}

/// All-in / all-out once `|x - y| / x` reaches `threshold`.
pub fn vanilla_decide<T: Scalar>(x: T, y: T, threshold: T) -> Result<TradeDecision<T>, TradingError> {
    check_prices(x, y)?;
    let d = ((x - y) / x).abs();
    Ok(if d >= threshold {
        if x > y {
            TradeDecision::SellAll
        } else {
            TradeDecision::BuyAll
        }
    } else {
        TradeDecision::Hold
    })
}

fn buy_side<T: Scalar>(x: T, y: T, y_min: T) -> TradeDecision<T> {
    if x <= y_min {
        TradeDecision::BuyAll
    } else {
        TradeDecision::BuyFraction {
            fraction: (y - x) / (y - y_min),
        }
    }
}

/// Trade size proportional to the distance of `x` from `y`, saturating at
/// the edges of the risk band. `risk` is in percent.
pub fn smart_decide<T: Scalar>(x: T, y: T, risk: T) -> Result<TradeDecision<T>, TradingError> {
    check_prices(x, y)?;
    let (y_max, y_min) = band(y, risk)?;
    Ok(if x >= y {
        if x >= y_max {
            TradeDecision::SellAll
        } else {
            TradeDecision::SellFraction {
                fraction: (x - y) / (y_max - y),
            }
        }
    } else {
        buy_side(x, y, y_min)
    })
}

/// Smart with short selling down to `-max_short` BTC above the band. Inside
/// the upper half of the band only a long position is reduced.
pub fn extended_smart_decide<T: Scalar>(
    x: T,
    y: T,
    risk: T,
    position: T,
    max_short: T,
) -> Result<TradeDecision<T>, TradingError> {
    check_prices(x, y)?;
    let (y_max, y_min) = band(y, risk)?;
    if !(max_short >= T::zero()) || position < -max_short {
        return Err(TradingError::ShortCapExceeded {
            position: position.to_f64_lossy(),
            max_short: max_short.to_f64_lossy(),
        });
    }
    Ok(if x >= y {
        if x >= y_max {
            TradeDecision::SellToShortCap { max_short }
        } else if position > T::zero() {
            TradeDecision::SellFraction {
                fraction: (x - y) / (y_max - y),
            }
        } else {
            TradeDecision::Hold
        }
    } else {
        buy_side(x, y, y_min)
    })
}

/// Applies `decision` at `price`, charging `fee_rate` on the traded notional.
///
/// Returns the new state and whether anything changed hands.
pub fn execute<T: Scalar>(
    state: PortfolioState<T>,
    decision: TradeDecision<T>,
    price: T,
    fee_rate: T,
) -> Result<(PortfolioState<T>, bool), TradingError> {
    let zero = T::zero();
    let one = T::one();
    if !(price > zero) {
        return Err(TradingError::InvariantViolation(format!(
            "non-positive price {}",
            price.to_f64_lossy()
        )));
    }
    if !(state.cash >= zero) {
        return Err(TradingError::InvariantViolation(format!(
            "negative cash {}",
            state.cash.to_f64_lossy()
        )));
    }
    if !(fee_rate >= zero && fee_rate < one) {
        return Err(TradingError::InvariantViolation(format!(
            "fee rate {} outside [0, 1)",
            fee_rate.to_f64_lossy()
        )));
    }
    let check_fraction = |f: T| {
        if f >= zero && f <= one {
            Ok(f)
        } else {
            Err(TradingError::InvariantViolation(format!(
                "fraction {} outside [0, 1]",
                f.to_f64_lossy()
            )))
        }
    };
    let buy = |s: PortfolioState<T>, spend: T| {
        let mut next = s;
        next.cash = s.cash - spend;
        next.position = s.position + spend * (one - fee_rate) / price;
        (next, spend > zero)
    };
    let sell = |s: PortfolioState<T>, units: T| {
        let mut next = s;
        next.position = s.position - units;
        next.cash = s.cash + units * price * (one - fee_rate);
        (next, units > zero)
    };
    let long = state.position.max(zero);
    let out = match decision {
        TradeDecision::Hold => (state, false),
        TradeDecision::BuyAll => {
            let (mut next, traded) = buy(state, state.cash);
            next.cash = zero;
            (next, traded)
        }
        TradeDecision::BuyFraction { fraction } => buy(state, check_fraction(fraction)? * state.cash),
        TradeDecision::SellAll => {
            let (mut next, traded) = sell(state, long);
            if traded {
                next.position = zero;
            }
            (next, traded)
        }
        TradeDecision::SellFraction { fraction } => sell(state, check_fraction(fraction)? * long),
        TradeDecision::SellToShortCap { max_short } => {
            let units = (state.position + max_short).max(zero);
            let (mut next, traded) = sell(state, units);
            if traded {
                next.position = -max_short;
            }
            (next, traded)
        }
    };
    if !(out.0.cash >= zero) {
        return Err(TradingError::InvariantViolation(format!(
            "cash went negative: {}",
            out.0.cash.to_f64_lossy()
        )));
    }
    Ok(out)
}
