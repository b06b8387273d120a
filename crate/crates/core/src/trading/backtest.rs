use serde::{Deserialize, Serialize};

use super::{
    execute, extended_smart_decide, smart_decide, vanilla_decide, PortfolioState, TradeDecision,
    TradingError,
};
use crate::metrics::mdd;
use crate::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Vanilla,
    Smart,
    ExtendedSmart,
}

impl Strategy {
    pub const ALL: [Strategy; 3] = [Strategy::Vanilla, Strategy::Smart, Strategy::ExtendedSmart];

    pub fn as_str(&self) -> &'static str {
        match self {
            Strategy::Vanilla => "vanilla",
            Strategy::Smart => "smart",
            Strategy::ExtendedSmart => "extended_smart",
        }
    }
}

impl std::fmt::Display for Strategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Strategy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Strategy::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| format!("unknown strategy `{s}`"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StrategyParams<T> {
    /// Vanilla trigger on `|x - y| / x`, as a fraction.
    pub threshold: T,
    /// Half-width of the Smart band, in percent.
    pub risk: T,
    /// Largest short position in BTC for Extended Smart.
    pub max_short: T,
    pub fee_rate: T,
}

impl Default for StrategyParams<f64> {
    fn default() -> Self {
        Self {
            threshold: 0.01,
            risk: 2.0,
            max_short: 0.002,
            fee_rate: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRow<T> {
    pub close: T,
    /// `None` on a final valuation-only day.
    pub prediction: Option<T>,
    pub decision: TradeDecision<T>,
    pub cash: T,
    pub position: T,
    pub networth: T,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BacktestResult<T> {
    pub networth: Vec<T>,
    pub final_balance: T,
    /// Percent. Reported as 100 when net worth ever reached zero or below.
    pub mdd: T,
    pub trades: usize,
    pub nonpositive_networth_flag: bool,
    pub trace: Vec<TraceRow<T>>,
}

/// Simulates one strategy day by day.
///
/// `predictions[t]` forecasts `closes[t + 1]` and is acted on at
/// `closes[t]`. `predictions` may be as long as `closes` or one shorter; in
/// the latter case the last day is only marked to market. Positions are never
/// force-liquidated, so the final balance is the last net worth.
pub fn backtest<T: Scalar>(
    closes: &[T],
    predictions: &[T],
    strategy: Strategy,
    params: &StrategyParams<T>,
    initial_cash: T,
) -> Result<BacktestResult<T>, TradingError> {
    if closes.is_empty() {
        return Err(TradingError::AlignmentError("no trading days".into()));
    }
    if predictions.len() != closes.len() && predictions.len() + 1 != closes.len() {
        return Err(TradingError::AlignmentError(format!(
            "{} predictions for {} closes",
            predictions.len(),
            closes.len()
        )));
    }
    if !(initial_cash >= T::zero()) {
        return Err(TradingError::InvariantViolation("negative initial cash".into()));
    }
    let mut state = PortfolioState::new(initial_cash);
    let mut trades = 0;
    let mut trace = Vec::with_capacity(closes.len());
    for (t, &x) in closes.iter().enumerate() {
        let prediction = predictions.get(t).copied();
        let decision = match prediction {
            None => TradeDecision::Hold,
            Some(y) => match strategy {
                Strategy::Vanilla => vanilla_decide(x, y, params.threshold)?,
                Strategy::Smart => smart_decide(x, y, params.risk)?,
                Strategy::ExtendedSmart => {
                    extended_smart_decide(x, y, params.risk, state.position, params.max_short)?
                }
            },
        };
        let (next, traded) = execute(state, decision, x, params.fee_rate)?;
        state = next;
        trades += usize::from(traded);
        trace.push(TraceRow {
            close: x,
            prediction,
            decision,
            cash: state.cash,
            position: state.position,
            networth: state.networth(x),
        });
    }
    let networth: Vec<T> = trace.iter().map(|r| r.networth).collect();
    let flag = networth.iter().any(|&v| !(v > T::zero()));
    let mdd_percent = if flag {
        T::lit(100.0)
    } else {
        mdd(&networth).expect("positive non-empty series") * T::lit(100.0)
    };
    Ok(BacktestResult {
        final_balance: *networth.last().expect("non-empty"),
        networth,
        mdd: mdd_percent,
        trades,
        nonpositive_networth_flag: flag,
        trace,
    })
}
