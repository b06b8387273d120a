//! Selective state-space forecasting of daily OHLCV series.
//!
//! The crate bundles a small reverse-mode autodiff engine, the Mamba-style
//! selective scan, the stacked C-Block forecaster, its training loop,
//! regression and drawdown metrics, and three trading rules with a daily
//! backtest simulator.
//!
//! Numeric code is generic over [`Scalar`] (`f32` or `f64`); the aliases at
//! the crate root pick `f64`, which is what training and checkpoints use.

// `!(x > 0)` forms keep NaN on the failing side
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod data;
pub mod metrics;
pub mod model;
pub mod scalar;
pub mod ssm;
pub mod trading;
pub mod train;

pub use scalar::Scalar;

pub type Tensor = autodiff::Tensor<f64>;
pub type Tape = autodiff::Tape<f64>;
pub type ParamStore = autodiff::ParamStore<f64>;
pub type AdamState = train::AdamState<f64>;
pub type PortfolioState = trading::PortfolioState<f64>;
pub type TradeDecision = trading::TradeDecision<f64>;
pub type BacktestResult = trading::BacktestResult<f64>;
pub type MetricReport = metrics::MetricReport<f64>;

pub type TensorF32 = autodiff::Tensor<f32>;
pub type ParamStoreF32 = autodiff::ParamStore<f32>;
