//! Mini-batch Adam training with reduce-on-plateau and early stopping on
//! validation RMSE.

mod adam;
mod checkpoint;

use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use adam::{adam_step, AdamState, BETA1, BETA2, EPSILON};
pub use checkpoint::{read_checkpoint, write_checkpoint, Checkpoint, CheckpointError, MAGIC};

use crate::autodiff::{rmse_loss, ParamStore, Tape, Tensor, TensorError, Var};
use crate::data::WindowSample;
use crate::model::{forward_batch, ModelConfig, ModelError};
use crate::Scalar;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("no gradient for parameter `{0}`")]
    MissingGradient(String),
    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },
    #[error("empty {0} window list")]
    NoWindows(&'static str),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SchedulerConfig {
    pub plateau_factor: f64,
    pub plateau_patience: usize,
}

impl Default for SchedulerConfig {
    fn default() -> Self {
        Self {
            plateau_factor: 0.5,
            plateau_patience: 5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub scheduler: SchedulerConfig,
    pub early_stop_patience: usize,
    pub max_epochs: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            batch_size: 32,
            weight_decay: 1e-4,
            scheduler: SchedulerConfig::default(),
            early_stop_patience: 20,
            max_epochs: 200,
            seed: 42,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let fail = |m: &str| Err(TrainError::Config(m.into()));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return fail("learning_rate must be positive");
        }
        if self.batch_size == 0 {
            return fail("batch_size must be positive");
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return fail("weight_decay must be nonnegative");
        }
        let f = self.scheduler.plateau_factor;
        if !(f > 0.0 && f < 1.0) {
            return fail("plateau_factor must lie in (0, 1)");
        }
        if self.scheduler.plateau_patience == 0 || self.early_stop_patience == 0 {
            return fail("patience values must be positive");
        }
        Ok(())
    }
}

/// A differentiable map from stacked `(seqs * rows) x cols` windows to
/// `seqs x 1` predictions.
pub trait Forecaster<T: Scalar> {
    fn window_rows(&self) -> usize;
    fn window_cols(&self) -> usize;
    fn forward_batch(
        &self,
        tape: &mut Tape<T>,
        params: &ParamStore<T>,
        x: Var,
    ) -> Result<Var, ModelError>;
}

impl<T: Scalar> Forecaster<T> for ModelConfig {
    fn window_rows(&self) -> usize {
        self.lookback
    }

    fn window_cols(&self) -> usize {
        self.num_features()
    }

    fn forward_batch(
        &self,
        tape: &mut Tape<T>,
        params: &ParamStore<T>,
        x: Var,
    ) -> Result<Var, ModelError> {
        forward_batch(tape, params, self, x)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_rmse: f64,
    pub val_rmse: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome<T> {
    /// Snapshot with the lowest validation RMSE; the initial parameters when
    /// no epoch ran.
    pub params: ParamStore<T>,
    /// `None` when no epoch ran.
    pub best_val_rmse: Option<f64>,
    pub best_epoch: Option<usize>,
    pub history: Vec<EpochRecord>,
}

fn stack<'a, T: Scalar>(
    model: &impl Forecaster<T>,
    windows: impl ExactSizeIterator<Item = &'a WindowSample>,
) -> Result<(Tensor<T>, Tensor<T>), TrainError> {
    let (rows, cols) = (model.window_rows(), model.window_cols());
    let n = windows.len();
    let mut inputs = Vec::with_capacity(n * rows * cols);
    let mut targets = Vec::with_capacity(n);
    for w in windows {
        if w.inputs.len() != rows * cols {
            return Err(TrainError::Tensor(TensorError::ShapeMismatch {
                op: "stack_windows",
                lhs: vec![w.lookback, w.num_features],
                rhs: vec![rows, cols],
            }));
        }
        inputs.extend(w.inputs.iter().map(|&v| T::lit(v)));
        targets.push(T::lit(w.target));
    }
    Ok((
        Tensor::matrix(n * rows, cols, inputs)?,
        Tensor::matrix(n, 1, targets)?,
    ))
}

/// RMSE over `windows` in normalized units, evaluated in chunks of `batch`.
pub fn evaluate_rmse<T: Scalar>(
    model: &impl Forecaster<T>,
    params: &ParamStore<T>,
    windows: &[WindowSample],
    batch: usize,
) -> Result<f64, TrainError> {
    if windows.is_empty() {
        return Err(TrainError::NoWindows("evaluation"));
    }
    let mut sse = 0.0;
    for chunk in windows.chunks(batch.max(1)) {
        let (x, y) = stack(model, chunk.iter())?;
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let pred = model.forward_batch(&mut tape, params, xv)?;
        sse += tape
            .value(pred)
            .data()
            .iter()
            .zip(y.data())
            .map(|(&p, &t)| (p - t).to_f64_lossy().powi(2))
            .sum::<f64>();
    }
    Ok((sse / windows.len() as f64).sqrt())
}

/// Runs the full training loop.
///
/// Each epoch shuffles the training windows with a generator seeded from
/// `(seed, epoch)`, takes one Adam step per batch on the batch RMSE, and then
/// scores the validation windows. The learning rate is multiplied by
/// `plateau_factor` after `plateau_patience` consecutive non-improving epochs;
/// training stops after `early_stop_patience` of them.
pub fn train<T: Scalar>(
    model: &impl Forecaster<T>,
    initial: ParamStore<T>,
    train_windows: &[WindowSample],
    val_windows: &[WindowSample],
    cfg: &TrainConfig,
) -> Result<TrainOutcome<T>, TrainError> {
    cfg.validate()?;
    if train_windows.is_empty() {
        return Err(TrainError::NoWindows("training"));
    }
    if val_windows.is_empty() {
        return Err(TrainError::NoWindows("validation"));
    }
    let mut params = initial.snapshot();
    let mut best = TrainOutcome {
        params: initial,
        best_val_rmse: None,
        best_epoch: None,
        history: Vec::new(),
    };
    let mut adam = AdamState::new(&params);
    let mut lr = cfg.learning_rate;
    let mut plateau = 0;
    let mut stale = 0;
    let mut order: Vec<usize> = (0..train_windows.len()).collect();

    for epoch in 0..cfg.max_epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(epoch as u64);
        order.sort_unstable();
        order.shuffle(&mut rng);

        let mut sse = 0.0;
        for (batch, idx) in order.chunks(cfg.batch_size).enumerate() {
            let (x, y) = stack(model, idx.iter().map(|&i| &train_windows[i]))?;
            let mut tape = Tape::new();
            let xv = tape.constant(x);
            let yv = tape.constant(y);
            let pred = match model.forward_batch(&mut tape, &params, xv) {
                Err(ModelError::NonFiniteActivation) => {
                    return Err(TrainError::NonFiniteLoss { epoch, batch })
                }
                other => other?,
            };
            let loss = rmse_loss(&mut tape, pred, yv)?;
            let value = tape.value(loss).item().to_f64_lossy();
            if !value.is_finite() {
                return Err(TrainError::NonFiniteLoss { epoch, batch });
            }
            sse += value * value * idx.len() as f64;
            tape.backward(loss, &mut params)?;
            adam_step(&mut params, &mut adam, T::lit(lr), T::lit(cfg.weight_decay))?;
        }
        let train_rmse = (sse / train_windows.len() as f64).sqrt();
        let val_rmse = evaluate_rmse(model, &params, val_windows, cfg.batch_size)?;
        if !val_rmse.is_finite() {
            return Err(TrainError::NonFiniteLoss { epoch, batch: 0 });
        }
        best.history.push(EpochRecord {
            epoch,
            train_rmse,
            val_rmse,
            lr,
        });

        if best.best_val_rmse.is_none_or(|b| val_rmse < b) {
            best.best_val_rmse = Some(val_rmse);
            best.best_epoch = Some(epoch);
            best.params = params.snapshot();
            plateau = 0;
            stale = 0;
        } else {
            plateau += 1;
            stale += 1;
            if stale >= cfg.early_stop_patience {
                break;
            }
            if plateau >= cfg.scheduler.plateau_patience {
                lr *= cfg.scheduler.plateau_factor;
                plateau = 0;
            }
        }
    }
    Ok(best)
}

/// Writes `epoch,train_rmse,val_rmse,lr` rows with a header.
pub fn write_history(w: impl Write, history: &[EpochRecord]) -> Result<(), csv::Error> {
    let mut out = csv::Writer::from_writer(w);
    if history.is_empty() {
        out.write_record(["epoch", "train_rmse", "val_rmse", "lr"])?;
    }
    for rec in history {
        out.serialize(rec)?;
    }
    out.flush()?;
    Ok(())
}
