use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::TrainError;
use crate::autodiff::ParamStore;
use crate::Scalar;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

/// First and second moments per parameter path, plus the step counter.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct AdamState<T> {
    pub first: BTreeMap<String, Vec<T>>,
    pub second: BTreeMap<String, Vec<T>>,
    pub step: u64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(store: &ParamStore<T>) -> Self {
        let zeros = |len: usize| vec![T::zero(); len];
        Self {
            first: store
                .iter()
                .map(|(p, v)| (p.to_string(), zeros(v.value.len())))
                .collect(),
            second: store
                .iter()
                .map(|(p, v)| (p.to_string(), zeros(v.value.len())))
                .collect(),
            step: 0,
        }
    }
}

/// One Adam update with bias correction.
///
/// Weight decay is decoupled: `p <- p * (1 - lr * weight_decay)` precedes the
/// moment-based delta.
pub fn adam_step<T: Scalar>(
    store: &mut ParamStore<T>,
    state: &mut AdamState<T>,
    lr: T,
    weight_decay: T,
) -> Result<(), TrainError> {
    if let Some((path, _)) = store.iter().find(|(_, p)| p.grad.is_none()) {
        return Err(TrainError::MissingGradient(path.to_string()));
    }
    state.step += 1;
    let (b1, b2, eps) = (T::lit(BETA1), T::lit(BETA2), T::lit(EPSILON));
    let t = i32::try_from(state.step).unwrap_or(i32::MAX);
    let c1 = T::one() - b1.powi(t);
    let c2 = T::one() - b2.powi(t);
    let decay = T::one() - lr * weight_decay;
    for (path, param) in store.iter_mut() {
        let len = param.value.len();
        let m = state
            .first
            .entry(path.to_string())
            .or_insert_with(|| vec![T::zero(); len]);
        let v = state
            .second
            .entry(path.to_string())
            .or_insert_with(|| vec![T::zero(); len]);
        let grad = param.grad.as_ref().expect("checked above");
        for (((p, &g), m), v) in param
            .value
            .data_mut()
            .iter_mut()
            .zip(grad.data())
            .zip(m.iter_mut())
            .zip(v.iter_mut())
        {
            *m = b1 * *m + (T::one() - b1) * g;
            *v = b2 * *v + (T::one() - b2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *p = *p * decay - lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}
