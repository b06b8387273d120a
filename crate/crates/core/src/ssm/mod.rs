//! State-space machinery: zero-order-hold discretization, the linear
//! recurrence scan, and the selective (input-dependent) Mamba block.

mod block;
pub(crate) mod kernel;

pub use block::{
    init_mamba_block, mamba_block_forward, selective_params, MambaConfig, SelectiveParams,
};
pub use kernel::ScanDims;

use thiserror::Error;

use crate::Scalar;

/// Below this `|delta * a|` the input matrix uses the first-order series
/// `B_bar = delta * B` instead of `(exp(delta * a) - 1) / a * B`.
pub const ZOH_SERIES_CUTOFF: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SsmError {
    #[error("step size must be positive, got {value} at index {index}")]
    NonPositiveDelta { index: usize, value: f64 },
    #[error("state matrix entries must be negative, got {value} at index {index}")]
    NonNegativeA { index: usize, value: f64 },
    #[error("sequence length mismatch: {what} has {got} entries, expected {expected}")]
    LengthMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },
}

/// `(exp(delta * a), (exp(delta * a) - 1) / a)` for one diagonal entry.
///
/// The second value multiplies `B` to give `B_bar`. For tiny `|delta * a|`
/// it falls back to `delta`, the first-order limit.
#[inline]
pub fn zoh_coefficients<T: Scalar>(a: T, delta: T) -> (T, T) {
    let x = delta * a;
    let a_bar = x.exp();
    let g = if x.abs() < T::lit(ZOH_SERIES_CUTOFF) {
        delta
    } else {
        (a_bar - T::one()) / a
    };
    (a_bar, g)
}

/// Elementwise zero-order hold: returns `(A_bar, B_bar)`.
pub fn zoh_discretize<T: Scalar>(
    a_diag: &[T],
    b: &[T],
    delta: &[T],
) -> Result<(Vec<T>, Vec<T>), SsmError> {
    for (what, got) in [("B", b.len()), ("delta", delta.len())] {
        if got != a_diag.len() {
            return Err(SsmError::LengthMismatch {
                what,
                expected: a_diag.len(),
                got,
            });
        }
    }
    let mut a_bar = Vec::with_capacity(a_diag.len());
    let mut b_bar = Vec::with_capacity(a_diag.len());
    for (i, ((&a, &bv), &dt)) in a_diag.iter().zip(b).zip(delta).enumerate() {
        if !(dt > T::zero()) {
            return Err(SsmError::NonPositiveDelta {
                index: i,
                value: dt.to_f64_lossy(),
            });
        }
        if !(a < T::zero()) {
            return Err(SsmError::NonNegativeA {
                index: i,
                value: a.to_f64_lossy(),
            });
        }
        let (ab, g) = zoh_coefficients(a, dt);
        a_bar.push(ab);
        b_bar.push(g * bv);
    }
    Ok((a_bar, b_bar))
}

/// Discrete linear recurrence over one sequence, hidden state starting at zero:
///
/// `x_k = A_bar_k * x_{k-1} + B_bar_k * u_k`, `y_k = <C_k, x_k> + D * u_k`,
/// applied per channel with a diagonal `A_bar`.
///
/// Layouts: `a_bar`, `b_bar` are `len x channels x state`; `c` is
/// `len x state`; `u` is `len x channels`; `d_skip` is `channels`.
pub fn ssm_scan<T: Scalar>(
    a_bar: &[T],
    b_bar: &[T],
    c: &[T],
    u: &[T],
    d_skip: &[T],
    len: usize,
    channels: usize,
    state: usize,
) -> Result<Vec<T>, SsmError> {
    let checks = [
        ("A_bar", a_bar.len(), len * channels * state),
        ("B_bar", b_bar.len(), len * channels * state),
        ("C", c.len(), len * state),
        ("u", u.len(), len * channels),
        ("D", d_skip.len(), channels),
    ];
    for (what, got, expected) in checks {
        if got != expected {
            return Err(SsmError::LengthMismatch {
                what,
                expected,
                got,
            });
        }
    }
    let mut x = vec![T::zero(); channels * state];
    let mut y = vec![T::zero(); len * channels];
    for t in 0..len {
        for j in 0..channels {
            let uu = u[t * channels + j];
            let mut acc = T::zero();
            for n in 0..state {
                let k = (t * channels + j) * state + n;
                let h = &mut x[j * state + n];
                *h = a_bar[k] * *h + b_bar[k] * uu;
                acc += c[t * state + n] * *h;
            }
            y[t * channels + j] = acc + d_skip[j] * uu;
        }
    }
    Ok(y)
}
