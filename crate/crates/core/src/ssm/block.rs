use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamStore, Tape, Tensor, TensorError, Var};
use crate::Scalar;

/// Hyperparameters of one Mamba block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MambaConfig {
    pub model_dim: usize,
    pub d_state: usize,
    /// Inner width is `expand * model_dim`.
    pub expand: usize,
    pub conv_width: usize,
    /// Drop the input projection, convolution and gate; scan the block input directly.
    pub bare_ssm: bool,
}

impl MambaConfig {
    pub fn inner_dim(&self) -> usize {
        if self.bare_ssm {
            self.model_dim
        } else {
            self.expand * self.model_dim
        }
    }
}

/// Input-dependent SSM parameters for a batch of sequences.
#[derive(Debug, Clone, Copy)]
pub struct SelectiveParams {
    /// `rows x d_state`
    pub b: Var,
    /// `rows x d_state`
    pub c: Var,
    /// `rows x channels`, strictly positive.
    pub delta: Var,
}

fn uniform<T: Scalar>(rng: &mut impl Rng, shape: &[usize], bound: f64) -> Tensor<T> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| T::lit(rng.random_range(-bound..bound)))
        .collect();
    Tensor::new(shape.to_vec(), data).expect("positive shape")
}

/// Adds the block's parameters under `prefix`.
///
/// Linear weights are uniform in `±1/sqrt(fan_in)`. `A = -exp(a_log)` starts
/// at `-(1..=d_state)` per channel, the skip term `D` at one, and the step-size
/// bias so that `softplus(bias)` is log-uniform in `[1e-3, 1e-1]`.
pub fn init_mamba_block<T: Scalar>(
    store: &mut ParamStore<T>,
    prefix: &str,
    cfg: &MambaConfig,
    rng: &mut impl Rng,
) -> Result<(), TensorError> {
    let m = cfg.model_dim;
    let d = cfg.inner_dim();
    let n = cfg.d_state;
    let p = |name: &str| format!("{prefix}.{name}");
    let inv_sqrt = |fan_in: usize| 1.0 / (fan_in as f64).sqrt();

    if !cfg.bare_ssm {
        store.insert(p("in_proj"), uniform(rng, &[m, 2 * d], inv_sqrt(m)))?;
        let k = cfg.conv_width;
        store.insert(p("conv_weight"), uniform(rng, &[d, k], inv_sqrt(k)))?;
        store.insert(p("conv_bias"), uniform(rng, &[d], inv_sqrt(k)))?;
    }
    store.insert(p("b_proj"), uniform(rng, &[d, n], inv_sqrt(d)))?;
    store.insert(p("c_proj"), uniform(rng, &[d, n], inv_sqrt(d)))?;
    store.insert(p("dt_proj"), uniform(rng, &[d, d], inv_sqrt(d)))?;

    let (lo, hi) = (1e-3f64.ln(), 1e-1f64.ln());
    let dt_bias = (0..d)
        .map(|_| {
            let dt: f64 = rng.random_range(lo..hi).exp();
            // inverse softplus
            T::lit(dt + (-(-dt).exp_m1()).ln())
        })
        .collect();
    store.insert(p("dt_bias"), Tensor::vector(dt_bias)?)?;

    let a_log = (0..d)
        .flat_map(|_| (1..=n).map(|i| T::lit((i as f64).ln())))
        .collect();
    store.insert(p("a_log"), Tensor::matrix(d, n, a_log)?)?;
    store.insert(p("d_skip"), Tensor::full(&[d], T::one()))?;
    store.insert(p("out_proj"), uniform(rng, &[d, m], inv_sqrt(d)))?;
    Ok(())
}

/// Projects `u` (`rows x channels`) to `B_t`, `C_t` and `delta_t`, where
/// `delta_t = softplus(u_t W_dt + bias)`.
pub fn selective_params<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    prefix: &str,
    u: Var,
) -> Result<SelectiveParams, TensorError> {
    let wb = tape.param(store, &format!("{prefix}.b_proj"))?;
    let wc = tape.param(store, &format!("{prefix}.c_proj"))?;
    let wdt = tape.param(store, &format!("{prefix}.dt_proj"))?;
    let bdt = tape.param(store, &format!("{prefix}.dt_bias"))?;
    let b = tape.matmul(u, wb)?;
    let c = tape.matmul(u, wc)?;
    let raw = tape.matmul(u, wdt)?;
    let raw = tape.add_row(raw, bdt)?;
    let delta = tape.softplus(raw);
    Ok(SelectiveParams { b, c, delta })
}

/// One Mamba block over `x` (`(seqs * seq_len) x model_dim`).
///
/// Input projection into a stream and a gate, causal depthwise convolution
/// and SiLU on the stream, selective scan, multiplication by `SiLU(gate)`,
/// output projection. With `bare_ssm` only the scan and output projection run.
pub fn mamba_block_forward<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    prefix: &str,
    cfg: &MambaConfig,
    x: Var,
    seq_len: usize,
) -> Result<Var, TensorError> {
    let p = |name: &str| format!("{prefix}.{name}");
    let d = cfg.inner_dim();

    let (u, gate) = if cfg.bare_ssm {
        (x, None)
    } else {
        let w_in = tape.param(store, &p("in_proj"))?;
        let xz = tape.matmul(x, w_in)?;
        let stream = tape.slice_cols(xz, 0, d)?;
        let gate = tape.slice_cols(xz, d, 2 * d)?;
        let cw = tape.param(store, &p("conv_weight"))?;
        let cb = tape.param(store, &p("conv_bias"))?;
        let conv = tape.causal_conv(stream, cw, cb, seq_len)?;
        (tape.silu(conv), Some(gate))
    };

    let sel = selective_params(tape, store, prefix, u)?;
    let a_log = tape.param(store, &p("a_log"))?;
    let a = tape.exp(a_log);
    let a = tape.neg(a);
    let d_skip = tape.param(store, &p("d_skip"))?;
    let mut y = tape.selective_scan(sel.delta, a, sel.b, sel.c, u, d_skip, seq_len)?;

    if let Some(gate) = gate {
        let g = tape.silu(gate);
        y = tape.mul(y, g)?;
    }
    let w_out = tape.param(store, &p("out_proj"))?;
    tape.matmul(y, w_out)
}
