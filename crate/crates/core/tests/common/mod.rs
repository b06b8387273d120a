//! Independent oracles shared by the integration tests.
#![allow(dead_code)]

use cryptomamba::autodiff::{ParamStore, Tape, Tensor, Var};
use cryptomamba::model::ModelConfig;
use cryptomamba::ssm::MambaConfig;
use rand::Rng;

pub fn rand_tensor(rng: &mut impl Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Worst mismatch found by [`finite_difference_check`].
#[derive(Debug, Clone)]
pub struct FdReport {
    pub checked: usize,
    pub worst_rel: f64,
    pub worst_at: String,
}

impl FdReport {
    pub fn passed(&self, tol: f64) -> bool {
        self.worst_rel <= tol
    }
}

/// Compares `backward` against central differences for every entry of every
/// parameter in `store`. Error per entry is `|a - n| / max(|a|, |n|, floor)`.
pub fn finite_difference_check(
    store: &mut ParamStore<f64>,
    loss: impl Fn(&mut Tape<f64>, &ParamStore<f64>) -> Var,
    step: f64,
    floor: f64,
) -> FdReport {
    let eval = |s: &ParamStore<f64>| {
        let mut tape = Tape::new();
        let l = loss(&mut tape, s);
        tape.value(l).item()
    };
    let mut tape = Tape::new();
    let l = loss(&mut tape, store);
    tape.backward(l, store).unwrap();
    let analytic: Vec<(String, Vec<f64>)> = store
        .iter()
        .map(|(p, v)| (p.to_string(), v.grad.as_ref().unwrap().data().to_vec()))
        .collect();
    let mut report = FdReport {
        checked: 0,
        worst_rel: 0.0,
        worst_at: String::new(),
    };
    for (path, grad) in analytic {
        for (i, &a) in grad.iter().enumerate() {
            let orig = store.get(&path).unwrap().data()[i];
            store.get_mut(&path).unwrap().data_mut()[i] = orig + step;
            let up = eval(store);
            store.get_mut(&path).unwrap().data_mut()[i] = orig - step;
            let down = eval(store);
            store.get_mut(&path).unwrap().data_mut()[i] = orig;
            let n = (up - down) / (2.0 * step);
            let rel = (a - n).abs() / a.abs().max(n.abs()).max(floor);
            report.checked += 1;
            if rel > report.worst_rel {
                report.worst_rel = rel;
                report.worst_at = format!("{path}[{i}]: analytic {a}, numeric {n}");
            }
        }
    }
    report
}

/// `sum(out * weights)` with fixed random weights, a generic scalar probe.
pub fn weighted_sum(tape: &mut Tape<f64>, out: Var, weights: &Tensor<f64>) -> Var {
    let w = tape.constant(weights.clone());
    let p = tape.mul(out, w).unwrap();
    tape.sum(p)
}

/// Per-step loop over the discrete recurrence with per-(t, channel, state)
/// coefficients. Layouts as in `ssm_scan`.
pub fn naive_scan(
    a_bar: &[f64],
    b_bar: &[f64],
    c: &[f64],
    u: &[f64],
    d_skip: &[f64],
    len: usize,
    channels: usize,
    state: usize,
) -> Vec<f64> {
    let mut h = vec![vec![0.0; state]; channels];
    let mut y = Vec::with_capacity(len * channels);
    for t in 0..len {
        for (j, hj) in h.iter_mut().enumerate() {
            let ut = u[t * channels + j];
            let mut out = 0.0;
            for (n, hn) in hj.iter_mut().enumerate() {
                let idx = (t * channels + j) * state + n;
                *hn = a_bar[idx] * *hn + b_bar[idx] * ut;
                out += c[t * state + n] * *hn;
            }
            y.push(out + d_skip[j] * ut);
        }
    }
    y
}

fn get<'a>(store: &'a ParamStore<f64>, path: &str) -> &'a [f64] {
    store.get(path).unwrap_or_else(|| panic!("missing {path}")).data()
}

/// `x (r x k) * w (k x c)` by the textbook triple loop.
pub fn matmul(x: &[f64], r: usize, k: usize, w: &[f64], c: usize) -> Vec<f64> {
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            let mut s = 0.0;
            for p in 0..k {
                s += x[i * k + p] * w[p * c + j];
            }
            out[i * c + j] = s;
        }
    }
    out
}

fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

/// One Mamba block on a single sequence `x` (`len x model_dim`).
pub fn naive_block(
    store: &ParamStore<f64>,
    prefix: &str,
    cfg: &MambaConfig,
    x: &[f64],
    len: usize,
) -> Vec<f64> {
    let m = cfg.model_dim;
    let d = cfg.inner_dim();
    let ns = cfg.d_state;
    let p = |name: &str| get(store, &format!("{prefix}.{name}"));

    let (u, gate) = if cfg.bare_ssm {
        (x.to_vec(), None)
    } else {
        let xz = matmul(x, len, m, p("in_proj"), 2 * d);
        let (w, b, k) = (p("conv_weight"), p("conv_bias"), cfg.conv_width);
        let mut u = vec![0.0; len * d];
        let mut gate = vec![0.0; len * d];
        for t in 0..len {
            for j in 0..d {
                let mut acc = b[j];
                // tap k-1 is the current step, tap 0 the oldest
                for back in 0..k {
                    if back <= t {
                        acc += w[j * k + (k - 1 - back)] * xz[(t - back) * 2 * d + j];
                    }
                }
                u[t * d + j] = silu(acc);
                gate[t * d + j] = xz[t * 2 * d + d + j];
            }
        }
        (u, Some(gate))
    };

    let bm = matmul(&u, len, d, p("b_proj"), ns);
    let cm = matmul(&u, len, d, p("c_proj"), ns);
    let raw = matmul(&u, len, d, p("dt_proj"), d);
    let (dt_bias, a_log, d_skip) = (p("dt_bias"), p("a_log"), p("d_skip"));

    let mut h = vec![0.0; d * ns];
    let mut y = vec![0.0; len * d];
    for t in 0..len {
        for j in 0..d {
            let delta = softplus(raw[t * d + j] + dt_bias[j]);
            let ut = u[t * d + j];
            let mut out = 0.0;
            for n in 0..ns {
                let a = -a_log[j * ns + n].exp();
                let a_bar = (delta * a).exp();
                let g = if (delta * a).abs() < 1e-8 {
                    delta
                } else {
                    (a_bar - 1.0) / a
                };
                let hv = &mut h[j * ns + n];
                *hv = a_bar * *hv + g * bm[t * ns + n] * ut;
                out += cm[t * ns + n] * *hv;
            }
            y[t * d + j] = out + d_skip[j] * ut;
        }
    }
    if let Some(gate) = gate {
        for (v, g) in y.iter_mut().zip(gate) {
            *v *= silu(g);
        }
    }
    matmul(&y, len, d, p("out_proj"), m)
}

/// Full model on one window (`lookback x features`), straight-line.
pub fn naive_model(store: &ParamStore<f64>, cfg: &ModelConfig, window: &[f64]) -> f64 {
    let m = cfg.model_dim;
    let f = cfg.num_features();
    let mut h = matmul(window, cfg.lookback, f, get(store, "embed.weight"), m);
    let eb = get(store, "embed.bias");
    for (i, v) in h.iter_mut().enumerate() {
        *v += eb[i % m];
    }
    let mut merged = Vec::new();
    let mamba = cfg.mamba();
    for (c, &len) in cfg.cblock_seq_lens.iter().enumerate() {
        for k in 0..cfg.cmblocks_per_cblock {
            let pre = format!("cblocks.{c}.cmblocks.{k}");
            let gamma = get(store, &format!("{pre}.norm.gamma"));
            let beta = get(store, &format!("{pre}.norm.beta"));
            let mut normed = vec![0.0; len * m];
            for t in 0..len {
                let row = &h[t * m..(t + 1) * m];
                let mean = row.iter().sum::<f64>() / m as f64;
                let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / m as f64;
                let sd = (var + cfg.norm_eps).sqrt();
                for j in 0..m {
                    normed[t * m + j] = (row[j] - mean) / sd * gamma[j] + beta[j];
                }
            }
            let y = naive_block(store, &format!("{pre}.mamba"), &mamba, &normed, len);
            h = if cfg.residual {
                h.iter().zip(&y).map(|(a, b)| a + b).collect()
            } else {
                y
            };
        }
        let out_len = cfg.output_len(c);
        let w = get(store, &format!("cblocks.{c}.mlp.weight"));
        let b = get(store, &format!("cblocks.{c}.mlp.bias"));
        let mut next = vec![0.0; out_len * m];
        for o in 0..out_len {
            for j in 0..m {
                let mut s = b[o];
                for i in 0..len {
                    s += w[o * len + i] * h[i * m + j];
                }
                next[o * m + j] = s;
            }
        }
        merged.extend_from_slice(&next);
        h = next;
    }
    let w = get(store, "merge.weight");
    merged.iter().zip(w).map(|(a, b)| a * b).sum::<f64>() + get(store, "merge.bias")[0]
}

/// Maximum over all `i <= t` of `(P_i - P_t) / P_i`.
pub fn brute_force_mdd(p: &[f64]) -> f64 {
    let mut worst = 0.0f64;
    for t in 0..p.len() {
        for i in 0..=t {
            worst = worst.max((p[i] - p[t]) / p[i]);
        }
    }
    worst
}

/// Day-loop portfolio simulator written without the library's decision or
/// execution helpers. Returns (networth series, trades).
pub fn reference_backtest(
    closes: &[f64],
    preds: &[f64],
    strategy: &str,
    threshold: f64,
    risk: f64,
    max_short: f64,
    fee: f64,
    initial: f64,
) -> (Vec<f64>, usize) {
    let mut cash = initial;
    let mut pos = 0.0f64;
    let mut trades = 0;
    let mut nw = Vec::new();
    for (t, &x) in closes.iter().enumerate() {
        if let Some(&y) = preds.get(t) {
            let r = risk / 100.0;
            let (y_max, y_min) = ((1.0 + r) * y, (1.0 - r) * y);
            // (buy share of cash, sell share of long position, short target)
            let (buy, sell, short): (f64, f64, Option<f64>) = match strategy {
                "vanilla" => {
                    let d = ((x - y) / x).abs();
                    if d < threshold {
                        (0.0, 0.0, None)
                    } else if x > y {
                        (0.0, 1.0, None)
                    } else {
                        (1.0, 0.0, None)
                    }
                }
                _ if x < y => {
                    if x <= y_min {
                        (1.0, 0.0, None)
                    } else {
                        ((y - x) / (y - y_min), 0.0, None)
                    }
                }
                "smart" => {
                    if x >= y_max {
                        (0.0, 1.0, None)
                    } else {
                        (0.0, (x - y) / (y_max - y), None)
                    }
                }
                _ => {
                    if x >= y_max {
                        (0.0, 0.0, Some(max_short))
                    } else if pos > 0.0 {
                        (0.0, (x - y) / (y_max - y), None)
                    } else {
                        (0.0, 0.0, None)
                    }
                }
            };
            if buy > 0.0 {
                let spend = if buy == 1.0 { cash } else { buy * cash };
                if spend > 0.0 {
                    pos += spend * (1.0 - fee) / x;
                    cash = if buy == 1.0 { 0.0 } else { cash - spend };
                    trades += 1;
                }
            } else if sell > 0.0 {
                let units = sell * pos.max(0.0);
                if units > 0.0 {
                    cash += units * x * (1.0 - fee);
                    pos = if sell == 1.0 { 0.0 } else { pos - units };
                    trades += 1;
                }
            } else if let Some(cap) = short {
                let units = (pos + cap).max(0.0);
                if units > 0.0 {
                    cash += units * x * (1.0 - fee);
                    pos = -cap;
                    trades += 1;
                }
            }
        }
        nw.push(cash + pos * x);
    }
    (nw, trades)
}
