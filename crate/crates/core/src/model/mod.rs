//! The stacked forecaster: input embedding, C-Blocks of normalized Mamba
//! blocks with a sequence-length MLP each, and a linear merge head over the
//! concatenated C-Block outputs.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{ParamStore, Tape, Tensor, TensorError, Var};
use crate::data::{num_features, DataError, Normalizer, OhlcvBar};
use crate::ssm::{init_mamba_block, mamba_block_forward, MambaConfig};
use crate::Scalar;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("non-finite activation in model output")]
    NonFiniteActivation,
}

/// Architecture hyperparameters.
///
/// Defaults: three C-Blocks at sequence lengths 14, 16 and 32 with four
/// CMBlocks each and `d_state = 64`. `model_dim = 19` puts the
/// volume-inclusive parameter count at 137,995 (137,976 without volume).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Input length of each C-Block; the first equals `lookback`.
    pub cblock_seq_lens: Vec<usize>,
    /// Output length of the last C-Block's MLP.
    pub final_seq_len: usize,
    pub cmblocks_per_cblock: usize,
    pub d_state: usize,
    pub model_dim: usize,
    pub expand: usize,
    pub conv_width: usize,
    pub use_volume: bool,
    pub lookback: usize,
    /// Residual connection around each CMBlock.
    pub residual: bool,
    /// Scan the normalized input directly, without projection, conv or gate.
    pub bare_ssm: bool,
    pub norm_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            cblock_seq_lens: vec![14, 16, 32],
            final_seq_len: 32,
            cmblocks_per_cblock: 4,
            d_state: 64,
            model_dim: 19,
            expand: 2,
            conv_width: 4,
            use_volume: true,
            lookback: 14,
            residual: true,
            bare_ssm: false,
            norm_eps: 1e-5,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let err = |m: &str| Err(ModelError::Config(m.to_string()));
        if self.cblock_seq_lens.is_empty() {
            return err("at least one C-Block is required");
        }
        if self.cblock_seq_lens[0] != self.lookback {
            return err("the first C-Block length must equal the lookback");
        }
        if self.cblock_seq_lens.contains(&0) || self.final_seq_len == 0 {
            return err("sequence lengths must be positive");
        }
        if self.cmblocks_per_cblock == 0
            || self.d_state == 0
            || self.model_dim == 0
            || self.expand == 0
            || self.conv_width == 0
        {
            return err("block dimensions must be positive");
        }
        if !(self.norm_eps > 0.0) {
            return err("norm_eps must be positive");
        }
        Ok(())
    }

    pub fn num_features(&self) -> usize {
        num_features(self.use_volume)
    }

    pub fn mamba(&self) -> MambaConfig {
        MambaConfig {
            model_dim: self.model_dim,
            d_state: self.d_state,
            expand: self.expand,
            conv_width: self.conv_width,
            bare_ssm: self.bare_ssm,
        }
    }

    /// Output length of C-Block `i`.
    pub fn output_len(&self, i: usize) -> usize {
        self.cblock_seq_lens
            .get(i + 1)
            .copied()
            .unwrap_or(self.final_seq_len)
    }

    /// Number of time steps entering the merge head.
    pub fn merged_len(&self) -> usize {
        (0..self.cblock_seq_lens.len()).map(|i| self.output_len(i)).sum()
    }
}

fn cmblock_prefix(c: usize, k: usize) -> String {
    format!("cblocks.{c}.cmblocks.{k}")
}

fn uniform<T: Scalar>(rng: &mut impl Rng, shape: &[usize], fan_in: usize) -> Tensor<T> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| T::lit(rng.random_range(-bound..bound)))
        .collect();
    Tensor::new(shape.to_vec(), data).expect("positive shape")
}

/// Seeded parameter initialization; identical seeds give identical bytes.
pub fn init_params<T: Scalar>(cfg: &ModelConfig, seed: u64) -> Result<ParamStore<T>, ModelError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let m = cfg.model_dim;
    let f = cfg.num_features();
    store.insert("embed.weight", uniform(&mut rng, &[f, m], f))?;
    store.insert("embed.bias", uniform(&mut rng, &[m], f))?;
    let mamba = cfg.mamba();
    for (c, &len) in cfg.cblock_seq_lens.iter().enumerate() {
        for k in 0..cfg.cmblocks_per_cblock {
            let prefix = cmblock_prefix(c, k);
            store.insert(format!("{prefix}.norm.gamma"), Tensor::full(&[m], T::one()))?;
            store.insert(format!("{prefix}.norm.beta"), Tensor::zeros(&[m]))?;
            init_mamba_block(&mut store, &format!("{prefix}.mamba"), &mamba, &mut rng)?;
        }
        let out = cfg.output_len(c);
        store.insert(format!("cblocks.{c}.mlp.weight"), uniform(&mut rng, &[out, len], len))?;
        store.insert(format!("cblocks.{c}.mlp.bias"), uniform(&mut rng, &[out], len))?;
    }
    let merged = cfg.merged_len() * m;
    store.insert("merge.weight", uniform(&mut rng, &[merged, 1], merged))?;
    store.insert("merge.bias", uniform(&mut rng, &[1], merged))?;
    Ok(store)
}

/// Total scalar parameter count.
pub fn count_parameters<T: Scalar>(params: &ParamStore<T>) -> usize {
    params.count()
}

/// Layer norm over channels, Mamba block, optional residual.
pub fn cmblock_forward<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    cfg: &ModelConfig,
    prefix: &str,
    x: Var,
    seq_len: usize,
) -> Result<Var, ModelError> {
    let gamma = tape.param(store, &format!("{prefix}.norm.gamma"))?;
    let beta = tape.param(store, &format!("{prefix}.norm.beta"))?;
    let h = tape.layer_norm(x, T::lit(cfg.norm_eps))?;
    let h = tape.mul_row(h, gamma)?;
    let h = tape.add_row(h, beta)?;
    let y = mamba_block_forward(tape, store, &format!("{prefix}.mamba"), &cfg.mamba(), h, seq_len)?;
    Ok(if cfg.residual { tape.add(x, y)? } else { y })
}

/// CMBlock chain followed by the time-axis MLP of C-Block `index`.
pub fn cblock_forward<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    cfg: &ModelConfig,
    index: usize,
    x: Var,
) -> Result<Var, ModelError> {
    let len = cfg.cblock_seq_lens[index];
    if !tape.value(x).rows().is_multiple_of(len) {
        return Err(ModelError::Tensor(TensorError::ShapeMismatch {
            op: "cblock_forward",
            lhs: tape.value(x).shape().to_vec(),
            rhs: vec![len],
        }));
    }
    let mut h = x;
    for k in 0..cfg.cmblocks_per_cblock {
        h = cmblock_forward(tape, store, cfg, &cmblock_prefix(index, k), h, len)?;
    }
    let w = tape.param(store, &format!("cblocks.{index}.mlp.weight"))?;
    let b = tape.param(store, &format!("cblocks.{index}.mlp.bias"))?;
    Ok(tape.time_mix(h, w, b, len)?)
}

/// Full forward pass for a batch.
///
/// `x` holds `seqs` windows stacked row-wise (`(seqs * lookback) x
/// num_features`); the result is `seqs x 1` normalized predictions.
pub fn forward_batch<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    cfg: &ModelConfig,
    x: Var,
) -> Result<Var, ModelError> {
    let shape = tape.value(x).shape().to_vec();
    if shape.len() != 2 || shape[1] != cfg.num_features() || !shape[0].is_multiple_of(cfg.lookback) {
        return Err(ModelError::Tensor(TensorError::ShapeMismatch {
            op: "forward",
            lhs: shape,
            rhs: vec![cfg.lookback, cfg.num_features()],
        }));
    }
    let seqs = shape[0] / cfg.lookback;
    let m = cfg.model_dim;
    let we = tape.param(store, "embed.weight")?;
    let be = tape.param(store, "embed.bias")?;
    let h = tape.matmul(x, we)?;
    let mut h = tape.add_row(h, be)?;
    let mut flat = Vec::with_capacity(cfg.cblock_seq_lens.len());
    for c in 0..cfg.cblock_seq_lens.len() {
        h = cblock_forward(tape, store, cfg, c, h)?;
        flat.push(tape.reshape(h, &[seqs, cfg.output_len(c) * m])?);
    }
    let merged = tape.concat_cols(&flat)?;
    let wm = tape.param(store, "merge.weight")?;
    let bm = tape.param(store, "merge.bias")?;
    let out = tape.matmul(merged, wm)?;
    let out = tape.add_row(out, bm)?;
    if !tape.value(out).all_finite() {
        return Err(ModelError::NonFiniteActivation);
    }
    Ok(out)
}

/// Normalized prediction for one `lookback x num_features` window.
pub fn forward<T: Scalar>(
    inputs: &[f64],
    store: &ParamStore<T>,
    cfg: &ModelConfig,
) -> Result<T, ModelError> {
    let data = inputs.iter().map(|&v| T::lit(v)).collect();
    let x = Tensor::matrix(cfg.lookback, cfg.num_features(), data).map_err(|_| {
        ModelError::Tensor(TensorError::ShapeMismatch {
            op: "forward",
            lhs: vec![inputs.len()],
            rhs: vec![cfg.lookback, cfg.num_features()],
        })
    })?;
    let mut tape = Tape::new();
    let xv = tape.constant(x);
    let out = forward_batch(&mut tape, store, cfg, xv)?;
    Ok(tape.value(out).item())
}

/// Normalized predictions for many windows, `batch` at a time.
pub fn predict_normalized<T: Scalar>(
    windows: &[&[f64]],
    store: &ParamStore<T>,
    cfg: &ModelConfig,
    batch: usize,
) -> Result<Vec<T>, ModelError> {
    let width = cfg.lookback * cfg.num_features();
    let mut out = Vec::with_capacity(windows.len());
    for chunk in windows.chunks(batch.max(1)) {
        let mut data = Vec::with_capacity(chunk.len() * width);
        for w in chunk {
            if w.len() != width {
                return Err(ModelError::Tensor(TensorError::ShapeMismatch {
                    op: "forward",
                    lhs: vec![w.len()],
                    rhs: vec![cfg.lookback, cfg.num_features()],
                }));
            }
            data.extend(w.iter().map(|&v| T::lit(v)));
        }
        let x = Tensor::matrix(chunk.len() * cfg.lookback, cfg.num_features(), data)?;
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let y = forward_batch(&mut tape, store, cfg, xv)?;
        out.extend_from_slice(tape.value(y).data());
    }
    Ok(out)
}

/// Next-day close in USD from exactly `lookback` trailing bars.
pub fn predict_next_close<T: Scalar>(
    store: &ParamStore<T>,
    cfg: &ModelConfig,
    bars: &[OhlcvBar],
    normalizer: &Normalizer,
) -> Result<f64, ModelError> {
    if bars.len() != cfg.lookback {
        return Err(ModelError::Config(format!(
            "expected {} bars, got {}",
            cfg.lookback,
            bars.len()
        )));
    }
    if normalizer.num_features() != cfg.num_features() {
        return Err(DataError::FeatureMismatch {
            expected: cfg.num_features(),
            got: normalizer.num_features(),
        }
        .into());
    }
    let inputs: Vec<f64> = bars
        .iter()
        .flat_map(|b| normalizer.apply_features(b.features(cfg.use_volume)))
        .collect();
    let y = forward(&inputs, store, cfg)?;
    Ok(normalizer.target.invert(y.to_f64_lossy()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        ModelConfig {
            cblock_seq_lens: vec![3, 4],
            final_seq_len: 4,
            cmblocks_per_cblock: 2,
            d_state: 2,
            model_dim: 2,
            lookback: 3,
            use_volume: false,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn default_parameter_count_is_near_target() {
        let p = init_params::<f64>(&ModelConfig::default(), 0).unwrap();
        assert_eq!(count_parameters(&p), 137_995);
        let no_vol = ModelConfig {
            use_volume: false,
            ..ModelConfig::default()
        };
        assert_eq!(count_parameters(&init_params::<f64>(&no_vol, 0).unwrap()), 137_976);
    }

    #[test]
    fn count_grows_with_width() {
        let a = count_parameters(&init_params::<f64>(&tiny(), 0).unwrap());
        let wide = ModelConfig {
            model_dim: 4,
            ..tiny()
        };
        let b = count_parameters(&init_params::<f64>(&wide, 0).unwrap());
        assert!(b > a);
    }

    #[test]
    fn config_validation() {
        let bad = ModelConfig {
            lookback: 10,
            ..ModelConfig::default()
        };
        assert!(bad.validate().is_err());
        assert!(ModelConfig::default().validate().is_ok());
    }

    #[test]
    fn shape_pipeline_default() {
        let cfg = ModelConfig {
            model_dim: 2,
            d_state: 2,
            cmblocks_per_cblock: 1,
            ..ModelConfig::default()
        };
        let store = init_params::<f64>(&cfg, 1).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[2 * 14, 5]));
        let we = tape.param(&store, "embed.weight").unwrap();
        let h = tape.matmul(x, we).unwrap();
        let h1 = cblock_forward(&mut tape, &store, &cfg, 0, h).unwrap();
        assert_eq!(tape.value(h1).shape(), &[2 * 16, 2]);
        let h2 = cblock_forward(&mut tape, &store, &cfg, 1, h1).unwrap();
        assert_eq!(tape.value(h2).shape(), &[2 * 32, 2]);
        let h3 = cblock_forward(&mut tape, &store, &cfg, 2, h2).unwrap();
        assert_eq!(tape.value(h3).shape(), &[2 * 32, 2]);
    }

    #[test]
    fn forward_is_scalar_and_deterministic() {
        let cfg = tiny();
        let store = init_params::<f64>(&cfg, 3).unwrap();
        let inputs: Vec<f64> = (0..12).map(|i| (i as f64 * 0.37).sin()).collect();
        let a = forward(&inputs, &store, &cfg).unwrap();
        let b = forward(&inputs, &store, &cfg).unwrap();
        assert_eq!(a.to_bits(), b.to_bits());
        assert!(a.is_finite());
    }

    #[test]
    fn forward_rejects_wrong_window() {
        let cfg = tiny();
        let store = init_params::<f64>(&cfg, 3).unwrap();
        assert!(forward(&[0.0; 11], &store, &cfg).is_err());
    }

    #[test]
    fn seeded_init_is_reproducible() {
        let a = init_params::<f64>(&tiny(), 9).unwrap();
        let b = init_params::<f64>(&tiny(), 9).unwrap();
        let c = init_params::<f64>(&tiny(), 10).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn single_precision_forward_runs() {
        let cfg = tiny();
        let store = init_params::<f32>(&cfg, 3).unwrap();
        let y = forward(&[0.25; 12], &store, &cfg).unwrap();
        assert!(y.is_finite());
    }
}
