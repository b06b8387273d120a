use serde::{Deserialize, Serialize};

use super::{num_features, DataError, Dataset, FEATURE_NAMES};

/// `normalized = (raw - shift) / scale`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Affine {
    pub shift: f64,
    pub scale: f64,
}

impl Affine {
    pub fn apply(&self, raw: f64) -> f64 {
        (raw - self.shift) / self.scale
    }

    pub fn invert(&self, normalized: f64) -> f64 {
        normalized * self.scale + self.shift
    }
}

/// Per-feature z-score fitted on the training segment only.
///
/// The target shares the close feature's parameters so a normalized
/// prediction converts back to USD with the same map.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub features: Vec<Affine>,
    pub target: Affine,
}

impl Normalizer {
    pub fn fit(train: &Dataset, use_volume: bool) -> Result<Self, DataError> {
        if train.is_empty() {
            return Err(DataError::EmptyInput);
        }
        let nf = num_features(use_volume);
        let n = train.len() as f64;
        let mut features = Vec::with_capacity(nf);
        for (k, name) in FEATURE_NAMES.iter().enumerate().take(nf) {
            let col = || train.bars().iter().map(move |b| b.features(true).nth(k).unwrap());
            let mean = col().sum::<f64>() / n;
            let var = col().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let std = var.sqrt();
            if !(std > 0.0) || !std.is_finite() {
                return Err(DataError::DegenerateFeature(name));
            }
            features.push(Affine {
                shift: mean,
                scale: std,
            });
        }
        let target = features[3];
        Ok(Self { features, target })
    }

    pub fn num_features(&self) -> usize {
        self.features.len()
    }

    pub fn apply_features(&self, raw: impl Iterator<Item = f64>) -> Vec<f64> {
        raw.zip(&self.features).map(|(v, a)| a.apply(v)).collect()
    }
}

/// Fits a [`Normalizer`] on the training segment.
pub fn fit_normalizer(train: &Dataset, use_volume: bool) -> Result<Normalizer, DataError> {
    Normalizer::fit(train, use_volume)
}
