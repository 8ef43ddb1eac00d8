use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::LabeledFeatures;
use crate::error::{Error, Result};

/// Parameters of the hierarchical Gaussian generator.
///
/// Super-category centres are drawn around the origin with `super_spread`,
/// sub-category centres around their super-category with `sub_spread`, and
/// samples around their sub-category with `noise`. Sub-categories sharing a
/// super-category are the confusable "fine-grained" classes.
///
/// Each super-category owns a block of `in_dim / n_super` attribute
/// coordinates and its sub-categories differ only there; elsewhere they sit
/// on the super-category centre. Telling siblings apart therefore needs
/// features that classes of other super-categories never train, which is
/// what makes forgetting visible when those features drift.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub n_super: usize,
    pub subs_per_super: usize,
    pub samples_per_class: usize,
    pub in_dim: usize,
    pub super_spread: f64,
    pub sub_spread: f64,
    pub noise: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    /// 4 × 4 = 16 classes of 40 samples in 16 dimensions.
    fn default() -> Self {
        SyntheticConfig {
            n_super: 4,
            subs_per_super: 4,
            samples_per_class: 40,
            in_dim: 16,
            super_spread: 0.5,
            sub_spread: 2.0,
            noise: 0.8,
            seed: 0,
        }
    }
}

impl SyntheticConfig {
    pub fn class_count(&self) -> usize {
        self.n_super * self.subs_per_super
    }

    pub fn validate(&self) -> Result<()> {
        for (field, v) in [
            ("n_super", self.n_super),
            ("subs_per_super", self.subs_per_super),
            ("samples_per_class", self.samples_per_class),
            ("in_dim", self.in_dim),
        ] {
            if v == 0 {
                return Err(Error::Contract(format!(
                    "synthetic dataset: {field} must be at least 1"
                )));
            }
        }
        for (field, v) in [("super_spread", self.super_spread), ("sub_spread", self.sub_spread)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Contract(format!(
                    "synthetic dataset: {field} must be finite and nonnegative"
                )));
            }
        }
        if !(self.noise.is_finite() && self.noise > 0.0) {
            return Err(Error::Contract(
                "synthetic dataset: noise must be finite and positive".into(),
            ));
        }
        if self.in_dim < self.n_super {
            return Err(Error::Contract(format!(
                "synthetic dataset: in_dim {} leaves no attribute coordinates for {} super-categories",
                self.in_dim, self.n_super
            )));
        }
        Ok(())
    }
}

/// Class `c` is sub-category `c % subs_per_super` of super-category
/// `c / subs_per_super`, so the original classes and each added group cover
/// whole super-categories when group sizes are multiples of
/// `subs_per_super`. Samples of a class are contiguous.
pub fn generate_synthetic(config: &SyntheticConfig) -> Result<LabeledFeatures> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let unit = Normal::new(0.0, 1.0).expect("unit normal");
    let dim = config.in_dim;
    let draw = |scale: f64, around: &[f64], rng: &mut ChaCha8Rng| -> Vec<f64> {
        around.iter().map(|c| c + scale * unit.sample(rng)).collect()
    };

    let origin = vec![0.0; dim];
    let supers: Vec<Vec<f64>> = (0..config.n_super)
        .map(|_| draw(config.super_spread, &origin, &mut rng))
        .collect();
    let classes = config.class_count();
    let width = dim / config.n_super;
    let centres: Vec<Vec<f64>> = (0..classes)
        .map(|c| {
            let s = c / config.subs_per_super;
            let mut centre = draw(config.sub_spread, &supers[s], &mut rng);
            for (j, x) in centre.iter_mut().enumerate() {
                if j / width != s {
                    *x = supers[s][j];
                }
            }
            centre
        })
        .collect();

    let mut features = Vec::with_capacity(classes * config.samples_per_class * dim);
    let mut labels = Vec::with_capacity(classes * config.samples_per_class);
    for (c, centre) in centres.iter().enumerate() {
        for _ in 0..config.samples_per_class {
            features.extend(draw(config.noise, centre, &mut rng));
            labels.push(c);
        }
    }
    Ok(LabeledFeatures {
        dim,
        features,
        labels,
        class_ids: (0..classes as i64).collect(),
    })
}
