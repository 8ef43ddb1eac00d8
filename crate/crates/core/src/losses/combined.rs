use serde::{Deserialize, Serialize};

use super::{cross_entropy, distillation, mmd_loss, triplet_batch_hard, KernelSpec, TripletConfig};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// Weights of the incremental objective
/// `α L_dist + β L_mmd + L_ce + L_triplet`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    /// Triplet margin λ.
    pub margin: f64,
    /// Distillation temperature T.
    pub temperature: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            alpha: 1.0,
            beta: 1.0,
            margin: super::DEFAULT_MARGIN,
            temperature: super::DEFAULT_TEMPERATURE,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (field, v) in [("alpha", self.alpha), ("beta", self.beta), ("margin", self.margin)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::config(field, format!("must be finite and nonnegative, got {v}")));
            }
        }
        if !(self.temperature.is_finite() && self.temperature > 0.0) {
            return Err(Error::config(
                "temperature",
                format!("must be finite and positive, got {}", self.temperature),
            ));
        }
        Ok(())
    }
}

/// Outputs of both networks on one batch of new-class samples.
#[derive(Debug, Clone, Copy)]
pub struct LossBatch<'a> {
    /// Adaptive-net features R′ (N×d).
    pub features: &'a Tensor,
    /// Adaptive-net logits over all n+m classes.
    pub logits: &'a Tensor,
    /// Frozen-net features R.
    pub frozen_features: &'a Tensor,
    /// Frozen-net logits over the n old classes.
    pub frozen_logits: &'a Tensor,
    /// Labels local to the new classes, in `0..m`.
    pub labels: &'a [usize],
}

/// The optimized total and the unweighted value of every term.
#[derive(Debug, Clone)]
pub struct LossTerms {
    pub total: Tensor,
    pub ce: f64,
    pub triplet: f64,
    pub dist: f64,
    pub mmd: f64,
}

/// Evaluates the combined objective. Terms with zero weight are still
/// reported but stay out of the gradient graph, so `α = β = 0` trains
/// exactly like plain fine-tuning.
///
/// With `normalize` set, both the triplet and the MMD term see unit-length
/// features, the geometry cosine retrieval ranks by.
pub fn combined_loss(
    batch: LossBatch<'_>,
    weights: &LossWeights,
    kernel: &KernelSpec,
    normalize: bool,
) -> Result<LossTerms> {
    weights.validate()?;
    let n = batch.frozen_logits.shape()[1];
    let width = batch.logits.shape()[1];
    if width <= n {
        return Err(Error::Contract(format!(
            "adaptive head has {width} outputs, expected more than the {n} old classes"
        )));
    }
    let ce = cross_entropy(&batch.logits.narrow_cols(n, width - n)?, batch.labels)?;
    let triplet = triplet_batch_hard(
        batch.features,
        batch.labels,
        TripletConfig {
            margin: weights.margin,
            normalize,
        },
    )?;
    let dist = distillation(
        batch.frozen_logits,
        &batch.logits.narrow_cols(0, n)?,
        weights.temperature,
    )?;
    let mmd = if normalize {
        mmd_loss(
            &batch.frozen_features.normalize_rows()?,
            &batch.features.normalize_rows()?,
            kernel,
        )?
    } else {
        mmd_loss(batch.frozen_features, batch.features, kernel)?
    };

    let mut total = ce.add(&triplet)?;
    if weights.alpha != 0.0 {
        total = total.add(&dist.scale(weights.alpha))?;
    }
    if weights.beta != 0.0 {
        total = total.add(&mmd.scale(weights.beta))?;
    }
    Ok(LossTerms {
        total,
        ce: ce.item(),
        triplet: triplet.item(),
        dist: dist.item(),
        mmd: mmd.item(),
    })
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::autodiff::gradcheck::check_gradients;
    use crate::losses::soft_target_entropy;
    use crate::net::{EmbeddingNet, NetConfig};

    fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
        Tensor::new(
            &[rows, cols],
            (0..rows * cols).map(|_| rng.random_range(-1.5..1.5)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn defaults_are_unit_weights() {
        let w = LossWeights::default();
        assert_eq!((w.alpha, w.beta, w.margin, w.temperature), (1.0, 1.0, 0.5, 2.0));
        assert!(LossWeights { temperature: 0.0, ..w }.validate().is_err());
        assert!(LossWeights { beta: -1.0, ..w }.validate().is_err());
    }

    #[test]
    fn total_is_the_sum_of_separate_terms() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let labels = [0, 0, 1, 1, 2, 2];
        let (f, l, ff, fl) = (
            random(&mut rng, 6, 3),
            random(&mut rng, 6, 7),
            random(&mut rng, 6, 3),
            random(&mut rng, 6, 4),
        );
        let batch = LossBatch {
            features: &f,
            logits: &l,
            frozen_features: &ff,
            frozen_logits: &fl,
            labels: &labels,
        };
        let kernel = KernelSpec::default();
        let ce = cross_entropy(&l.narrow_cols(4, 3).unwrap(), &labels).unwrap().item();
        let tr = triplet_batch_hard(&f, &labels, TripletConfig::default())
            .unwrap()
            .item();
        let di = distillation(&fl, &l.narrow_cols(0, 4).unwrap(), 2.0).unwrap().item();
        let mm = mmd_loss(&ff.normalize_rows().unwrap(), &f.normalize_rows().unwrap(), &kernel)
            .unwrap()
            .item();
        for (alpha, beta) in [(1.0, 1.0), (1.0, 0.0), (0.0, 0.0), (0.3, 2.5)] {
            let w = LossWeights {
                alpha,
                beta,
                ..Default::default()
            };
            let t = combined_loss(batch, &w, &kernel, true).unwrap();
            assert!((t.total.item() - (ce + tr + alpha * di + beta * mm)).abs() < 1e-12);
            assert_eq!((t.ce, t.triplet, t.dist, t.mmd), (ce, tr, di, mm));
        }
        let raw = combined_loss(batch, &LossWeights::default(), &kernel, false).unwrap();
        assert_eq!(raw.mmd, mmd_loss(&ff, &f, &kernel).unwrap().item());
    }

    #[test]
    fn fresh_copy_has_zero_mmd_and_entropy_distillation() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a = EmbeddingNet::new(&NetConfig::desk(5, 4), &mut rng).unwrap();
        let frozen = a.snapshot();
        let b = a.extend_classifier(2, &mut rng).unwrap();
        let x = random(&mut rng, 4, 5);
        let (ff, fl) = frozen.forward(&x).unwrap();
        let t = b.trainable().unwrap();
        let (f, l) = t.forward(&x).unwrap();
        let terms = combined_loss(
            LossBatch {
                features: &f,
                logits: &l,
                frozen_features: &ff,
                frozen_logits: &fl,
                labels: &[0, 0, 1, 1],
            },
            &LossWeights::default(),
            &KernelSpec::default(),
            true,
        )
        .unwrap();
        assert_eq!(terms.mmd, 0.0);
        assert!((terms.dist - soft_target_entropy(&fl, 2.0).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn composite_gradient_matches_finite_differences() {
        // Two-sample toy batch through a tiny network, every parameter checked.
        let cfg = NetConfig {
            in_dim: 3,
            hidden: vec![4],
            feature_dim: 3,
            num_classes: 2,
        };
        for seed in 0..20u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = EmbeddingNet::new(&cfg, &mut rng).unwrap();
            let frozen = a.snapshot();
            let mut b = a.extend_classifier(2, &mut rng).unwrap();
            for p in b.params_mut() {
                for v in &mut p.values {
                    *v += rng.random_range(-0.3..0.3);
                }
            }
            let x = random(&mut rng, 4, 3);
            let (ff, fl) = frozen.forward(&x).unwrap();
            let template = b.clone();
            let values: Vec<(Vec<usize>, Vec<f64>)> =
                b.params().iter().map(|p| (p.shape.clone(), p.values.clone())).collect();
            let check = check_gradients(&values, 1e-5, |leaves| {
                let (f, l) = crate::net::forward_with(&template, leaves, &x)?;
                let terms = combined_loss(
                    LossBatch {
                        features: &f,
                        logits: &l,
                        frozen_features: &ff,
                        frozen_logits: &fl,
                        labels: &[0, 1, 0, 1],
                    },
                    &LossWeights {
                        margin: 2.0,
                        ..Default::default()
                    },
                    &KernelSpec::fixed(vec![0.5, 1.0, 2.0]),
                    true,
                )?;
                Ok::<_, Error>(terms.total)
            })
            .unwrap();
            assert!(check.max_rel_error < 1e-4, "seed {seed}: {check:?}");
        }
    }

    #[test]
    fn head_must_be_wider_than_teacher() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (f, l) = (random(&mut rng, 4, 2), random(&mut rng, 4, 3));
        let err = combined_loss(
            LossBatch {
                features: &f,
                logits: &l,
                frozen_features: &f,
                frozen_logits: &l,
                labels: &[0, 0, 1, 1],
            },
            &LossWeights::default(),
            &KernelSpec::default(),
            true,
        )
        .unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
    }
}
