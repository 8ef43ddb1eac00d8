//! Baseline regularizers: feature-space L2 distillation and EWC.

use crate::autodiff::{Tensor, TensorError};
use crate::error::{Error, Result};
use crate::net::{EmbeddingNet, Param, Trainable};

/// `(1/N) Σ_i ||R_i - R'_i||²`.
pub fn l2_feature_loss(r: &Tensor, r_prime: &Tensor) -> Result<Tensor> {
    let [n, _] = *r.shape() else {
        return Err(Error::Contract(format!(
            "l2_feature_loss expects N×d features, got {:?}",
            r.shape()
        )));
    };
    if r.shape() != r_prime.shape() {
        return Err(TensorError::Shape {
            op: "l2_feature_loss",
            lhs: r.shape().to_vec(),
            rhs: r_prime.shape().to_vec(),
        }
        .into());
    }
    let diff = r.sub(r_prime)?;
    Ok(diff.mul(&diff)?.sum().scale(1.0 / n as f64))
}

/// Diagonal Fisher information and the parameters it was measured at.
#[derive(Debug, Clone, PartialEq)]
pub struct FisherState {
    /// Same layout as `anchor`, entrywise nonnegative.
    pub fisher: Vec<Param>,
    pub anchor: Vec<Param>,
}

impl FisherState {
    /// Adds `later` (measured on a wider head) to this estimate. Classifier
    /// columns unknown to `self` contribute zero; the anchor moves to `later`.
    pub fn accumulate(&self, later: &FisherState) -> Result<FisherState> {
        if self.fisher.len() != later.fisher.len() {
            return Err(Error::Contract("Fisher estimates cover different layers".into()));
        }
        let mut fisher = later.fisher.clone();
        for (dst, src) in fisher.iter_mut().zip(&self.fisher) {
            let (rows, new_cols, old_cols) = column_layout(&dst.shape, &src.shape, &dst.name)?;
            for r in 0..rows {
                for c in 0..old_cols {
                    dst.values[r * new_cols + c] += src.values[r * old_cols + c];
                }
            }
        }
        Ok(FisherState {
            fisher,
            anchor: later.anchor.clone(),
        })
    }
}

/// Checks that `current` equals `anchor` or extends it by trailing columns.
/// Returns (rows, current columns, anchor columns).
fn column_layout(current: &[usize], anchor: &[usize], name: &str) -> Result<(usize, usize, usize)> {
    match (current, anchor) {
        ([r, c], [r2, c2]) if r == r2 && c >= c2 => Ok((*r, *c, *c2)),
        _ => Err(Error::Contract(format!(
            "EWC: parameter `{name}` has shape {current:?}, anchor has {anchor:?}"
        ))),
    }
}

/// `strength · Σ_i F_i (θ_i - θ*_i)²` over the parameters in `leaves`.
///
/// A classifier extended after the anchor was taken is penalized on its
/// original columns only.
pub fn ewc_penalty(leaves: &[Tensor], state: &FisherState, strength: f64) -> Result<Tensor> {
    if leaves.len() != state.anchor.len() || state.fisher.len() != state.anchor.len() {
        return Err(Error::Contract(format!(
            "EWC: {} parameters, Fisher state has {}",
            leaves.len(),
            state.anchor.len()
        )));
    }
    let mut total: Option<Tensor> = None;
    for ((leaf, anchor), fisher) in leaves.iter().zip(&state.anchor).zip(&state.fisher) {
        let (_, cols, old_cols) = column_layout(leaf.shape(), &anchor.shape, &anchor.name)?;
        if fisher.shape != anchor.shape {
            return Err(Error::Contract(format!(
                "EWC: Fisher and anchor of `{}` differ in shape",
                anchor.name
            )));
        }
        let theta = if cols == old_cols {
            leaf.clone()
        } else {
            leaf.narrow_cols(0, old_cols)?
        };
        let diff = theta.sub(&Tensor::new(&anchor.shape, anchor.values.clone())?)?;
        let term = diff
            .mul(&diff)?
            .mul(&Tensor::new(&fisher.shape, fisher.values.clone())?)?
            .sum();
        total = Some(match total {
            None => term,
            Some(t) => t.add(&term)?,
        });
    }
    let total = total.ok_or_else(|| Error::Contract("EWC: network has no parameters".into()))?;
    Ok(total.scale(strength))
}

/// Diagonal Fisher estimate: the mean over `batches` of squared gradients
/// of `loss` at `net`.
pub fn estimate_fisher_with<B, F>(net: &EmbeddingNet, batches: &[B], loss: F) -> Result<FisherState>
where
    F: Fn(&Trainable, &B) -> Result<Tensor>,
{
    if batches.is_empty() {
        return Err(Error::Contract("Fisher estimation needs at least one batch".into()));
    }
    let mut sums: Vec<Vec<f64>> = net.params().iter().map(|p| vec![0.0; p.values.len()]).collect();
    for batch in batches {
        let t = net.trainable()?;
        loss(&t, batch)?.backward()?;
        for (acc, g) in sums.iter_mut().zip(t.grads()) {
            for (a, v) in acc.iter_mut().zip(g) {
                *a += v * v;
            }
        }
    }
    let scale = 1.0 / batches.len() as f64;
    let fisher = net
        .params()
        .iter()
        .zip(sums)
        .map(|(p, s)| Param {
            values: s.into_iter().map(|v| v * scale).collect(),
            ..p.clone()
        })
        .collect();
    Ok(FisherState {
        fisher,
        anchor: net.params().to_vec(),
    })
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::autodiff::gradcheck::check_gradients;
    use crate::net::NetConfig;

    fn small_net(seed: u64) -> EmbeddingNet {
        let cfg = NetConfig {
            in_dim: 3,
            hidden: vec![4],
            feature_dim: 2,
            num_classes: 3,
        };
        EmbeddingNet::new(&cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
    }

    fn leaves_of(net: &EmbeddingNet) -> Vec<Tensor> {
        net.trainable().unwrap().leaves().to_vec()
    }

    fn ones_state(net: &EmbeddingNet) -> FisherState {
        FisherState {
            fisher: net
                .params()
                .iter()
                .map(|p| Param {
                    values: vec![1.0; p.values.len()],
                    ..p.clone()
                })
                .collect(),
            anchor: net.params().to_vec(),
        }
    }

    #[test]
    fn l2_examples() {
        let r = Tensor::from_rows(&[vec![0.5, -1.0], vec![2.0, 0.0]]).unwrap();
        assert_eq!(l2_feature_loss(&r, &r).unwrap().item(), 0.0);
        let a = Tensor::from_rows(&[vec![0.0]]).unwrap();
        let b = Tensor::from_rows(&[vec![2.0]]).unwrap();
        assert_eq!(l2_feature_loss(&a, &b).unwrap().item(), 4.0);
        assert!(l2_feature_loss(&r, &a).is_err());
    }

    #[test]
    fn l2_matches_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let rows = |rng: &mut ChaCha8Rng| -> Vec<Vec<f64>> {
            (0..4)
                .map(|_| (0..3).map(|_| rng.random_range(-2.0..2.0)).collect())
                .collect()
        };
        let (a, b) = (rows(&mut rng), rows(&mut rng));
        let mut want = 0.0;
        for i in 0..4 {
            for j in 0..3 {
                want += (a[i][j] - b[i][j]).powi(2);
            }
        }
        want /= 4.0;
        let got = l2_feature_loss(&Tensor::from_rows(&a).unwrap(), &Tensor::from_rows(&b).unwrap())
            .unwrap()
            .item();
        assert!((got - want).abs() < 1e-12);
    }

    #[test]
    fn ewc_zero_at_anchor_and_quadratic_in_displacement() {
        let net = small_net(1);
        let state = ones_state(&net);
        assert_eq!(ewc_penalty(&leaves_of(&net), &state, 100.0).unwrap().item(), 0.0);
        let mut moved = net.clone();
        moved.params_mut()[1].values[2] += 0.3;
        let p = ewc_penalty(&leaves_of(&moved), &state, 100.0).unwrap().item();
        assert!((p - 100.0 * 0.09).abs() < 1e-12);
    }

    #[test]
    fn ewc_matches_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let anchor = small_net(2);
        let current = small_net(3);
        let mut state = ones_state(&anchor);
        for p in &mut state.fisher {
            for v in &mut p.values {
                *v = rng.random_range(0.0..2.0);
            }
        }
        let mut want = 0.0;
        for ((c, a), f) in current.params().iter().zip(anchor.params()).zip(&state.fisher) {
            for i in 0..c.values.len() {
                want += f.values[i] * (c.values[i] - a.values[i]).powi(2);
            }
        }
        let got = ewc_penalty(&leaves_of(&current), &state, 0.7).unwrap().item();
        assert!((got - 0.7 * want).abs() < 1e-12);
    }

    #[test]
    fn ewc_ignores_new_head_columns() {
        let net = small_net(4);
        let state = ones_state(&net);
        let mut wider = net.extend_classifier(2, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let len = wider.params().len();
        // Moving a new column costs nothing, moving an old one does.
        wider.params_mut()[len - 2].values[4] += 1.0;
        assert_eq!(ewc_penalty(&leaves_of(&wider), &state, 1.0).unwrap().item(), 0.0);
        wider.params_mut()[len - 2].values[0] += 0.5;
        assert!((ewc_penalty(&leaves_of(&wider), &state, 1.0).unwrap().item() - 0.25).abs() < 1e-12);
    }

    #[test]
    fn ewc_rejects_mismatched_layouts() {
        let net = small_net(5);
        let other = EmbeddingNet::new(
            &NetConfig {
                in_dim: 3,
                hidden: vec![5],
                feature_dim: 2,
                num_classes: 3,
            },
            &mut ChaCha8Rng::seed_from_u64(0),
        )
        .unwrap();
        let err = ewc_penalty(&leaves_of(&other), &ones_state(&net), 1.0).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
    }

    #[test]
    fn ewc_gradient_matches_finite_differences() {
        let net = small_net(6);
        let mut state = ones_state(&net);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for p in &mut state.fisher {
            for v in &mut p.values {
                *v = rng.random_range(0.0..1.0);
            }
        }
        let moved = small_net(7);
        let values: Vec<(Vec<usize>, Vec<f64>)> = moved
            .params()
            .iter()
            .map(|p| (p.shape.clone(), p.values.clone()))
            .collect();
        let check = check_gradients(&values, 1e-5, |p| ewc_penalty(p, &state, 3.0)).unwrap();
        assert!(check.max_rel_error < 1e-4, "{check:?}");
    }

    #[test]
    fn fisher_properties() {
        let net = small_net(9);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let batches: Vec<Tensor> = (0..4)
            .map(|_| Tensor::new(&[5, 3], (0..15).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap())
            .collect();
        // A loss that ignores the parameters has zero Fisher.
        let flat = estimate_fisher_with(&net, &batches, |t, _| Ok(t.leaves()[0].scale(0.0).sum())).unwrap();
        assert!(flat.fisher.iter().all(|p| p.values.iter().all(|v| *v == 0.0)));

        let loss = |t: &Trainable, x: &Tensor| -> Result<Tensor> {
            let (_, logits) = t.forward(x)?;
            crate::losses::cross_entropy(&logits, &[0, 1, 2, 0, 1])
        };
        let f = estimate_fisher_with(&net, &batches, loss).unwrap();
        assert!(f.fisher.iter().all(|p| p.values.iter().all(|v| *v >= 0.0)));
        assert!(f.fisher.iter().any(|p| p.values.iter().any(|v| *v > 0.0)));
        assert_eq!(f.anchor, net.params());

        // Doubling the sample changes the estimate, but only by sampling noise.
        let more: Vec<Tensor> = batches
            .iter()
            .cloned()
            .chain(
                (0..4).map(|_| Tensor::new(&[5, 3], (0..15).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()),
            )
            .collect();
        let g = estimate_fisher_with(&net, &more, loss).unwrap();
        let total = |s: &FisherState| s.fisher.iter().flat_map(|p| &p.values).sum::<f64>();
        let ratio = total(&g) / total(&f);
        assert!(ratio > 0.25 && ratio < 4.0, "{ratio}");

        let empty: [Tensor; 0] = [];
        assert!(estimate_fisher_with(&net, &empty, loss).is_err());
    }

    #[test]
    fn accumulation_pads_new_columns() {
        let net = small_net(10);
        let first = ones_state(&net);
        let wider = net.extend_classifier(1, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let second = ones_state(&wider);
        let merged = first.accumulate(&second).unwrap();
        let head = &merged.fisher[merged.fisher.len() - 2];
        assert_eq!(head.shape, vec![2, 4]);
        assert_eq!(head.values, vec![2.0, 2.0, 2.0, 1.0, 2.0, 2.0, 2.0, 1.0]);
        assert_eq!(merged.anchor, wider.params());
    }
}
