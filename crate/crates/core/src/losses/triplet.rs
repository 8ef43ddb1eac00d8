use serde::{Deserialize, Serialize};

use super::DEFAULT_MARGIN;
use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// Offset that removes an entry from a masked row maximum.
const MASKED: f64 = -1e100;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TripletConfig {
    pub margin: f64,
    /// L2-normalize features before the dot-product similarity. Disable to
    /// use raw features.
    pub normalize: bool,
}

impl Default for TripletConfig {
    fn default() -> Self {
        TripletConfig {
            margin: DEFAULT_MARGIN,
            normalize: true,
        }
    }
}

/// Batch-hard triplet loss `mean_i max(0, margin + S_i,neg - S_i,pos)` with
/// `S = R Rᵀ`, the least similar same-class sample as positive and the most
/// similar other-class sample as negative.
pub fn triplet_batch_hard(features: &Tensor, labels: &[usize], config: TripletConfig) -> Result<Tensor> {
    let [n, _] = *features.shape() else {
        return Err(Error::Contract(format!(
            "triplet loss expects N×d features, got {:?}",
            features.shape()
        )));
    };
    if labels.len() != n {
        return Err(Error::Contract(format!(
            "triplet loss: {} labels for {n} rows",
            labels.len()
        )));
    }
    let mut pos_mask = vec![MASKED; n * n];
    let mut neg_mask = vec![MASKED; n * n];
    for i in 0..n {
        let mut has_pos = false;
        let mut has_neg = false;
        for j in 0..n {
            if labels[i] == labels[j] {
                if i != j {
                    pos_mask[i * n + j] = 0.0;
                    has_pos = true;
                }
            } else {
                neg_mask[i * n + j] = 0.0;
                has_neg = true;
            }
        }
        if !has_pos {
            return Err(Error::Contract(format!(
                "triplet loss: class {} has no positive pair in the batch",
                labels[i]
            )));
        }
        if !has_neg {
            return Err(Error::Contract(format!(
                "triplet loss: class {} has no negative in the batch",
                labels[i]
            )));
        }
    }
    let r = if config.normalize {
        features.normalize_rows()?
    } else {
        features.clone()
    };
    let sim = r.matmul(&r.transpose()?)?;
    let hardest_pos = sim.neg().add(&Tensor::new(&[n, n], pos_mask)?)?.max_axis(1)?.neg();
    let hardest_neg = sim.add(&Tensor::new(&[n, n], neg_mask)?)?.max_axis(1)?;
    let hinge = hardest_neg
        .sub(&hardest_pos)?
        .add(&Tensor::scalar(config.margin))?
        .relu();
    Ok(hinge.mean())
}
