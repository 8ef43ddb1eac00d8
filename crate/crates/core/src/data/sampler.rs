use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::LabeledFeatures;
use crate::error::{Error, Result};

/// Classes per batch.
pub const DEFAULT_P: usize = 4;
/// Samples per class in a batch.
pub const DEFAULT_K: usize = 4;

/// Row indices into the sampled dataset with their labels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    pub rows: Vec<usize>,
    pub labels: Vec<usize>,
}

/// Draws batches of `P` distinct classes with `K` samples each.
///
/// Within an epoch every class is cut into disjoint chunks of `K` shuffled
/// samples, so no sample repeats until the next epoch. Each batch takes one
/// chunk from the `P` classes with the most chunks left. When the group has
/// fewer than `P` classes, every batch holds all of them.
#[derive(Debug, Clone)]
pub struct PkSampler {
    members: Vec<(usize, Vec<usize>)>,
    p: usize,
    k: usize,
    rng: ChaCha8Rng,
}

impl PkSampler {
    pub fn new(data: &LabeledFeatures, classes: &[usize], p: usize, k: usize, seed: u64) -> Result<PkSampler> {
        if k < 2 {
            return Err(Error::Contract(format!(
                "K = {k} samples per class leaves no positive pair for triplet mining"
            )));
        }
        if p == 0 {
            return Err(Error::Contract("P must be at least 1".into()));
        }
        if classes.len() < 2 {
            return Err(Error::Contract(
                "batches need at least two classes for negative pairs".into(),
            ));
        }
        let mut members = Vec::with_capacity(classes.len());
        for &c in classes {
            let rows: Vec<usize> = (0..data.len()).filter(|&i| data.labels[i] == c).collect();
            if rows.len() < k {
                return Err(Error::Contract(format!(
                    "class {c} has {} training samples, fewer than K = {k}",
                    rows.len()
                )));
            }
            members.push((c, rows));
        }
        Ok(PkSampler {
            p: p.min(classes.len()),
            members,
            k,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    /// Effective classes per batch after clamping to the class count.
    pub fn classes_per_batch(&self) -> usize {
        self.p
    }

    pub fn batch_size(&self) -> usize {
        self.p * self.k
    }

    /// The batches of the next epoch.
    pub fn epoch(&mut self) -> Vec<Batch> {
        let k = self.k;
        let mut pools: Vec<(usize, Vec<Vec<usize>>)> = self
            .members
            .iter()
            .map(|(c, rows)| {
                let mut rows = rows.clone();
                rows.shuffle(&mut self.rng);
                (*c, rows.chunks_exact(k).map(<[usize]>::to_vec).collect())
            })
            .collect();
        let mut batches = Vec::new();
        loop {
            let mut order: Vec<usize> = (0..pools.len()).filter(|&i| !pools[i].1.is_empty()).collect();
            if order.len() < self.p {
                break;
            }
            order.shuffle(&mut self.rng);
            // Stable sort keeps the shuffled order among equally full classes.
            order.sort_by_key(|&i| std::cmp::Reverse(pools[i].1.len()));
            let mut picked = order[..self.p].to_vec();
            picked.shuffle(&mut self.rng);
            let mut batch = Batch {
                rows: Vec::with_capacity(self.p * k),
                labels: Vec::with_capacity(self.p * k),
            };
            for i in picked {
                let (class, chunks) = &mut pools[i];
                batch.rows.extend(chunks.pop().expect("nonempty pool"));
                batch.labels.extend(std::iter::repeat_n(*class, k));
            }
            batches.push(batch);
        }
        batches
    }
}
