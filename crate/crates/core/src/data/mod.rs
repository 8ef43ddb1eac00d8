//! Labeled feature data: a synthetic fine-grained generator, a CSV loader,
//! the original/new class schedule with train/test splits, and the P×K
//! batch sampler.

mod csv_io;
mod sampler;
mod synthetic;

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

pub use csv_io::{load_feature_csv, load_feature_csv_with, FeatureSchema};
pub use sampler::{Batch, PkSampler, DEFAULT_K, DEFAULT_P};
pub use synthetic::{generate_synthetic, SyntheticConfig};

/// Feature vectors with dense class labels `0..class_count`.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledFeatures {
    pub dim: usize,
    /// Row-major, `len() × dim`.
    pub features: Vec<f64>,
    pub labels: Vec<usize>,
    /// Source label of each dense class id, in increasing order.
    pub class_ids: Vec<i64>,
}

impl LabeledFeatures {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn class_count(&self) -> usize {
        self.class_ids.len()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    pub fn to_tensor(&self) -> Result<Tensor> {
        Ok(Tensor::new(&[self.len(), self.dim], self.features.clone())?)
    }

    /// Rows `indices` as an N×dim tensor.
    pub fn gather(&self, indices: &[usize]) -> Result<Tensor> {
        let mut data = Vec::with_capacity(indices.len() * self.dim);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Ok(Tensor::new(&[indices.len(), self.dim], data)?)
    }

    /// The given rows, keeping the class numbering.
    pub fn subset(&self, indices: &[usize]) -> LabeledFeatures {
        let mut features = Vec::with_capacity(indices.len() * self.dim);
        for &i in indices {
            features.extend_from_slice(self.row(i));
        }
        LabeledFeatures {
            dim: self.dim,
            features,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            class_ids: self.class_ids.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

/// A dataset partitioned into the original class group followed by the
/// groups added incrementally, each class split into train and test.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassSplitDataset {
    data: LabeledFeatures,
    splits: Vec<Split>,
    groups: Vec<Vec<usize>>,
    train_fraction: f64,
    seed: Option<u64>,
}

/// Assigns classes to groups in label order (`original_count` first, then
/// each of `group_sizes`) and puts the first `round(train_fraction · n_c)`
/// samples of every class into the training split.
pub fn split_schedule(
    data: LabeledFeatures,
    original_count: usize,
    group_sizes: &[usize],
    train_fraction: f64,
) -> Result<ClassSplitDataset> {
    let wanted = original_count + group_sizes.iter().sum::<usize>();
    if wanted != data.class_count() {
        return Err(Error::Contract(format!(
            "schedule covers {original_count} + {} = {wanted} classes, dataset has {}",
            group_sizes.iter().sum::<usize>(),
            data.class_count()
        )));
    }
    if original_count == 0 || group_sizes.contains(&0) {
        return Err(Error::Contract("every class group needs at least one class".into()));
    }
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::Contract(format!(
            "train_fraction must lie in (0, 1), got {train_fraction}"
        )));
    }
    let mut groups = vec![(0..original_count).collect::<Vec<_>>()];
    let mut next = original_count;
    for &g in group_sizes {
        groups.push((next..next + g).collect());
        next += g;
    }

    let mut members: Vec<Vec<usize>> = vec![Vec::new(); data.class_count()];
    for (i, &l) in data.labels.iter().enumerate() {
        members[l].push(i);
    }
    let mut splits = vec![Split::Test; data.len()];
    for (class, rows) in members.iter().enumerate() {
        let n_train = (train_fraction * rows.len() as f64).round() as usize;
        if n_train == 0 || n_train == rows.len() {
            return Err(Error::Contract(format!(
                "class {} with {} samples cannot be split {train_fraction} into train and test",
                data.class_ids[class],
                rows.len()
            )));
        }
        for &i in &rows[..n_train] {
            splits[i] = Split::Train;
        }
    }
    Ok(ClassSplitDataset {
        data,
        splits,
        groups,
        train_fraction,
        seed: None,
    })
}

impl ClassSplitDataset {
    /// Records the generator seed for the manifest.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = Some(seed);
        self
    }

    pub fn data(&self) -> &LabeledFeatures {
        &self.data
    }

    pub fn in_dim(&self) -> usize {
        self.data.dim
    }

    pub fn split(&self, i: usize) -> Split {
        self.splits[i]
    }

    /// Group 0 holds the original classes.
    pub fn groups(&self) -> &[Vec<usize>] {
        &self.groups
    }

    pub fn group(&self, g: usize) -> Result<&[usize]> {
        self.groups
            .get(g)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::Contract(format!("no class group {g}; the schedule has {}", self.groups.len())))
    }

    /// Classes of groups `0..=g`.
    pub fn classes_through(&self, g: usize) -> Result<Vec<usize>> {
        self.group(g)?;
        Ok(self.groups[..=g].concat())
    }

    fn rows(&self, classes: &[usize], split: Split) -> Vec<usize> {
        let wanted: BTreeSet<usize> = classes.iter().copied().collect();
        (0..self.data.len())
            .filter(|&i| self.splits[i] == split && wanted.contains(&self.data.labels[i]))
            .collect()
    }

    pub fn train_rows(&self, classes: &[usize]) -> Vec<usize> {
        self.rows(classes, Split::Train)
    }

    pub fn test_rows(&self, classes: &[usize]) -> Vec<usize> {
        self.rows(classes, Split::Test)
    }

    pub fn train_set(&self, classes: &[usize]) -> LabeledFeatures {
        self.data.subset(&self.train_rows(classes))
    }

    pub fn test_set(&self, classes: &[usize]) -> LabeledFeatures {
        self.data.subset(&self.test_rows(classes))
    }

    pub fn manifest(&self) -> DatasetManifest {
        let mut boundaries = Vec::with_capacity(self.groups.len() + 1);
        boundaries.push(0);
        for g in &self.groups {
            boundaries.push(boundaries.last().unwrap() + g.len());
        }
        DatasetManifest {
            in_dim: self.data.dim,
            class_count: self.data.class_count(),
            sample_count: self.data.len(),
            group_boundaries: boundaries,
            train_fraction: self.train_fraction,
            test_fraction: 1.0 - self.train_fraction,
            seed: self.seed,
        }
    }
}

/// Summary of a scheduled dataset, written next to experiment outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub in_dim: usize,
    pub class_count: usize,
    pub sample_count: usize,
    /// Group `g` holds classes `group_boundaries[g]..group_boundaries[g + 1]`.
    pub group_boundaries: Vec<usize>,
    pub train_fraction: f64,
    pub test_fraction: f64,
    pub seed: Option<u64>,
}
