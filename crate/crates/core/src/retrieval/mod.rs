//! Retrieval evaluation over an embedded gallery: Recall@K, mAP and a
//! micro-averaged precision-recall curve.
//!
//! Every gallery item queries the rest of the gallery. Neighbours are ranked
//! by cosine similarity, ties going to the smaller item id, so results do not
//! depend on gallery order.

mod export;

use std::cmp::Ordering;
use std::sync::OnceLock;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

pub use export::{export_embeddings, write_embeddings_csv};

/// Environment variable capping the evaluation thread count.
pub const THREADS_ENV: &str = "RETRIEVAL_LAB_THREADS";

/// Cut-offs reported by default.
pub const DEFAULT_KS: [usize; 3] = [1, 2, 4];

fn pool() -> &'static rayon::ThreadPool {
    static POOL: OnceLock<rayon::ThreadPool> = OnceLock::new();
    POOL.get_or_init(|| {
        let threads = std::env::var(THREADS_ENV)
            .ok()
            .and_then(|v| v.trim().parse::<usize>().ok())
            .filter(|n| *n > 0)
            .unwrap_or(0);
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .thread_name(|i| format!("retrieval-eval-{i}"))
            .build()
            .expect("evaluation thread pool")
    })
}

/// L2-normalized gallery features with class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalIndex {
    features: Vec<f64>,
    dim: usize,
    labels: Vec<usize>,
    ids: Vec<usize>,
}

impl RetrievalIndex {
    /// Builds an index over row-major `features` (N×`dim`). Item ids are
    /// the row positions.
    pub fn new(features: &[f64], dim: usize, labels: &[usize]) -> Result<RetrievalIndex> {
        Self::with_ids(features, dim, labels, &(0..labels.len()).collect::<Vec<_>>())
    }

    /// Like [`RetrievalIndex::new`] with explicit ids for tie-breaking.
    pub fn with_ids(features: &[f64], dim: usize, labels: &[usize], ids: &[usize]) -> Result<RetrievalIndex> {
        let n = labels.len();
        if dim == 0 || features.len() != n * dim || ids.len() != n {
            return Err(Error::Contract(format!(
                "gallery of {n} labels and {} ids needs {} feature values of width {dim}, got {}",
                ids.len(),
                n * dim,
                features.len()
            )));
        }
        if n < 2 {
            return Err(Error::Contract(format!("a gallery needs at least 2 items, got {n}")));
        }
        let mut counts = std::collections::BTreeMap::new();
        for &l in labels {
            *counts.entry(l).or_insert(0usize) += 1;
        }
        if let Some((class, _)) = counts.iter().find(|(_, c)| **c < 2) {
            return Err(Error::Contract(format!("class {class} has a single gallery item")));
        }
        let mut normed = features.to_vec();
        for row in normed.chunks_mut(dim) {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            row.iter_mut().for_each(|v| *v /= norm);
        }
        Ok(RetrievalIndex {
            features: normed,
            dim,
            labels: labels.to_vec(),
            ids: ids.to_vec(),
        })
    }

    pub fn from_tensor(features: &Tensor, labels: &[usize]) -> Result<RetrievalIndex> {
        match *features.shape() {
            [_, d] => Self::new(features.data(), d, labels),
            _ => Err(Error::Contract(format!(
                "gallery features must be N×d, got {:?}",
                features.shape()
            ))),
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    /// Gallery positions other than `query`, most similar first.
    pub fn ranking(&self, query: usize) -> Vec<usize> {
        let q = self.row(query);
        let mut scored: Vec<(f64, usize)> = (0..self.len())
            .filter(|&j| j != query)
            // `+ 0.0` maps -0.0 to 0.0 so orthogonal items tie under total_cmp.
            .map(|j| (q.iter().zip(self.row(j)).map(|(a, b)| a * b).sum::<f64>() + 0.0, j))
            .collect();
        scored.sort_by(|a, b| match b.0.total_cmp(&a.0) {
            Ordering::Equal => self.ids[a.1].cmp(&self.ids[b.1]),
            o => o,
        });
        scored.into_iter().map(|(_, j)| j).collect()
    }

    /// Per query, whether each ranked neighbour shares the query's class.
    fn relevance(&self) -> Vec<Vec<bool>> {
        pool().install(|| {
            (0..self.len())
                .into_par_iter()
                .map(|q| {
                    self.ranking(q)
                        .into_iter()
                        .map(|j| self.labels[j] == self.labels[q])
                        .collect()
                })
                .collect()
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrPoint {
    pub recall: f64,
    pub precision: f64,
}

/// All metrics of one gallery, computed from a single ranking pass.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalMetrics {
    /// (K, Recall@K) in the requested order.
    pub recall: Vec<(usize, f64)>,
    pub map: f64,
    pub pr: Vec<PrPoint>,
}

impl RetrievalMetrics {
    pub fn recall_at(&self, k: usize) -> Option<f64> {
        self.recall.iter().find(|(kk, _)| *kk == k).map(|(_, v)| *v)
    }
}

fn check_ks(n: usize, ks: &[usize]) -> Result<()> {
    match ks.iter().find(|&&k| k == 0 || k >= n) {
        Some(k) => Err(Error::Contract(format!("Recall@{k} needs 1 ≤ K < gallery size {n}"))),
        None => Ok(()),
    }
}

fn recall_from(rel: &[Vec<bool>], ks: &[usize]) -> Vec<(usize, f64)> {
    ks.iter()
        .map(|&k| {
            let hits = rel.iter().filter(|r| r[..k].iter().any(|&x| x)).count();
            (k, hits as f64 / rel.len() as f64)
        })
        .collect()
}

fn average_precision(rel: &[bool]) -> f64 {
    let mut found = 0usize;
    let mut sum = 0.0;
    for (rank, &r) in rel.iter().enumerate() {
        if r {
            found += 1;
            sum += found as f64 / (rank + 1) as f64;
        }
    }
    if found == 0 {
        0.0
    } else {
        sum / found as f64
    }
}

fn map_from(rel: &[Vec<bool>]) -> f64 {
    rel.iter().map(|r| average_precision(r)).sum::<f64>() / rel.len() as f64
}

fn pr_from(rel: &[Vec<bool>]) -> Vec<PrPoint> {
    let depth = rel[0].len();
    let total: usize = rel.iter().map(|r| r.iter().filter(|&&x| x).count()).sum();
    let mut cum = vec![0usize; rel.len()];
    (0..depth)
        .map(|c| {
            for (acc, r) in cum.iter_mut().zip(rel) {
                *acc += r[c] as usize;
            }
            let retrieved_relevant: usize = cum.iter().sum();
            PrPoint {
                recall: retrieved_relevant as f64 / total as f64,
                precision: retrieved_relevant as f64 / (rel.len() * (c + 1)) as f64,
            }
        })
        .collect()
}

/// Fraction of queries with a same-class item among their top `k`, per `k`.
pub fn recall_at_k(index: &RetrievalIndex, ks: &[usize]) -> Result<Vec<(usize, f64)>> {
    check_ks(index.len(), ks)?;
    Ok(recall_from(&index.relevance(), ks))
}

/// Mean over queries of the average precision of the full ranking.
pub fn mean_average_precision(index: &RetrievalIndex) -> Result<f64> {
    Ok(map_from(&index.relevance()))
}

/// Micro-averaged precision and recall at every rank cut-off 1..N-1.
pub fn pr_curve(index: &RetrievalIndex) -> Result<Vec<PrPoint>> {
    Ok(pr_from(&index.relevance()))
}

pub fn evaluate(index: &RetrievalIndex, ks: &[usize]) -> Result<RetrievalMetrics> {
    check_ks(index.len(), ks)?;
    let rel = index.relevance();
    Ok(RetrievalMetrics {
        recall: recall_from(&rel, ks),
        map: map_from(&rel),
        pr: pr_from(&rel),
    })
}
