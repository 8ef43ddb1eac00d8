use serde::{Deserialize, Serialize};

use super::{Method, TrainConfig};
use crate::error::{Error, Result};
use crate::retrieval::{PrPoint, RetrievalMetrics};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RecallAt {
    pub k: usize,
    pub value: f64,
}

/// Retrieval metrics on the test split of one class group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupMetrics {
    /// 0 for the original classes, then the added groups in order.
    pub group: usize,
    pub classes: Vec<usize>,
    pub recall: Vec<RecallAt>,
    pub map: f64,
    pub pr: Vec<PrPoint>,
}

impl GroupMetrics {
    pub fn from_metrics(group: usize, classes: Vec<usize>, m: RetrievalMetrics) -> GroupMetrics {
        GroupMetrics {
            group,
            classes,
            recall: m.recall.into_iter().map(|(k, value)| RecallAt { k, value }).collect(),
            map: m.map,
            pr: m.pr,
        }
    }

    pub fn recall_at(&self, k: usize) -> Option<f64> {
        self.recall.iter().find(|r| r.k == k).map(|r| r.value)
    }
}

/// Unweighted loss terms; terms an arm does not use are still reported
/// where they can be computed.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossValues {
    pub total: f64,
    pub ce: f64,
    pub triplet: f64,
    pub dist: f64,
    pub mmd: f64,
    /// Feature-L2 or EWC penalty of the baseline arms.
    pub regularizer: f64,
}

impl LossValues {
    pub(crate) fn add_assign(&mut self, o: &LossValues) {
        self.total += o.total;
        self.ce += o.ce;
        self.triplet += o.triplet;
        self.dist += o.dist;
        self.mmd += o.mmd;
        self.regularizer += o.regularizer;
    }

    pub(crate) fn scaled(&self, s: f64) -> LossValues {
        LossValues {
            total: self.total * s,
            ce: self.ce * s,
            triplet: self.triplet * s,
            dist: self.dist * s,
            mmd: self.mmd * s,
            regularizer: self.regularizer * s,
        }
    }

    fn all(&self) -> [f64; 6] {
        [self.total, self.ce, self.triplet, self.dist, self.mmd, self.regularizer]
    }
}

/// Per-epoch mean losses, with the original-class mAP on evaluation epochs.
/// Epoch 0 is the state before training.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TracePoint {
    pub epoch: usize,
    pub loss: Option<LossValues>,
    pub original_map: Option<f64>,
}

/// Outcome of one training stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub arm: String,
    /// `None` for the initial model and other non-incremental stages.
    pub method: Option<Method>,
    /// 0 for the initial model, then one per added group.
    pub step: usize,
    pub seed: u64,
    pub groups: Vec<GroupMetrics>,
    /// Loss terms on the very first training batch.
    pub first_batch: Option<LossValues>,
    pub trace: Vec<TracePoint>,
    pub epoch_seconds: Vec<f64>,
    pub config: TrainConfig,
}

impl MetricsReport {
    pub fn group(&self, g: usize) -> Option<&GroupMetrics> {
        self.groups.iter().find(|m| m.group == g)
    }

    /// Mean epoch time, skipping the first (warm-up) epoch when possible.
    pub fn mean_epoch_seconds(&self) -> Option<f64> {
        let s = match self.epoch_seconds.len() {
            0 => return None,
            1 => &self.epoch_seconds[..],
            _ => &self.epoch_seconds[1..],
        };
        Some(s.iter().sum::<f64>() / s.len() as f64)
    }

    /// Checks that every reported number is finite.
    pub fn validate(&self) -> Result<()> {
        let mut values: Vec<f64> = Vec::new();
        for g in &self.groups {
            values.extend(g.recall.iter().map(|r| r.value));
            values.push(g.map);
            values.extend(g.pr.iter().flat_map(|p| [p.recall, p.precision]));
        }
        for t in &self.trace {
            values.extend(t.loss.iter().flat_map(LossValues::all));
            values.extend(t.original_map);
        }
        values.extend(self.first_batch.iter().flat_map(LossValues::all));
        values.extend(&self.epoch_seconds);
        match values.iter().find(|v| !v.is_finite()) {
            Some(v) => Err(Error::Contract(format!(
                "report `{}` contains the non-finite value {v}",
                self.arm
            ))),
            None => Ok(()),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        self.validate()?;
        serde_json::to_string_pretty(self).map_err(|source| Error::Json {
            context: format!("serializing report `{}`", self.arm),
            source,
        })
    }
}
