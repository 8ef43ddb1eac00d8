//! Training protocol: stage-A training on the original classes, one-step
//! and multi-step incremental training of an adaptive network against a
//! frozen snapshot, the baseline arms, and per-epoch timing.

mod adam;
mod protocol;
mod report;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::{DEFAULT_K, DEFAULT_P};
use crate::error::{Error, Result};
use crate::losses::{KernelSpec, LossWeights};

pub use adam::{adam_step, AdamState, LearningRates};
pub use protocol::{
    evaluate_groups, incremental_step, measure_wall_clock, prepare_fisher, run_multi_step, train_joint, train_stage_a,
    EvalGroup, StageResult, StepData, StepOutcome,
};
pub use report::{GroupMetrics, LossValues, MetricsReport, RecallAt, TracePoint};

/// Training arm.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// `α L_dist + β L_mmd + L_ce + L_triplet`.
    Ours,
    Finetune,
    /// Distillation only: `α L_dist + L_ce + L_triplet`.
    Lwf,
    /// Feature-space L2 distillation, weight γ.
    L2feat,
    Ewc,
    /// No training; the initial model is evaluated on the new classes.
    FeatureExtraction,
    /// A fresh network trained on all classes at once.
    JointReference,
}

impl Method {
    pub const ALL: [Method; 7] = [
        Method::Ours,
        Method::Finetune,
        Method::Lwf,
        Method::L2feat,
        Method::Ewc,
        Method::FeatureExtraction,
        Method::JointReference,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Ours => "ours",
            Method::Finetune => "finetune",
            Method::Lwf => "lwf",
            Method::L2feat => "l2feat",
            Method::Ewc => "ewc",
            Method::FeatureExtraction => "feature_extraction",
            Method::JointReference => "joint_reference",
        }
    }

    /// Distillation and MMD weights the arm actually optimizes.
    pub fn effective_weights(self, weights: &LossWeights) -> LossWeights {
        match self {
            Method::Ours => *weights,
            Method::Lwf => LossWeights { beta: 0.0, ..*weights },
            _ => LossWeights {
                alpha: 0.0,
                beta: 0.0,
                ..*weights
            },
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Method> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::config("method", format!("unknown method `{s}`")))
    }
}

/// Hyper-parameters of one training run.
///
/// Full-scale reference values: 800 epochs, learning rates 1e-6 (backbone)
/// and 1e-5 (fully-connected layers and classifier), 512-d features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Epochs of each incremental step.
    pub epochs: usize,
    /// Epochs of stage-A and joint training.
    pub stage_a_epochs: usize,
    pub lr_extractor: f64,
    pub lr_head: f64,
    pub weights: LossWeights,
    pub method: Method,
    pub seed: u64,
    pub kernel: KernelSpec,
    /// Classes per batch.
    pub p: usize,
    /// Samples per class in a batch.
    pub k: usize,
    /// L2-normalize features before triplet similarities.
    pub normalize_features: bool,
    /// Weight γ of the feature-L2 baseline.
    pub l2_weight: f64,
    pub ewc_strength: f64,
    /// Epochs between mAP evaluations on the original classes.
    pub trace_every: usize,
    pub hidden: Vec<usize>,
    pub feature_dim: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 200,
            stage_a_epochs: 200,
            lr_extractor: 1e-2,
            lr_head: 1e-2,
            weights: LossWeights::default(),
            method: Method::Ours,
            seed: 0,
            kernel: KernelSpec::default(),
            p: DEFAULT_P,
            k: DEFAULT_K,
            normalize_features: true,
            l2_weight: 1.0,
            ewc_strength: 100.0,
            trace_every: 20,
            hidden: vec![64, 64],
            feature_dim: 32,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::config("epochs", "must be at least 1"));
        }
        if self.stage_a_epochs == 0 {
            return Err(Error::config("stage_a_epochs", "must be at least 1"));
        }
        if self.method != Method::FeatureExtraction {
            for (field, v) in [("lr_extractor", self.lr_extractor), ("lr_head", self.lr_head)] {
                if !(v.is_finite() && v > 0.0) {
                    return Err(Error::config(field, format!("must be positive, got {v}")));
                }
            }
        }
        for (field, v) in [("l2_weight", self.l2_weight), ("ewc_strength", self.ewc_strength)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::config(field, format!("must be finite and nonnegative, got {v}")));
            }
        }
        if self.k < 2 {
            return Err(Error::config("k", "triplet mining needs at least 2 samples per class"));
        }
        if self.p < 2 {
            return Err(Error::config("p", "batches need at least 2 classes"));
        }
        if self.trace_every == 0 {
            return Err(Error::config("trace_every", "must be at least 1"));
        }
        if self.feature_dim == 0 || self.hidden.contains(&0) {
            return Err(Error::config("hidden", "layer widths must be positive"));
        }
        self.weights.validate()?;
        self.kernel.validate()
    }

    pub fn learning_rates(&self) -> LearningRates {
        LearningRates {
            extractor: self.lr_extractor,
            head: self.lr_head,
        }
    }
}

/// Independent stream seed for a labelled purpose within a run.
pub(crate) fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
