//! Training objectives: classification, batch-hard triplet, distillation
//! against a frozen teacher, kernel MMD between teacher and student
//! features, their weighted combination, and the feature-L2 / EWC baseline
//! regularizers.

mod classification;
mod combined;
mod distill;
mod mmd;
mod regularizers;
mod triplet;

pub use classification::cross_entropy;
pub use combined::{combined_loss, LossBatch, LossTerms, LossWeights};
pub use distill::{distillation, soft_target_entropy};
pub use mmd::{gaussian_kernel, kernel_sum, mmd_loss, BandwidthSelection, KernelSpec};
pub use regularizers::{estimate_fisher_with, ewc_penalty, l2_feature_loss, FisherState};
pub use triplet::{triplet_batch_hard, TripletConfig};

/// Margin of the triplet hinge.
pub const DEFAULT_MARGIN: f64 = 0.5;
/// Softmax temperature for distillation.
pub const DEFAULT_TEMPERATURE: f64 = 2.0;
