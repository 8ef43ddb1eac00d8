//! Declarative experiments: a TOML spec naming a dataset, a class schedule,
//! training hyper-parameters and the arms to run, plus optional ablation
//! and α/β sweeps. Results are written as JSON reports and plot-ready CSV.

mod output;
mod run;

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{
    generate_synthetic, load_feature_csv_with, split_schedule, ClassSplitDataset, FeatureSchema, SyntheticConfig,
};
use crate::error::{Error, Result};
use crate::train::{Method, TrainConfig};

pub use output::{pr_csv, summary_csv, trace_csv, write_outputs};
pub use run::{run_experiment, AblationArm, CellReport, ExperimentOutput, Mode};

/// Source of the labeled feature vectors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSpec {
    Synthetic(SyntheticConfig),
    Csv(CsvDataset),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CsvDataset {
    /// Relative paths are resolved against the spec file's directory.
    pub path: PathBuf,
    #[serde(default)]
    pub schema: FeatureSchema,
}

/// Original classes first, then the incremental groups, in label order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleSpec {
    pub original_count: usize,
    pub group_sizes: Vec<usize>,
    pub train_fraction: f64,
}

impl Default for ScheduleSpec {
    fn default() -> Self {
        ScheduleSpec {
            original_count: 8,
            group_sizes: vec![8],
            train_fraction: 0.6,
        }
    }
}

/// Optional grids run by `run` after the arms. A missing α or β grid means
/// the value from `[train.weights]`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSpec {
    pub alpha: Option<Vec<f64>>,
    pub beta: Option<Vec<f64>>,
    /// Also run the four loss-component ablation arms.
    pub ablation: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    pub dataset: DatasetSpec,
    #[serde(default)]
    pub schedule: ScheduleSpec,
    #[serde(default)]
    pub train: TrainConfig,
    pub arms: Vec<Method>,
    #[serde(default)]
    pub sweep: Option<SweepSpec>,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    /// When set, replaces both the training seed and the synthetic
    /// generator seed.
    #[serde(default)]
    pub seed: Option<u64>,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("results")
}

impl ExperimentSpec {
    pub fn from_toml(text: &str) -> Result<ExperimentSpec> {
        let spec: ExperimentSpec = toml::from_str(text).map_err(|e| Error::config("spec", e.message().to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    /// Reads and validates a spec file, resolving a relative CSV path
    /// against the file's directory.
    pub fn from_path(path: &Path) -> Result<ExperimentSpec> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut spec = ExperimentSpec::from_toml(&text)?;
        if let DatasetSpec::Csv(csv) = &mut spec.dataset {
            if csv.path.is_relative() {
                if let Some(dir) = path.parent() {
                    csv.path = dir.join(&csv.path);
                }
            }
        }
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.arms.is_empty() {
            return Err(Error::config("arms", "list at least one arm"));
        }
        if self.schedule.original_count == 0 {
            return Err(Error::config("schedule.original_count", "must be at least 1"));
        }
        if self.schedule.group_sizes.is_empty() || self.schedule.group_sizes.contains(&0) {
            return Err(Error::config(
                "schedule.group_sizes",
                "needs at least one non-empty group",
            ));
        }
        let f = self.schedule.train_fraction;
        if !(f > 0.0 && f < 1.0) {
            return Err(Error::config(
                "schedule.train_fraction",
                format!("must lie in (0, 1), got {f}"),
            ));
        }
        if let DatasetSpec::Synthetic(s) = &self.dataset {
            s.validate()
                .map_err(|e| Error::config("dataset.synthetic", e.to_string()))?;
            let wanted = self.schedule.original_count + self.schedule.group_sizes.iter().sum::<usize>();
            if wanted != s.class_count() {
                return Err(Error::config(
                    "schedule",
                    format!("covers {wanted} classes, the synthetic dataset has {}", s.class_count()),
                ));
            }
        }
        if let Some(sweep) = &self.sweep {
            for (field, grid) in [("sweep.alpha", &sweep.alpha), ("sweep.beta", &sweep.beta)] {
                if let Some(g) = grid {
                    if g.is_empty() {
                        return Err(Error::config(field, "grid is empty"));
                    }
                    if let Some(v) = g.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
                        return Err(Error::config(
                            field,
                            format!("weights must be finite and nonnegative, got {v}"),
                        ));
                    }
                }
            }
        }
        self.training_config().validate()
    }

    /// `train` with the experiment seed applied.
    pub fn training_config(&self) -> TrainConfig {
        let mut cfg = self.train.clone();
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        cfg
    }

    /// Loads or generates the data and applies the schedule.
    pub fn dataset(&self) -> Result<ClassSplitDataset> {
        let s = &self.schedule;
        match &self.dataset {
            DatasetSpec::Synthetic(cfg) => {
                let cfg = SyntheticConfig {
                    seed: self.seed.unwrap_or(cfg.seed),
                    ..cfg.clone()
                };
                let data = generate_synthetic(&cfg)?;
                Ok(split_schedule(data, s.original_count, &s.group_sizes, s.train_fraction)?.with_seed(cfg.seed))
            }
            DatasetSpec::Csv(csv) => {
                let data = load_feature_csv_with(&csv.path, &csv.schema)?;
                split_schedule(data, s.original_count, &s.group_sizes, s.train_fraction)
            }
        }
    }
}
