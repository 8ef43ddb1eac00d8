use std::fmt;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::ExperimentSpec;
use crate::data::DatasetManifest;
use crate::error::{Error, Result};
use crate::losses::{FisherState, LossWeights};
use crate::train::{prepare_fisher, run_multi_step, train_stage_a, Method, MetricsReport, TrainConfig};

/// Loss-component ablation arms, all trained with `L_ce + L_triplet` plus
/// the named terms at the spec's α and β.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationArm {
    CeTrip,
    Dist,
    Mmd,
    DistMmd,
}

impl AblationArm {
    pub const ALL: [AblationArm; 4] = [
        AblationArm::CeTrip,
        AblationArm::Dist,
        AblationArm::Mmd,
        AblationArm::DistMmd,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AblationArm::CeTrip => "ce_trip",
            AblationArm::Dist => "ce_trip_dist",
            AblationArm::Mmd => "ce_trip_mmd",
            AblationArm::DistMmd => "ce_trip_dist_mmd",
        }
    }

    pub fn weights(self, base: &LossWeights) -> LossWeights {
        let (alpha, beta) = match self {
            AblationArm::CeTrip => (0.0, 0.0),
            AblationArm::Dist => (base.alpha, 0.0),
            AblationArm::Mmd => (0.0, base.beta),
            AblationArm::DistMmd => (base.alpha, base.beta),
        };
        LossWeights { alpha, beta, ..*base }
    }
}

impl fmt::Display for AblationArm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Which cells an experiment executes.
#[derive(Debug, Clone, PartialEq)]
pub enum Mode {
    /// The spec's arms, then its `[sweep]` block if present.
    Run,
    /// The four ablation arms only.
    Ablate,
    /// The α × β grid only.
    Sweep { alpha: Vec<f64>, beta: Vec<f64> },
}

/// One report of one cell. Cells of an arm are its incremental steps,
/// `s1`, `s2`, …; grid cells carry their weights, as in `a0.1_b10_s1`.
#[derive(Debug, Clone, PartialEq)]
pub struct CellReport {
    pub arm: String,
    pub cell: String,
    pub report: MetricsReport,
}

#[derive(Debug, Clone)]
pub struct ExperimentOutput {
    pub spec: ExperimentSpec,
    pub manifest: DatasetManifest,
    /// Stage-A report, cell `s0` of arm `initial`.
    pub initial: MetricsReport,
    /// In execution-plan order.
    pub cells: Vec<CellReport>,
}

struct Job {
    arm: String,
    prefix: String,
    config: TrainConfig,
}

fn plan(spec: &ExperimentSpec, mode: &Mode) -> Result<Vec<Job>> {
    let base = spec.training_config();
    let arm_job = |m: Method| Job {
        arm: m.name().to_string(),
        prefix: String::new(),
        config: TrainConfig {
            method: m,
            ..base.clone()
        },
    };
    let ablation_jobs = || {
        AblationArm::ALL.into_iter().map(|a| Job {
            arm: a.name().to_string(),
            prefix: String::new(),
            config: TrainConfig {
                method: Method::Ours,
                weights: a.weights(&base.weights),
                ..base.clone()
            },
        })
    };
    let grid_jobs = |alpha: &[f64], beta: &[f64]| -> Vec<Job> {
        let mut jobs = Vec::new();
        for &a in alpha {
            for &b in beta {
                jobs.push(Job {
                    arm: "sweep".to_string(),
                    prefix: format!("a{a}_b{b}_"),
                    config: TrainConfig {
                        method: Method::Ours,
                        weights: LossWeights {
                            alpha: a,
                            beta: b,
                            ..base.weights
                        },
                        ..base.clone()
                    },
                });
            }
        }
        jobs
    };

    let mut jobs = Vec::new();
    match mode {
        Mode::Run => {
            let mut seen = Vec::new();
            for &m in &spec.arms {
                if seen.contains(&m) {
                    return Err(Error::config("arms", format!("`{m}` is listed twice")));
                }
                seen.push(m);
                jobs.push(arm_job(m));
            }
            if let Some(sweep) = &spec.sweep {
                if sweep.ablation {
                    jobs.extend(ablation_jobs());
                }
                if sweep.alpha.is_some() || sweep.beta.is_some() {
                    let alpha = sweep.alpha.clone().unwrap_or_else(|| vec![base.weights.alpha]);
                    let beta = sweep.beta.clone().unwrap_or_else(|| vec![base.weights.beta]);
                    jobs.extend(grid_jobs(&alpha, &beta));
                }
            }
        }
        Mode::Ablate => jobs.extend(ablation_jobs()),
        Mode::Sweep { alpha, beta } => {
            for (field, grid) in [("alpha", alpha), ("beta", beta)] {
                if grid.is_empty() {
                    return Err(Error::config(field, "grid is empty"));
                }
                if let Some(v) = grid.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
                    return Err(Error::config(
                        field,
                        format!("weights must be finite and nonnegative, got {v}"),
                    ));
                }
            }
            jobs.extend(grid_jobs(alpha, beta));
        }
    }
    Ok(jobs)
}

/// Trains network A once, then every cell of `mode` from it, running up to
/// `jobs` arms at a time. Reports come back in plan order regardless of
/// scheduling, so outputs do not depend on `jobs`.
pub fn run_experiment(spec: &ExperimentSpec, mode: &Mode, jobs: usize) -> Result<ExperimentOutput> {
    spec.validate()?;
    if jobs == 0 {
        return Err(Error::config("jobs", "must be at least 1"));
    }
    let plan = plan(spec, mode)?;
    let ds = spec.dataset()?;
    let base = spec.training_config();
    let initial = train_stage_a(&ds, &base).map_err(|e| wrap("initial", e))?;

    let fisher: Option<FisherState> = if plan.iter().any(|j| j.config.method == Method::Ewc) {
        let original = ds.group(0)?;
        Some(prepare_fisher(&initial.net, &ds.train_set(original), original, &base).map_err(|e| wrap("ewc", e))?)
    } else {
        None
    };

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| Error::Contract(format!("cannot start {jobs} worker threads: {e}")))?;
    let results: Vec<Result<Vec<CellReport>>> = pool.install(|| {
        plan.par_iter()
            .map(|job| {
                let reports =
                    run_multi_step(&ds, &initial.net, fisher.as_ref(), &job.config).map_err(|e| wrap(&job.arm, e))?;
                Ok(reports
                    .into_iter()
                    .enumerate()
                    .map(|(i, mut report)| {
                        report.arm = job.arm.clone();
                        CellReport {
                            arm: job.arm.clone(),
                            cell: format!("{}s{}", job.prefix, i + 1),
                            report,
                        }
                    })
                    .collect())
            })
            .collect()
    });
    let mut cells = Vec::new();
    for r in results {
        cells.extend(r?);
    }
    Ok(ExperimentOutput {
        spec: spec.clone(),
        manifest: ds.manifest(),
        initial: initial.report,
        cells,
    })
}

fn wrap(arm: &str, source: Error) -> Error {
    if source.is_config() {
        return source;
    }
    Error::Arm {
        arm: arm.to_string(),
        source: Box::new(source),
    }
}
