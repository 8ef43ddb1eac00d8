use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::adam::{adam_step, AdamState, LearningRates};
use super::report::{GroupMetrics, LossValues, MetricsReport, TracePoint};
use super::{derive_seed, Method, TrainConfig};
use crate::autodiff::Tensor;
use crate::data::{Batch, ClassSplitDataset, LabeledFeatures, PkSampler};
use crate::error::{Error, Result};
use crate::losses::{
    combined_loss, cross_entropy, estimate_fisher_with, ewc_penalty, l2_feature_loss, triplet_batch_hard, FisherState,
    LossBatch, TripletConfig,
};
use crate::net::{EmbeddingNet, FrozenSnapshot, NetConfig, Trainable};
use crate::retrieval::{evaluate, RetrievalIndex, DEFAULT_KS};

// Stream tags for `derive_seed`.
const STAGE_A_INIT: u64 = 1;
const STAGE_A_SAMPLER: u64 = 2;
const JOINT_INIT: u64 = 3;
const JOINT_SAMPLER: u64 = 4;
const EXTEND: u64 = 100;
const STEP_SAMPLER: u64 = 200;
const FISHER_SAMPLER: u64 = 300;

/// Test split of one class group.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalGroup {
    pub group: usize,
    pub classes: Vec<usize>,
    pub test: LabeledFeatures,
}

/// Everything an incremental step may read: the training samples of the
/// new group and the test splits used for evaluation. Training samples of
/// earlier groups are never part of it.
#[derive(Debug, Clone, PartialEq)]
pub struct StepData {
    group: usize,
    classes: Vec<usize>,
    train: LabeledFeatures,
    eval: Vec<EvalGroup>,
}

impl StepData {
    /// Data for adding group `group` (≥ 1) of `ds`, evaluated on groups
    /// `0..=group`.
    pub fn new(ds: &ClassSplitDataset, group: usize) -> Result<StepData> {
        if group == 0 {
            return Err(Error::Contract(
                "group 0 holds the original classes, not new ones".into(),
            ));
        }
        let classes = ds.group(group)?.to_vec();
        let eval = (0..=group)
            .map(|g| {
                let classes = ds.group(g)?.to_vec();
                Ok(EvalGroup {
                    group: g,
                    test: ds.test_set(&classes),
                    classes,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        StepData::from_parts(group, classes, ds.train_set(ds.group(group)?), eval)
    }

    pub fn from_parts(
        group: usize,
        classes: Vec<usize>,
        train: LabeledFeatures,
        eval: Vec<EvalGroup>,
    ) -> Result<StepData> {
        if let Some(l) = train.labels.iter().find(|l| !classes.contains(l)) {
            return Err(Error::Contract(format!(
                "training sample of class {l} outside the new group"
            )));
        }
        Ok(StepData {
            group,
            classes,
            train,
            eval,
        })
    }

    pub fn group(&self) -> usize {
        self.group
    }

    pub fn classes(&self) -> &[usize] {
        &self.classes
    }

    pub fn train(&self) -> &LabeledFeatures {
        &self.train
    }

    pub fn eval(&self) -> &[EvalGroup] {
        &self.eval
    }

    fn original_test(&self) -> Option<&LabeledFeatures> {
        self.eval.iter().find(|e| e.group == 0).map(|e| &e.test)
    }
}

/// A trained network with its report.
#[derive(Debug, Clone)]
pub struct StageResult {
    pub net: EmbeddingNet,
    pub report: MetricsReport,
}

/// Result of [`incremental_step`]: the adaptive network, the frozen
/// snapshot it was trained against, and the report.
#[derive(Debug, Clone)]
pub struct StepOutcome {
    pub net: EmbeddingNet,
    pub frozen: FrozenSnapshot,
    pub report: MetricsReport,
}

/// Retrieval metrics of `net` on each group's test split.
pub fn evaluate_groups(net: &EmbeddingNet, groups: &[EvalGroup]) -> Result<Vec<GroupMetrics>> {
    groups
        .iter()
        .map(|g| {
            let (features, _) = net.forward(&g.test.to_tensor()?)?;
            let index = RetrievalIndex::from_tensor(&features, &g.test.labels)?;
            Ok(GroupMetrics::from_metrics(
                g.group,
                g.classes.clone(),
                evaluate(&index, &DEFAULT_KS)?,
            ))
        })
        .collect()
}

fn original_map(net: &EmbeddingNet, test: &LabeledFeatures) -> Result<f64> {
    let (features, _) = net.forward(&test.to_tensor()?)?;
    Ok(evaluate(&RetrievalIndex::from_tensor(&features, &test.labels)?, &[1])?.map)
}

struct LoopOutput {
    first_batch: Option<LossValues>,
    trace: Vec<TracePoint>,
    epoch_seconds: Vec<f64>,
}

/// Adam training over sampler epochs. Only the batch work is timed.
#[allow(clippy::too_many_arguments)]
fn run_loop<F>(
    net: &mut EmbeddingNet,
    train: &LabeledFeatures,
    sampler: &mut PkSampler,
    epochs: usize,
    lr: LearningRates,
    trace_every: usize,
    trace_eval: Option<&LabeledFeatures>,
    mut loss: F,
) -> Result<LoopOutput>
where
    F: FnMut(&Trainable, &Tensor, &Batch) -> Result<(Tensor, LossValues)>,
{
    let mut adam = AdamState::new(net.params());
    let mut out = LoopOutput {
        first_batch: None,
        trace: Vec::with_capacity(epochs + 1),
        epoch_seconds: Vec::with_capacity(epochs),
    };
    out.trace.push(TracePoint {
        epoch: 0,
        loss: None,
        original_map: trace_eval.map(|t| original_map(net, t)).transpose()?,
    });
    for epoch in 1..=epochs {
        let start = Instant::now();
        let batches = sampler.epoch();
        let mut sum = LossValues::default();
        for batch in &batches {
            let t = net.trainable()?;
            let x = train.gather(&batch.rows)?;
            let (total, values) = loss(&t, &x, batch)?;
            out.first_batch.get_or_insert(values);
            total.backward()?;
            adam_step(net.params_mut(), &t.grads(), &mut adam, lr)?;
            sum.add_assign(&values);
        }
        out.epoch_seconds.push(start.elapsed().as_secs_f64());
        let evaluate_now = epoch % trace_every == 0 || epoch == epochs;
        out.trace.push(TracePoint {
            epoch,
            loss: Some(sum.scaled(1.0 / batches.len().max(1) as f64)),
            original_map: match trace_eval {
                Some(t) if evaluate_now => Some(original_map(net, t)?),
                _ => None,
            },
        });
    }
    Ok(out)
}

/// Columns `first..first + classes.len()` of the logits belong to `classes`,
/// which must be contiguous.
fn contiguous_start(classes: &[usize]) -> Result<usize> {
    let first = *classes
        .first()
        .ok_or_else(|| Error::Contract("empty class group".into()))?;
    if classes.iter().enumerate().any(|(i, &c)| c != first + i) {
        return Err(Error::Contract(format!(
            "class group {classes:?} is not a contiguous label range"
        )));
    }
    Ok(first)
}

/// `L_ce + L_triplet` with the softmax restricted to `classes`' logits.
fn supervised_loss(
    t: &Trainable,
    x: &Tensor,
    labels: &[usize],
    first: usize,
    width: usize,
    triplet: TripletConfig,
) -> Result<(Tensor, LossValues)> {
    let (features, logits) = t.forward(x)?;
    let local: Vec<usize> = labels.iter().map(|l| l - first).collect();
    let logits = if first == 0 && logits.shape()[1] == width {
        logits
    } else {
        logits.narrow_cols(first, width)?
    };
    let ce = cross_entropy(&logits, &local)?;
    let tr = triplet_batch_hard(&features, labels, triplet)?;
    let total = ce.add(&tr)?;
    let values = LossValues {
        total: total.item(),
        ce: ce.item(),
        triplet: tr.item(),
        ..Default::default()
    };
    Ok((total, values))
}

fn triplet_config(config: &TrainConfig) -> TripletConfig {
    TripletConfig {
        margin: config.weights.margin,
        normalize: config.normalize_features,
    }
}

fn fresh_net(ds: &ClassSplitDataset, classes: usize, config: &TrainConfig, stream: u64) -> Result<EmbeddingNet> {
    let net_config = NetConfig {
        in_dim: ds.in_dim(),
        hidden: config.hidden.clone(),
        feature_dim: config.feature_dim,
        num_classes: classes,
    };
    EmbeddingNet::new(
        &net_config,
        &mut ChaCha8Rng::seed_from_u64(derive_seed(config.seed, stream)),
    )
}

fn supervised_stage(
    ds: &ClassSplitDataset,
    classes: &[usize],
    config: &TrainConfig,
    init: u64,
    sampler_stream: u64,
    arm: &str,
    step: usize,
) -> Result<StageResult> {
    config.validate()?;
    let mut net = fresh_net(ds, classes.len(), config, init)?;
    let train = ds.train_set(classes);
    let mut sampler = PkSampler::new(
        &train,
        classes,
        config.p,
        config.k,
        derive_seed(config.seed, sampler_stream),
    )?;
    let triplet = triplet_config(config);
    let original_test = ds.test_set(ds.group(0)?);
    let out = run_loop(
        &mut net,
        &train,
        &mut sampler,
        config.stage_a_epochs,
        config.learning_rates(),
        config.trace_every,
        Some(&original_test),
        |t, x, b| supervised_loss(t, x, &b.labels, 0, classes.len(), triplet),
    )?;
    let eval: Vec<EvalGroup> = (0..ds.groups().len())
        .filter(|&g| ds.groups()[g].iter().all(|c| classes.contains(c)))
        .map(|g| EvalGroup {
            group: g,
            classes: ds.groups()[g].clone(),
            test: ds.test_set(&ds.groups()[g]),
        })
        .collect();
    let report = MetricsReport {
        arm: arm.to_string(),
        method: None,
        step,
        seed: config.seed,
        groups: evaluate_groups(&net, &eval)?,
        first_batch: out.first_batch,
        trace: out.trace,
        epoch_seconds: out.epoch_seconds,
        config: config.clone(),
    };
    Ok(StageResult { net, report })
}

/// Trains network A on the original classes with `L_ce + L_triplet`.
pub fn train_stage_a(ds: &ClassSplitDataset, config: &TrainConfig) -> Result<StageResult> {
    let classes = ds.group(0)?.to_vec();
    supervised_stage(ds, &classes, config, STAGE_A_INIT, STAGE_A_SAMPLER, "initial", 0)
}

/// Reference network trained from scratch on groups `0..=through_group`.
pub fn train_joint(ds: &ClassSplitDataset, through_group: usize, config: &TrainConfig) -> Result<StageResult> {
    let classes = ds.classes_through(through_group)?;
    let mut result = supervised_stage(
        ds,
        &classes,
        config,
        JOINT_INIT,
        JOINT_SAMPLER,
        "joint_reference",
        through_group,
    )?;
    result.report.method = Some(Method::JointReference);
    Ok(result)
}

/// Diagonal Fisher of `L_ce + L_triplet` at `net`, averaged over one
/// sampler epoch of `train`, whose classes are `classes`.
pub fn prepare_fisher(
    net: &EmbeddingNet,
    train: &LabeledFeatures,
    classes: &[usize],
    config: &TrainConfig,
) -> Result<FisherState> {
    let first = contiguous_start(classes)?;
    let stream = FISHER_SAMPLER + first as u64;
    let batches = PkSampler::new(train, classes, config.p, config.k, derive_seed(config.seed, stream))?.epoch();
    let triplet = triplet_config(config);
    estimate_fisher_with(net, &batches, |t, b: &Batch| {
        let x = train.gather(&b.rows)?;
        Ok(supervised_loss(t, &x, &b.labels, first, classes.len(), triplet)?.0)
    })
}

/// Trains an adaptive copy of `net_a`, extended by the new group's classes,
/// on the new group only. `fisher` is required by the EWC arm.
pub fn incremental_step(
    net_a: &EmbeddingNet,
    data: &StepData,
    fisher: Option<&FisherState>,
    config: &TrainConfig,
) -> Result<StepOutcome> {
    config.validate()?;
    let method = config.method;
    let n = net_a.num_classes();
    let m = data.classes.len();
    if data.classes.iter().any(|&c| c < n) {
        return Err(Error::Contract(format!(
            "new group {:?} overlaps the {n} classes the network already knows",
            data.classes
        )));
    }
    if method != Method::FeatureExtraction && contiguous_start(&data.classes)? != n {
        return Err(Error::Contract(format!(
            "new group {:?} must continue the label range after class {}",
            data.classes,
            n - 1
        )));
    }
    let frozen = net_a.snapshot();
    let report = |net: &EmbeddingNet, groups: &[EvalGroup], out: Option<LoopOutput>| -> Result<MetricsReport> {
        let out = out.unwrap_or(LoopOutput {
            first_batch: None,
            trace: Vec::new(),
            epoch_seconds: Vec::new(),
        });
        Ok(MetricsReport {
            arm: method.name().to_string(),
            method: Some(method),
            step: data.group,
            seed: config.seed,
            groups: evaluate_groups(net, groups)?,
            first_batch: out.first_batch,
            trace: out.trace,
            epoch_seconds: out.epoch_seconds,
            config: config.clone(),
        })
    };

    match method {
        Method::JointReference => {
            return Err(Error::Contract(
                "joint_reference trains on all classes and is not an incremental arm".into(),
            ))
        }
        Method::FeatureExtraction => {
            let new_groups: Vec<EvalGroup> = data.eval.iter().filter(|g| g.group > 0).cloned().collect();
            let net = net_a.clone();
            let report = report(&net, &new_groups, None)?;
            return Ok(StepOutcome { net, frozen, report });
        }
        Method::Ewc if fisher.is_none() => {
            return Err(Error::Contract(
                "the ewc arm needs a Fisher estimate from the previous stage".into(),
            ))
        }
        _ => {}
    }

    let mut ext_rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, EXTEND + data.group as u64));
    let mut net = net_a.extend_classifier(m, &mut ext_rng)?;
    let sampler_seed = derive_seed(config.seed, STEP_SAMPLER + data.group as u64);
    let mut sampler = PkSampler::new(&data.train, &data.classes, config.p, config.k, sampler_seed)?;
    let weights = method.effective_weights(&config.weights);
    let out = run_loop(
        &mut net,
        &data.train,
        &mut sampler,
        config.epochs,
        config.learning_rates(),
        config.trace_every,
        data.original_test(),
        |t, x, b| {
            let (features, logits) = t.forward(x)?;
            let (frozen_features, frozen_logits) = frozen.forward(x)?;
            let local: Vec<usize> = b.labels.iter().map(|l| l - n).collect();
            let terms = combined_loss(
                LossBatch {
                    features: &features,
                    logits: &logits,
                    frozen_features: &frozen_features,
                    frozen_logits: &frozen_logits,
                    labels: &local,
                },
                &weights,
                &config.kernel,
                config.normalize_features,
            )?;
            let mut total = terms.total;
            let mut regularizer = 0.0;
            match method {
                Method::L2feat => {
                    let r = l2_feature_loss(&frozen_features, &features)?;
                    regularizer = r.item();
                    total = total.add(&r.scale(config.l2_weight))?;
                }
                Method::Ewc => {
                    let r = ewc_penalty(t.leaves(), fisher.expect("checked above"), config.ewc_strength)?;
                    regularizer = r.item();
                    total = total.add(&r)?;
                }
                _ => {}
            }
            let values = LossValues {
                total: total.item(),
                ce: terms.ce,
                triplet: terms.triplet,
                dist: terms.dist,
                mmd: terms.mmd,
                regularizer,
            };
            Ok((total, values))
        },
    )?;
    let report = report(&net, &data.eval, Some(out))?;
    Ok(StepOutcome { net, frozen, report })
}

/// Adds groups `1..` of `ds` one after another, each step's adaptive
/// network becoming the next frozen network. Returns one report per step.
///
/// For EWC, `fisher` is the stage-A estimate; after each step the estimate
/// on that step's training data is added to it.
pub fn run_multi_step(
    ds: &ClassSplitDataset,
    initial: &EmbeddingNet,
    fisher: Option<&FisherState>,
    config: &TrainConfig,
) -> Result<Vec<MetricsReport>> {
    let steps = ds.groups().len() - 1;
    if steps == 0 {
        return Err(Error::Contract("the schedule has no new class group".into()));
    }
    let mut reports = Vec::with_capacity(steps);
    if config.method == Method::JointReference {
        for g in 1..=steps {
            reports.push(train_joint(ds, g, config)?.report);
        }
        return Ok(reports);
    }
    let mut net = initial.clone();
    let mut fisher = fisher.cloned();
    for g in 1..=steps {
        let data = StepData::new(ds, g)?;
        let outcome = incremental_step(&net, &data, fisher.as_ref(), config)?;
        if config.method == Method::Ewc {
            let latest = prepare_fisher(&outcome.net, data.train(), data.classes(), config)?;
            fisher = Some(fisher.expect("ewc requires a Fisher estimate").accumulate(&latest)?);
        }
        net = outcome.net;
        reports.push(outcome.report);
    }
    Ok(reports)
}

/// Per-epoch training seconds of `config.method` when adding group 1 of
/// `ds` for `epochs` epochs. `joint_reference` trains on groups 0 and 1.
pub fn measure_wall_clock(
    ds: &ClassSplitDataset,
    initial: &EmbeddingNet,
    fisher: Option<&FisherState>,
    config: &TrainConfig,
    epochs: usize,
) -> Result<Vec<f64>> {
    match config.method {
        Method::JointReference => {
            let cfg = TrainConfig {
                stage_a_epochs: epochs,
                ..config.clone()
            };
            Ok(train_joint(ds, 1, &cfg)?.report.epoch_seconds)
        }
        _ => {
            let cfg = TrainConfig {
                epochs,
                trace_every: epochs + 1,
                ..config.clone()
            };
            let data = StepData::new(ds, 1)?;
            Ok(incremental_step(initial, &data, fisher, &cfg)?.report.epoch_seconds)
        }
    }
}
