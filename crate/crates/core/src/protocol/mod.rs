//! The class-incremental experiment driver: task streams over disjoint class
//! sets, the pose scenario switch, the per-task training loop (distillation
//! objective plus rehearsal), evaluation over seen classes, and metrics.
//!
//! Determinism contract: every random choice (class order, pose rotations,
//! batch shuffles, exemplar picks, init) draws from a stream derived from the
//! run seed, a fixed tag, and structural indices, so identical configs give
//! identical results bit for bit.

mod metrics;

pub use metrics::{
    accuracy, avg_accuracy, feature_retention, forgetting_rate, EpochRecord, ForgettingVariant,
    MetricsTable,
};

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::dataio::{build_dataset, normalize, DataError, Dataset, DatasetSpec};
use crate::eqnet::{
    accumulate_gradients, knn_neighborhoods, EqnetError, GradientSet, Model, ModelCfg,
    ModelOutputs,
};
use crate::geometry::{random_rotation, rotate_cloud, PointCloud};
use crate::linalg::Vec3;
use crate::losses::{
    exemplar_loss_grads, task_loss_grads, LossBreakdown, LossError, LossHyperparams,
};
use crate::rehearsal::{ExemplarStore, RehearsalError};
use crate::scalar::Real;
use crate::seeding::stream;

#[derive(Debug, thiserror::Error)]
pub enum ProtocolError {
    #[error("invalid configuration: {0}")]
    BadConfig(String),
    #[error("empty evaluation set")]
    EmptyEvaluation,
    #[error(
        "non-finite loss at task {task} epoch {epoch} step {step}; last finite total {last_finite}"
    )]
    NonFiniteLoss { task: usize, epoch: usize, step: usize, last_finite: f64 },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Net(#[from] EqnetError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Rehearsal(#[from] RehearsalError),
}

/// How samples are posed when presented to the model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Pose {
    #[default]
    Aligned,
    PoseAgnostic,
}

/// Train/test pose pair, written `A/A`, `PA/PA`, `A/PA`, `PA/A`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Scenario {
    pub train: Pose,
    pub test: Pose,
}

impl Scenario {
    pub const ALIGNED: Scenario = Scenario { train: Pose::Aligned, test: Pose::Aligned };
    pub const POSE_AGNOSTIC: Scenario =
        Scenario { train: Pose::PoseAgnostic, test: Pose::PoseAgnostic };
}

fn parse_pose(s: &str) -> Result<Pose, ProtocolError> {
    match s.trim().to_ascii_lowercase().as_str() {
        "a" | "aligned" => Ok(Pose::Aligned),
        "pa" | "pose-agnostic" | "poseagnostic" => Ok(Pose::PoseAgnostic),
        other => Err(ProtocolError::BadConfig(format!("unknown pose {other:?}"))),
    }
}

impl FromStr for Scenario {
    type Err = ProtocolError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (train, test) = s
            .split_once('/')
            .ok_or_else(|| ProtocolError::BadConfig(format!("scenario {s:?} is not train/test")))?;
        Ok(Scenario { train: parse_pose(train)?, test: parse_pose(test)? })
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let short = |p: Pose| match p {
            Pose::Aligned => "A",
            Pose::PoseAgnostic => "PA",
        };
        write!(f, "{}/{}", short(self.train), short(self.test))
    }
}

impl Serialize for Scenario {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for Scenario {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let raw = String::deserialize(d)?;
        raw.parse().map_err(serde::de::Error::custom)
    }
}

/// Whether a pose-agnostic training sample keeps one rotation for the whole
/// run or draws a fresh one every epoch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum PoseTrainMode {
    #[default]
    Fixed,
    Fresh,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PoseCfg {
    pub train_mode: PoseTrainMode,
}

impl Default for PoseCfg {
    fn default() -> Self {
        PoseCfg { train_mode: PoseTrainMode::Fixed }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerCfg {
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub epochs: usize,
}

impl Default for OptimizerCfg {
    fn default() -> Self {
        OptimizerCfg { learning_rate: 0.01, momentum: 0.9, batch_size: 16, epochs: 30 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MemoryCfg {
    /// Total exemplar budget; 0 disables rehearsal entirely.
    #[serde(rename = "M")]
    pub budget: usize,
}

impl Default for MemoryCfg {
    fn default() -> Self {
        MemoryCfg { budget: 80 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskCfg {
    pub classes_per_task: usize,
}

impl Default for TaskCfg {
    fn default() -> Self {
        TaskCfg { classes_per_task: 2 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricsCfg {
    pub forgetting: ForgettingVariant,
    /// Evaluate seen-class accuracy after every epoch (off saves eval time).
    pub epoch_eval: bool,
}

impl Default for MetricsCfg {
    fn default() -> Self {
        MetricsCfg { forgetting: ForgettingVariant::FirstTask, epoch_eval: true }
    }
}

/// The full experiment configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: DatasetSpec,
    pub model: ModelCfg,
    pub loss: LossHyperparams,
    pub optimizer: OptimizerCfg,
    pub scenario: Scenario,
    pub pose: PoseCfg,
    pub tasks: TaskCfg,
    pub memory: MemoryCfg,
    pub metrics: MetricsCfg,
    pub seed: u64,
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), ProtocolError> {
        if self.tasks.classes_per_task == 0 {
            return Err(ProtocolError::BadConfig("tasks.classes_per_task must be ≥ 1".into()));
        }
        if self.optimizer.batch_size == 0 || self.optimizer.epochs == 0 {
            return Err(ProtocolError::BadConfig(
                "optimizer.batch_size and optimizer.epochs must be ≥ 1".into(),
            ));
        }
        if !(self.optimizer.learning_rate > 0.0 && self.optimizer.learning_rate.is_finite()) {
            return Err(ProtocolError::BadConfig("optimizer.learning_rate must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.optimizer.momentum) {
            return Err(ProtocolError::BadConfig("optimizer.momentum must lie in [0,1)".into()));
        }
        self.loss.validate().map_err(|e| ProtocolError::BadConfig(e.to_string()))?;
        Ok(())
    }
}

/// Ordered disjoint class sets. `tasks[k]` holds dataset class indices;
/// `slot[class]` is the classifier column that class occupies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskStream {
    pub tasks: Vec<Vec<usize>>,
    slot: Vec<usize>,
}

impl TaskStream {
    pub fn num_tasks(&self) -> usize {
        self.tasks.len()
    }

    pub fn slot(&self, class: usize) -> usize {
        self.slot[class]
    }

    /// Classifier width after finishing task k (0-based).
    pub fn classes_after(&self, k: usize) -> usize {
        self.tasks[..=k].iter().map(|t| t.len()).sum()
    }
}

/// Deterministic class-to-task assignment: seeded shuffle of the class list,
/// chunked; the last task may be smaller.
pub fn make_task_stream(
    num_classes: usize,
    classes_per_task: usize,
    seed: u64,
) -> Result<TaskStream, ProtocolError> {
    if classes_per_task == 0 {
        return Err(ProtocolError::BadConfig("classes_per_task must be ≥ 1".into()));
    }
    if num_classes == 0 {
        return Err(ProtocolError::BadConfig("no classes to stream".into()));
    }
    let mut order: Vec<usize> = (0..num_classes).collect();
    let mut rng = stream(seed, "task-order", &[]);
    order.shuffle(&mut rng);
    let tasks: Vec<Vec<usize>> =
        order.chunks(classes_per_task).map(|c| c.to_vec()).collect();
    let mut slot = vec![0usize; num_classes];
    for (s, &class) in order.iter().enumerate() {
        slot[class] = s;
    }
    Ok(TaskStream { tasks, slot })
}

/// A sample as the model sees it: points (already posed), its neighborhood
/// graph, and the classifier slot of its label.
struct Presented<R: Real> {
    points: Vec<Vec3<R>>,
    nbhd: Vec<Vec<usize>>,
    slot: usize,
}

fn present<R: Real>(
    cloud: &PointCloud<R>,
    slot: usize,
    knn: usize,
    pose: Pose,
    rng: &mut ChaCha12Rng,
    rotations: &mut u64,
) -> Presented<R> {
    let points = match pose {
        Pose::Aligned => cloud.points.clone(),
        Pose::PoseAgnostic => {
            *rotations += 1;
            let rot = random_rotation::<R, _>(rng);
            rotate_cloud(&rot, cloud).points
        }
    };
    let nbhd = knn_neighborhoods(&points, knn);
    Presented { points, nbhd, slot }
}

/// Accuracy of the final head's argmax over a labeled set, posing each
/// sample per `pose` with rotations drawn from `rng` in sample order.
/// Returns the accuracy and the number of rotations applied.
pub fn evaluate<R: Real>(
    model: &Model<R>,
    samples: &[(&PointCloud<R>, usize)],
    pose: Pose,
    rng: &mut ChaCha12Rng,
) -> Result<(f64, u64), ProtocolError> {
    if samples.is_empty() {
        return Err(ProtocolError::EmptyEvaluation);
    }
    let mut rotations = 0u64;
    let mut correct = 0usize;
    for &(cloud, slot) in samples {
        let p = present(cloud, slot, model.knn, pose, rng, &mut rotations);
        let out = model.forward(&p.points, &p.nbhd)?;
        if argmax(out.final_logits()) == slot {
            correct += 1;
        }
    }
    Ok((correct as f64 / samples.len() as f64, rotations))
}

fn argmax<R: Real>(xs: &[R]) -> usize {
    let mut best = 0usize;
    for (i, &x) in xs.iter().enumerate().skip(1) {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Everything a finished run hands back.
pub struct RunOutcome<R: Real> {
    pub metrics: MetricsTable,
    pub model: Model<R>,
    /// Rotations applied anywhere in the run; 0 in the A/A scenario.
    pub rotations_applied: u64,
    pub exemplars_stored: usize,
}

/// Runs the full class-incremental protocol.
pub fn run_continual<R: Real>(config: &RunConfig) -> Result<RunOutcome<R>, ProtocolError> {
    run_continual_with(config, |_, _| Ok(()))
}

/// Like [`run_continual`], invoking `after_task(task index, model)` once per
/// finished task (checkpoint hooks and the like).
pub fn run_continual_with<R, F>(config: &RunConfig, mut after_task: F) -> Result<RunOutcome<R>, ProtocolError>
where
    R: Real,
    F: FnMut(usize, &Model<R>) -> Result<(), ProtocolError>,
{
    config.validate()?;
    let data: Dataset<R> = build_dataset(&config.dataset)?.convert();
    let train: Vec<PointCloud<R>> =
        data.train.iter().map(normalize).collect::<Result<_, _>>()?;
    let test: Vec<PointCloud<R>> = data.test.iter().map(normalize).collect::<Result<_, _>>()?;
    let stream_plan = make_task_stream(data.classes.len(), config.tasks.classes_per_task, config.seed)?;

    let mut driver = Driver {
        config,
        stream_plan: &stream_plan,
        train: &train,
        test: &test,
        rotations: 0,
        store: (config.memory.budget > 0).then(|| ExemplarStore::new(config.memory.budget)),
    };
    driver.run(&mut after_task)
}

struct Driver<'a, R: Real> {
    config: &'a RunConfig,
    stream_plan: &'a TaskStream,
    train: &'a [PointCloud<R>],
    test: &'a [PointCloud<R>],
    rotations: u64,
    store: Option<ExemplarStore<R>>,
}

impl<'a, R: Real> Driver<'a, R> {
    fn seed(&self) -> u64 {
        self.config.seed
    }

    /// Train samples of one dataset class, slot-labeled.
    fn class_train(&self, class: usize) -> Vec<(&'a PointCloud<R>, usize)> {
        let slot = self.stream_plan.slot(class);
        self.train.iter().filter(|c| c.label == class).map(|c| (c, slot)).collect()
    }

    fn seen_test(&self, up_to_task: usize) -> Vec<(&'a PointCloud<R>, usize)> {
        let mut out = Vec::new();
        for task in &self.stream_plan.tasks[..=up_to_task] {
            for &class in task {
                let slot = self.stream_plan.slot(class);
                out.extend(self.test.iter().filter(|c| c.label == class).map(|c| (c, slot)));
            }
        }
        out
    }

    fn task_test(&self, task: usize) -> Vec<(&'a PointCloud<R>, usize)> {
        let mut out = Vec::new();
        for &class in &self.stream_plan.tasks[task] {
            let slot = self.stream_plan.slot(class);
            out.extend(self.test.iter().filter(|c| c.label == class).map(|c| (c, slot)));
        }
        out
    }

    fn run<F>(&mut self, after_task: &mut F) -> Result<RunOutcome<R>, ProtocolError>
    where
        F: FnMut(usize, &Model<R>) -> Result<(), ProtocolError>,
    {
        let cfg = self.config;
        let n_tasks = self.stream_plan.num_tasks();
        let mut model: Model<R> =
            Model::init(&cfg.model, self.stream_plan.classes_after(0), self.seed())?;
        let mut teacher: Option<Model<R>> = None;
        let mut epochs_log = Vec::new();
        let mut seen_acc = Vec::with_capacity(n_tasks);
        let mut task_acc: Vec<Vec<f64>> = Vec::with_capacity(n_tasks);

        for k in 0..n_tasks {
            if k > 0 {
                teacher = Some(model.clone());
                let mut rng = stream(self.seed(), "expand", &[k as u64]);
                model = model.expand_classifier(self.stream_plan.classes_after(k), &mut rng)?;
            }
            self.train_task(k, &mut model, teacher.as_ref(), &mut epochs_log)?;
            self.update_memory(k, &model)?;
            after_task(k, &model)?;

            // Evaluation over every seen task under the test pose.
            let mut row = Vec::with_capacity(k + 1);
            for i in 0..=k {
                let set = self.task_test(i);
                let mut rng = stream(self.seed(), "eval-task", &[k as u64, i as u64]);
                let (acc, rots) = evaluate(&model, &set, cfg.scenario.test, &mut rng)?;
                self.rotations += rots;
                row.push(acc);
            }
            let seen = self.seen_test(k);
            let mut rng = stream(self.seed(), "eval-seen", &[k as u64]);
            let (acc, rots) = evaluate(&model, &seen, cfg.scenario.test, &mut rng)?;
            self.rotations += rots;
            seen_acc.push(acc);
            task_acc.push(row);
        }

        Ok(RunOutcome {
            metrics: MetricsTable::finish(seen_acc, task_acc, epochs_log, cfg.metrics.forgetting),
            model,
            rotations_applied: self.rotations,
            exemplars_stored: self.store.as_ref().map_or(0, |s| s.total_len()),
        })
    }

    /// One task's training epochs. Teacher outputs and neighborhood graphs
    /// are computed once per presentation pose; in fixed-pose mode that means
    /// once per task.
    fn train_task(
        &mut self,
        k: usize,
        model: &mut Model<R>,
        teacher: Option<&Model<R>>,
        log: &mut Vec<EpochRecord>,
    ) -> Result<(), ProtocolError> {
        let cfg = self.config;
        let opt = &cfg.optimizer;
        let kd = k as u64;

        // New-task pool, presented. Fixed mode poses each sample once here.
        let new_pool: Vec<(&PointCloud<R>, usize, u64)> = self
            .stream_plan
            .tasks[k]
            .iter()
            .flat_map(|&class| {
                self.class_train(class)
                    .into_iter()
                    .enumerate()
                    .map(move |(j, (c, slot))| (c, slot, crate::seeding::derive(0, "sample", &[class as u64, j as u64])))
            })
            .collect();
        let mut presented: Vec<Presented<R>> = Vec::new();
        let mut teacher_outs: Vec<Option<ModelOutputs<R>>> = Vec::new();
        let fixed = cfg.pose.train_mode == PoseTrainMode::Fixed;
        if fixed {
            for (cloud, slot, sid) in &new_pool {
                let mut rng = stream(self.seed(), "train-pose", &[kd, *sid]);
                let p = present(cloud, *slot, model.knn, cfg.scenario.train, &mut rng, &mut self.rotations);
                teacher_outs.push(match teacher {
                    Some(t) => Some(t.forward(&p.points, &p.nbhd)?),
                    None => None,
                });
                presented.push(p);
            }
        }

        // Exemplar pool: posed once per task, teacher outputs cached.
        let exemplars: Vec<(Presented<R>, ModelOutputs<R>)> = match (&self.store, teacher) {
            (Some(store), Some(t)) if !store.is_empty() => {
                let mut out = Vec::with_capacity(store.total_len());
                for class in store.class_ids().collect::<Vec<_>>() {
                    for (j, e) in store.class_samples(class).iter().enumerate() {
                        let mut rng =
                            stream(self.seed(), "exemplar-pose", &[kd, class as u64, j as u64]);
                        let slot = self.stream_plan.slot(class);
                        let p = present(
                            &e.cloud,
                            slot,
                            model.knn,
                            cfg.scenario.train,
                            &mut rng,
                            &mut self.rotations,
                        );
                        let touts = t.forward(&p.points, &p.nbhd)?;
                        out.push((p, touts));
                    }
                }
                out
            }
            _ => Vec::new(),
        };

        let mut velocity = GradientSet::zeros_like(model);
        let mut last_finite = 0.0f64;
        let n = new_pool.len();
        for epoch in 0..opt.epochs {
            let ed = epoch as u64;
            // Cosine decay within the task.
            let lr = opt.learning_rate
                * 0.5
                * (1.0 + (std::f64::consts::PI * epoch as f64 / opt.epochs as f64).cos());

            // Fresh mode re-poses the pool this epoch.
            if !fixed {
                presented.clear();
                teacher_outs.clear();
                for (cloud, slot, sid) in &new_pool {
                    let mut rng = stream(self.seed(), "train-pose", &[kd, ed, *sid]);
                    let p = present(cloud, *slot, model.knn, cfg.scenario.train, &mut rng, &mut self.rotations);
                    teacher_outs.push(match teacher {
                        Some(t) => Some(t.forward(&p.points, &p.nbhd)?),
                        None => None,
                    });
                    presented.push(p);
                }
            }

            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(&mut stream(self.seed(), "shuffle", &[kd, ed]));

            let mut sums = EpochSums::default();
            for (step, batch_ids) in order.chunks(opt.batch_size).enumerate() {
                let total = self.train_step(
                    model,
                    teacher,
                    &presented,
                    &teacher_outs,
                    batch_ids,
                    &exemplars,
                    lr,
                    (kd, ed, step as u64),
                    &mut velocity,
                    &mut sums,
                )?;
                if !total.is_finite() {
                    return Err(ProtocolError::NonFiniteLoss {
                        task: k,
                        epoch,
                        step,
                        last_finite,
                    });
                }
                last_finite = total;
            }

            let acc_seen = if cfg.metrics.epoch_eval {
                let seen = self.seen_test(k);
                let mut rng = stream(self.seed(), "eval-epoch", &[kd, ed]);
                let (acc, rots) = evaluate(model, &seen, cfg.scenario.test, &mut rng)?;
                self.rotations += rots;
                Some(acc)
            } else {
                None
            };
            log.push(sums.record(k, epoch, acc_seen));
        }
        Ok(())
    }

    /// One optimizer step over a new-task mini-batch plus (when the store is
    /// non-empty) one exemplar mini-batch. Returns the step's total loss.
    #[allow(clippy::too_many_arguments)]
    fn train_step(
        &mut self,
        model: &mut Model<R>,
        teacher: Option<&Model<R>>,
        presented: &[Presented<R>],
        teacher_outs: &[Option<ModelOutputs<R>>],
        batch_ids: &[usize],
        exemplars: &[(Presented<R>, ModelOutputs<R>)],
        lr: f64,
        at: (u64, u64, u64),
        velocity: &mut GradientSet<R>,
        sums: &mut EpochSums,
    ) -> Result<f64, ProtocolError> {
        let cfg = self.config;
        let hp = &cfg.loss;
        let mut grads = GradientSet::zeros_like(model);

        let mut outs = Vec::with_capacity(batch_ids.len());
        let mut traces = Vec::with_capacity(batch_ids.len());
        let mut labels = Vec::with_capacity(batch_ids.len());
        let mut teach_batch = Vec::with_capacity(batch_ids.len());
        for &i in batch_ids {
            let p = &presented[i];
            let (o, tr) = model.forward_traced(&p.points, &p.nbhd)?;
            outs.push(o);
            traces.push(tr);
            labels.push(p.slot);
            if let Some(t) = &teacher_outs[i] {
                teach_batch.push(t.clone());
            }
        }
        let teach = if teach_batch.len() == outs.len() { Some(teach_batch.as_slice()) } else { None };
        let (breakdown, ups) = task_loss_grads(&outs, teach, &labels, hp)?;
        for (tr, up) in traces.iter().zip(&ups) {
            accumulate_gradients(model, tr, up, &mut grads);
        }

        // Exemplar mini-batch: uniform draws with replacement.
        let mut ex_total = 0.0f64;
        if !exemplars.is_empty() && teacher.is_some() {
            let mut pick = stream(self.seed(), "exemplar-pick", &[at.0, at.1, at.2]);
            let ids: Vec<usize> = (0..cfg.optimizer.batch_size.min(exemplars.len()))
                .map(|_| pick.random_range(0..exemplars.len()))
                .collect();
            let mut ex_outs = Vec::with_capacity(ids.len());
            let mut ex_traces = Vec::with_capacity(ids.len());
            let mut ex_labels = Vec::with_capacity(ids.len());
            let mut ex_teach = Vec::with_capacity(ids.len());
            for &i in &ids {
                let (p, t) = &exemplars[i];
                let (o, tr) = model.forward_traced(&p.points, &p.nbhd)?;
                ex_outs.push(o);
                ex_traces.push(tr);
                ex_labels.push(p.slot);
                ex_teach.push(t.clone());
            }
            let ((ce, kl), ex_ups) =
                exemplar_loss_grads(&ex_outs, Some(&ex_teach), &ex_labels, hp)?;
            for (tr, up) in ex_traces.iter().zip(&ex_ups) {
                accumulate_gradients(model, tr, up, &mut grads);
            }
            ex_total = (ce + kl).as_f64();
            sums.exemplar += ex_total;
        }

        // Momentum step: v ← m·v − lr·g; θ ← θ + v.
        velocity.scale(R::from_f64(cfg.optimizer.momentum));
        velocity.axpy(R::from_f64(-lr), &grads);
        for (theta, v) in model.param_slices_mut().into_iter().zip(velocity.param_slices()) {
            for (t, dv) in theta.iter_mut().zip(v) {
                *t += *dv;
            }
        }

        sums.add_breakdown(&breakdown);
        sums.steps += 1;
        Ok(breakdown.total.as_f64() + ex_total)
    }

    /// End-of-task memory update: the new classes' train samples become
    /// candidates, old classes re-rank under the current model. Features are
    /// the final head's pre-logit vector on the aligned sample.
    fn update_memory(&mut self, k: usize, model: &Model<R>) -> Result<(), ProtocolError> {
        let Some(store) = &mut self.store else {
            return Ok(());
        };
        let mut new_classes: BTreeMap<usize, Vec<PointCloud<R>>> = BTreeMap::new();
        for &class in &self.stream_plan.tasks[k] {
            let pool: Vec<PointCloud<R>> = self
                .train
                .iter()
                .filter(|c| c.label == class)
                .cloned()
                .collect();
            new_classes.insert(class, pool);
        }
        let seen = self.stream_plan.classes_after(k);
        store.update(&new_classes, seen, |cloud| {
            model.forward_cloud(cloud).map(|o| o.final_feat().to_vec())
        })?;
        Ok(())
    }
}

#[derive(Default)]
struct EpochSums {
    steps: usize,
    l1: f64,
    l2: f64,
    l3: f64,
    l4: f64,
    exemplar: f64,
    total: f64,
}

impl EpochSums {
    fn add_breakdown<R: Real>(&mut self, b: &LossBreakdown<R>) {
        let [s1, s2, s3, s4] = b.source_sums();
        self.l1 += s1.as_f64();
        self.l2 += s2.as_f64();
        self.l3 += s3.as_f64();
        self.l4 += s4.as_f64();
        self.total += b.total.as_f64();
    }

    fn record(&self, task: usize, epoch: usize, acc_seen: Option<f64>) -> EpochRecord {
        let n = self.steps.max(1) as f64;
        EpochRecord {
            task,
            epoch,
            loss_total: (self.total + self.exemplar) / n,
            loss1: self.l1 / n,
            loss2: self.l2 / n,
            loss3: self.l3 / n,
            loss4: self.l4 / n,
            loss_exemplar: self.exemplar / n,
            acc_seen,
        }
    }
}
