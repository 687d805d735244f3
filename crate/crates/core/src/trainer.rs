//! Alternating two-step optimization and checkpoints.
//!
//! Step-A updates only the channel grouping under `ℓ_part`; step-B freezes the
//! grouping and updates everything else under `ℓ_part + ℓ_prob + ℓ_task`. By
//! default each epoch makes one shuffled step-A pass followed by one step-B pass.

use alloc::format;
use alloc::vec::Vec;

use rand::seq::SliceRandom;

use crate::adam::{adam_step, AdamState};
use crate::config::{DaPhase, Task, TrainConfig};
use crate::data::LabeledImageSet;
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::heads::{self, Domain, SemanticSet};
use crate::model::{LdvaModel, LossBreakdown, TaskTargets};
use crate::params::{Group, ParamSet};
use crate::rng::{self, Purpose};
use crate::tensor::Tensor;

pub const CHECKPOINT_VERSION: u32 = 1;

/// Groups stepped in step-B.
pub const STEP_B_GROUPS: [Group; 3] = [Group::Backbone, Group::Encoder, Group::Predictor];

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub version: u32,
    pub config: TrainConfig,
    pub output_dim: usize,
    /// Completed epochs.
    pub epoch: usize,
    pub params: ParamSet,
    pub adam: AdamState,
}

impl Checkpoint {
    pub fn model(&self) -> Result<LdvaModel> {
        LdvaModel::from_params(self.config.model(self.output_dim), self.params.clone())
    }
}

/// Training data per task. GZSL semantics cover the seen classes only.
#[derive(Debug, Clone, Copy)]
pub enum TrainData<'a> {
    Gzsl { train: &'a LabeledImageSet, semantics: &'a SemanticSet },
    Fsl { train: &'a LabeledImageSet },
    Da { source: &'a LabeledImageSet, target: Option<&'a LabeledImageSet> },
}

impl TrainData<'_> {
    pub fn task(&self) -> Task {
        match self {
            TrainData::Gzsl { .. } => Task::Gzsl,
            TrainData::Fsl { .. } => Task::Fsl,
            TrainData::Da { .. } => Task::Da,
        }
    }

    pub fn output_dim(&self) -> usize {
        match self {
            TrainData::Gzsl { semantics, .. } => semantics.dim(),
            TrainData::Fsl { train } => train.num_classes,
            TrainData::Da { source, target } => {
                source.num_classes.max(target.map_or(0, |t| t.num_classes))
            }
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct EpochMetrics {
    /// 1-based.
    pub epoch: usize,
    /// Mean `ℓ_part` seen by step-A, before each update.
    pub step_a_part: f64,
    /// Means of the step-B terms, before each update.
    pub losses: LossBreakdown,
    /// Fraction of labeled step-B samples predicted correctly (before update).
    pub train_acc: f64,
}

/// One sample of the epoch's pool: which set, and its index there.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Sample {
    target: bool,
    index: usize,
}

pub struct Trainer {
    pub config: TrainConfig,
    pub model: LdvaModel,
    pub adam: AdamState,
    /// Completed epochs.
    pub epoch: usize,
    output_dim: usize,
}

impl Trainer {
    pub fn new(config: TrainConfig, output_dim: usize) -> Result<Self> {
        config.validate()?;
        let model = LdvaModel::new(config.model(output_dim), config.seed)?;
        let adam = AdamState::new(config.lr_step_a);
        Ok(Self { config, model, adam, epoch: 0, output_dim })
    }

    /// Starts a new run from `init`'s parameters with fresh optimizer state.
    pub fn warm_start(config: TrainConfig, init: &Checkpoint) -> Result<Self> {
        config.validate()?;
        let model = LdvaModel::from_params(config.model(init.output_dim), init.params.clone())?;
        let adam = AdamState::new(config.lr_step_a);
        Ok(Self { config, model, adam, epoch: 0, output_dim: init.output_dim })
    }

    pub fn output_dim(&self) -> usize {
        self.output_dim
    }

    /// Snapshot with trainable flags and gradients cleared.
    pub fn checkpoint(&self) -> Checkpoint {
        let mut params = self.model.params.clone();
        params.set_trainable(&[]);
        params.clear_grads();
        Checkpoint {
            version: CHECKPOINT_VERSION,
            config: self.config.clone(),
            output_dim: self.output_dim,
            epoch: self.epoch,
            params,
            adam: self.adam.clone(),
        }
    }

    /// Step-A on one batch: returns `ℓ_part` before the update.
    pub fn step_a(&mut self, images: &Tensor) -> Result<f64> {
        let params = &mut self.model.params;
        params.set_trainable(&[Group::Grouping]);
        params.clear_grads();
        let mut g = Graph::new();
        let x = g.constant(images.clone())?;
        let loss = self.model.part_loss(&mut g, &self.model.params, x)?;
        let value = g.scalar(loss);
        g.backward_into(loss, &mut self.model.params)?;
        self.adam.lr = self.config.lr_step_a;
        adam_step(&mut self.model.params, &mut self.adam, &[Group::Grouping])?;
        Ok(value)
    }

    /// Step-B on one batch: returns the loss terms before the update and the
    /// number of labeled samples classified correctly.
    pub fn step_b(&mut self, images: &Tensor, targets: TaskTargets<'_>) -> Result<(LossBreakdown, usize)> {
        self.model.params.set_trainable(&STEP_B_GROUPS);
        self.model.params.clear_grads();
        let mut g = Graph::new();
        let x = g.constant(images.clone())?;
        let (fw, nodes) = self.model.objective(&mut g, &self.model.params, x, targets, self.config.loss_weights)?;
        let values = nodes.values(&g);
        let correct = count_correct(g.value(fw.output), targets);
        g.backward_into(nodes.total, &mut self.model.params)?;
        self.adam.lr = self.config.lr_step_b();
        adam_step(&mut self.model.params, &mut self.adam, &STEP_B_GROUPS)?;
        Ok((values, correct))
    }

    fn pool(&self, data: &TrainData<'_>) -> Result<Vec<Sample>> {
        let src = |set: &LabeledImageSet, target: bool| (0..set.len()).map(move |index| Sample { target, index });
        let pool: Vec<Sample> = match *data {
            TrainData::Gzsl { train, .. } | TrainData::Fsl { train } => src(train, false).collect(),
            TrainData::Da { source, target } => match self.config.da_phase {
                Some(DaPhase::JointPi) => {
                    let t = target.ok_or_else(|| Error::Config("joint_pi needs target-domain data".into()))?;
                    src(source, false).chain(src(t, true)).collect()
                }
                _ => src(source, false).collect(),
            },
        };
        if pool.is_empty() {
            return Err(Error::Invalid("training set is empty".into()));
        }
        Ok(pool)
    }

    /// One epoch over `data`.
    pub fn run_epoch(&mut self, data: &TrainData<'_>) -> Result<EpochMetrics> {
        if data.task() != self.config.task {
            return Err(Error::Config(format!(
                "data is for task {} but config is for {}",
                data.task().name(),
                self.config.task.name()
            )));
        }
        let seen = match data {
            TrainData::Gzsl { semantics, .. } => Some(semantics.normalized()),
            _ => None,
        };
        let seen_matrix = seen.as_ref().map(SemanticSet::matrix);
        let mut order = self.pool(data)?;
        let mut r = rng::stream(self.config.seed, Purpose::Shuffle, self.epoch as u64, 0);
        order.shuffle(&mut r);
        let batches: Vec<&[Sample]> = order.chunks(self.config.batch_size).collect();

        let mut acc = Accum::default();
        if self.config.interleave_per_batch {
            for b in &batches {
                let (images, prep) = prepare(data, b, seen.as_ref())?;
                acc.part_a += self.step_a(&images)? * b.len() as f64;
                acc.add_b(self.step_b_prepared(&images, &prep, seen_matrix.as_ref())?, b.len(), prep.labeled);
            }
        } else {
            for b in &batches {
                let (images, _) = prepare(data, b, seen.as_ref())?;
                acc.part_a += self.step_a(&images)? * b.len() as f64;
            }
            for b in &batches {
                let (images, prep) = prepare(data, b, seen.as_ref())?;
                acc.add_b(self.step_b_prepared(&images, &prep, seen_matrix.as_ref())?, b.len(), prep.labeled);
            }
        }
        self.epoch += 1;
        Ok(acc.finish(self.epoch, order.len()))
    }

    fn step_b_prepared(&mut self, images: &Tensor, prep: &Prepared, seen: Option<&Tensor>) -> Result<(LossBreakdown, usize)> {
        let targets = match self.config.task {
            Task::Gzsl => TaskTargets::Gzsl {
                rows: &prep.rows,
                semantics: seen.ok_or_else(|| Error::Invalid("gzsl needs semantics".into()))?,
                eta: self.config.eta,
            },
            Task::Fsl => TaskTargets::Fsl { labels: &prep.rows },
            Task::Da => TaskTargets::Da { domains: &prep.domains, labels: &prep.labels },
        };
        self.step_b(images, targets)
    }
}

#[derive(Default)]
struct Accum {
    part_a: f64,
    b: LossBreakdown,
    correct: usize,
    labeled: usize,
}

impl Accum {
    fn add_b(&mut self, (l, correct): (LossBreakdown, usize), n: usize, labeled: usize) {
        let w = n as f64;
        self.b.part += l.part * w;
        self.b.prob += l.prob * w;
        self.b.task += l.task * w;
        self.b.total += l.total * w;
        self.correct += correct;
        self.labeled += labeled;
    }

    fn finish(self, epoch: usize, n: usize) -> EpochMetrics {
        let n = n as f64;
        EpochMetrics {
            epoch,
            step_a_part: self.part_a / n,
            losses: LossBreakdown {
                part: self.b.part / n,
                prob: self.b.prob / n,
                task: self.b.task / n,
                total: self.b.total / n,
            },
            train_acc: if self.labeled == 0 { 0.0 } else { self.correct as f64 / self.labeled as f64 },
        }
    }
}

/// Per-batch supervision in the form the losses take.
struct Prepared {
    /// GZSL: row in the seen semantics; FSL: label.
    rows: Vec<usize>,
    domains: Vec<Domain>,
    labels: Vec<Option<usize>>,
    labeled: usize,
}

fn prepare(data: &TrainData<'_>, batch: &[Sample], seen: Option<&SemanticSet>) -> Result<(Tensor, Prepared)> {
    let mut pixels = Vec::new();
    let mut shape = (0, 0);
    let mut prep = Prepared { rows: Vec::new(), domains: Vec::new(), labels: Vec::new(), labeled: 0 };
    for s in batch {
        let set = match (*data, s.target) {
            (TrainData::Gzsl { train, .. }, _) | (TrainData::Fsl { train }, _) => train,
            (TrainData::Da { source, .. }, false) => source,
            (TrainData::Da { target, .. }, true) => target.expect("pool only holds target samples when present"),
        };
        shape = (set.rows, set.cols);
        pixels.extend_from_slice(set.image(s.index));
        let label = set.labels[s.index];
        match *data {
            TrainData::Gzsl { .. } => {
                let row = seen
                    .and_then(|sem| sem.index_of(label))
                    .ok_or_else(|| Error::Data(format!("training class {label} has no semantic vector")))?;
                prep.rows.push(row);
                prep.labeled += 1;
            }
            TrainData::Fsl { .. } => {
                prep.rows.push(label);
                prep.labeled += 1;
            }
            TrainData::Da { .. } => {
                if s.target {
                    prep.domains.push(Domain::Target);
                    prep.labels.push(None);
                } else {
                    prep.domains.push(Domain::Source);
                    prep.labels.push(Some(label));
                    prep.labeled += 1;
                }
            }
        }
    }
    let images = Tensor::new(&[batch.len(), 1, shape.0, shape.1], pixels)?;
    Ok((images, prep))
}

fn count_correct(out: &Tensor, targets: TaskTargets<'_>) -> usize {
    let d = out.shape()[1];
    let rows = out.data().chunks(d);
    match targets {
        TaskTargets::Gzsl { rows: truth, semantics, .. } => {
            let s = semantics.shape()[1];
            rows.zip(truth)
                .filter(|(v, &t)| {
                    let scores: Vec<f64> =
                        semantics.data().chunks(s).map(|sig| sig.iter().zip(v.iter()).map(|(a, b)| a * b).sum()).collect();
                    heads::pseudo_label(&scores) == t
                })
                .count()
        }
        TaskTargets::Fsl { labels } => rows.zip(labels).filter(|(v, &t)| heads::pseudo_label(v) == t).count(),
        TaskTargets::Da { labels, .. } => {
            rows.zip(labels).filter(|(v, t)| **t == Some(heads::pseudo_label(v))).count()
        }
    }
}

/// Runs `config.epochs` epochs. The DA joint-π phase must start from `init`
/// (a source-π checkpoint); other runs start from a seeded initialization.
/// `on_epoch` sees each epoch's metrics as they are produced.
pub fn train(
    config: &TrainConfig,
    data: &TrainData<'_>,
    init: Option<&Checkpoint>,
    mut on_epoch: impl FnMut(&EpochMetrics),
) -> Result<(Checkpoint, Vec<EpochMetrics>)> {
    config.validate()?;
    if data.task() != config.task {
        return Err(Error::Config(format!(
            "data is for task {} but config is for {}",
            data.task().name(),
            config.task.name()
        )));
    }
    let mut trainer = match (config.da_phase, init) {
        (Some(DaPhase::JointPi), None) => {
            return Err(Error::Config("joint_pi phase needs a source_pi checkpoint to start from".into()))
        }
        (Some(DaPhase::JointPi), Some(ck)) => {
            if ck.config.task != Task::Da || ck.config.da_phase != Some(DaPhase::SourcePi) {
                return Err(Error::Config("joint_pi must start from a da source_pi checkpoint".into()));
            }
            Trainer::warm_start(config.clone(), ck)?
        }
        (_, Some(ck)) => Trainer::warm_start(config.clone(), ck)?,
        (_, None) => Trainer::new(config.clone(), data.output_dim())?,
    };
    if trainer.output_dim() != data.output_dim() {
        return Err(Error::Config(format!(
            "checkpoint predicts {} outputs but the data needs {}",
            trainer.output_dim(),
            data.output_dim()
        )));
    }
    let mut metrics = Vec::with_capacity(config.epochs);
    for _ in 0..config.epochs {
        let m = trainer.run_epoch(data)?;
        on_epoch(&m);
        metrics.push(m);
    }
    Ok((trainer.checkpoint(), metrics))
}
