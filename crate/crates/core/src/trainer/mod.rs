//! Merged meta-training: SGD with momentum, multi-step schedule, EMA target.

mod metrics;

use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::model::{total_loss, MultiTaskModel, Pipelines, TaskSet, TaskWeights, ViewPolicy};
use crate::rng::{stream, stream_rng};
use crate::tensor::{Element, Parameter};

pub use metrics::{
    EpochRecord, MemorySink, MetricsSink, NullSink, StepRecord, EPOCH_CSV_HEADER, STEP_CSV_HEADER,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// 0-based epochs at whose start the learning rate is multiplied by
    /// `decay_factor`; entries at or past `epochs` never fire.
    pub decay_epochs: Vec<usize>,
    pub decay_factor: f64,
    pub tau: f64,
    pub active_tasks: TaskSet,
    pub view_policy: ViewPolicy,
    pub seed: u64,
    #[serde(default)]
    pub task_weights: TaskWeights,
    /// Write a checkpoint every this many epochs (0 disables periodic checkpoints).
    #[serde(default)]
    pub checkpoint_every: usize,
}

impl TrainConfig {
    /// Long schedule: 90 epochs, decays at 45, 60 and 75.
    pub fn preset_supervised() -> Self {
        Self {
            epochs: 90,
            batch_size: 128,
            lr: 0.05,
            momentum: 0.9,
            weight_decay: 5e-4,
            decay_epochs: vec![45, 60, 75],
            decay_factor: 0.1,
            tau: 0.99,
            active_tasks: TaskSet::SUPERVISED,
            view_policy: ViewPolicy::Separate,
            seed: 0,
            task_weights: TaskWeights::default(),
            checkpoint_every: 0,
        }
    }

    /// Schedule for runs with the BYOL task: decays at 60 and 80.
    pub fn preset_byol() -> Self {
        Self {
            decay_epochs: vec![60, 80],
            active_tasks: "sup,byol".parse().expect("valid task list"),
            view_policy: ViewPolicy::Shared,
            ..Self::preset_supervised()
        }
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "supervised" => Some(Self::preset_supervised()),
            "byol" => Some(Self::preset_byol()),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.epochs == 0 {
            return bad("epochs must be positive".into());
        }
        if self.batch_size < 2 {
            return bad(format!("batch_size {} < 2", self.batch_size));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr {} must be positive", self.lr));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum {} outside [0, 1)", self.momentum));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad(format!(
                "weight_decay {} must be non-negative",
                self.weight_decay
            ));
        }
        if !(self.decay_factor > 0.0 && self.decay_factor <= 1.0) {
            return bad(format!("decay_factor {} outside (0, 1]", self.decay_factor));
        }
        if self.decay_epochs.windows(2).any(|w| w[0] >= w[1]) {
            return bad(format!(
                "decay_epochs {:?} not strictly increasing",
                self.decay_epochs
            ));
        }
        if !(0.0..1.0).contains(&self.tau) {
            return bad(format!("tau {} outside [0, 1)", self.tau));
        }
        if self.active_tasks.is_empty() {
            return bad("no active tasks".into());
        }
        let w = &self.task_weights;
        if [w.supervised, w.rotation, w.byol]
            .iter()
            .any(|x| !x.is_finite() || *x < 0.0)
        {
            return bad("task weights must be finite and non-negative".into());
        }
        Ok(())
    }

    /// `lr0 * decay_factor ^ (number of decay epochs <= epoch)`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let passed = self.decay_epochs.iter().filter(|&&d| d <= epoch).count();
        (0..passed).fold(self.lr, |lr, _| lr * self.decay_factor)
    }

    pub fn steps_per_epoch(&self, n: usize) -> usize {
        n.div_ceil(self.batch_size)
    }
}

/// Loss values at the step where training was aborted.
#[derive(Clone, Debug, PartialEq, thiserror::Error)]
#[error("non-finite loss at epoch {epoch}, step {step}: total={total} supervised={supervised:?} rotation={rotation:?} byol={byol:?}")]
pub struct NonFiniteLoss {
    pub epoch: usize,
    pub step: u64,
    pub total: f64,
    pub supervised: Option<f64>,
    pub rotation: Option<f64>,
    pub byol: Option<f64>,
}

/// SGD with momentum and decoupled-from-bias weight decay.
#[derive(Clone, Debug, PartialEq)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub velocity: Vec<Vec<f64>>,
    pub steps: u64,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            momentum,
            weight_decay,
            velocity: Vec::new(),
            steps: 0,
        }
    }

    /// `v <- m v + (g + wd p)`, `p <- p - lr v`, then zero the gradients.
    /// Weight decay applies only to parameters flagged `decay`. The same
    /// parameter list, in the same order, must be passed every call.
    pub fn step<E: Element>(&mut self, params: &[&Parameter<E>]) -> Result<()> {
        if self.velocity.is_empty() {
            self.velocity = params.iter().map(|p| vec![0.0; p.value.numel()]).collect();
        }
        if self.velocity.len() != params.len() {
            return Err(Error::Config(format!(
                "optimizer tracks {} parameters, got {}",
                self.velocity.len(),
                params.len()
            )));
        }
        for (p, v) in params.iter().zip(&self.velocity) {
            if p.value.grad().is_none() {
                return Err(Error::Config(format!(
                    "parameter `{}` has no gradient",
                    p.name
                )));
            }
            if v.len() != p.value.numel() {
                return Err(Error::Config(format!(
                    "velocity shape mismatch for `{}`",
                    p.name
                )));
            }
        }
        for (p, v) in params.iter().zip(self.velocity.iter_mut()) {
            let grad = p.value.grad().expect("checked above");
            let wd = if p.decay { self.weight_decay } else { 0.0 };
            let mut data = p.value.data_mut();
            for ((x, vi), g) in data.iter_mut().zip(v.iter_mut()).zip(grad.iter()) {
                let xf = x.to_f64_lossy();
                *vi = self.momentum * *vi + (g.to_f64_lossy() + wd * xf);
                *x = E::from_f64_lossy(xf - self.lr * *vi);
            }
            drop(data);
            p.value.zero_grad();
        }
        self.steps += 1;
        Ok(())
    }
}

/// Loss values of one optimization step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepOutcome {
    /// `(total, supervised, rotation, byol)`.
    pub losses: (f64, Option<f64>, Option<f64>, Option<f64>),
    pub views_per_image: usize,
}

/// One step on the dataset rows `batch`: views, losses, backward, SGD, EMA.
///
/// Aborts with [`NonFiniteLoss`] before any parameter changes.
pub fn train_step<E: Element>(
    config: &TrainConfig,
    pipes: &Pipelines,
    data: &LabeledDataset,
    model: &mut MultiTaskModel<E>,
    sgd: &mut Sgd,
    batch: &[usize],
    epoch: usize,
) -> Result<StepOutcome> {
    let tasks = config.active_tasks;
    let images: Vec<_> = batch.iter().map(|&i| data.image(i)).collect();
    let labels: Vec<usize> = batch.iter().map(|&i| data.labels[i]).collect();
    let ids: Vec<u64> = batch.iter().map(|&i| i as u64).collect();
    let (losses, views) = total_loss(
        model,
        &images,
        &labels,
        &ids,
        tasks,
        config.view_policy,
        pipes,
        &config.task_weights,
        config.seed,
        epoch as u64,
    )?;
    let (total, sup, rot, byol) = losses.values();
    if !total.is_finite() {
        return Err(Box::new(NonFiniteLoss {
            epoch,
            step: model.step,
            total,
            supervised: sup,
            rotation: rot,
            byol,
        })
        .into());
    }
    losses.total.backward()?;
    drop(losses);
    sgd.step(&model.trainable_parameters(tasks))?;
    if tasks.byol {
        model.ema_update();
    }
    model.step += 1;
    Ok(StepOutcome {
        losses: (total, sup, rot, byol),
        views_per_image: views.views_per_image(),
    })
}

/// Per-run totals returned by [`train`].
#[derive(Clone, Debug, PartialEq)]
pub struct TrainSummary {
    pub epochs: Vec<EpochRecord>,
    pub steps: u64,
}

/// Trains `model` on `data` for `config.epochs` epochs.
///
/// Each epoch visits a seed-determined permutation in `ceil(N / batch)`
/// steps (the last batch may be short). Each step builds views, sums the
/// active losses, backpropagates, takes an SGD step on the online
/// parameters of the active tasks, then updates the target network when
/// BYOL is active.
pub fn train<E: Element>(
    config: &TrainConfig,
    pipes: &Pipelines,
    data: &LabeledDataset,
    model: &mut MultiTaskModel<E>,
    sink: &mut dyn MetricsSink<E>,
) -> Result<TrainSummary> {
    config.validate()?;
    if data.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    if data.num_classes() != model.config.num_classes {
        return Err(Error::Config(format!(
            "dataset has {} classes, classifier has {}",
            data.num_classes(),
            model.config.num_classes
        )));
    }
    model.set_tau(config.tau)?;
    let tasks = config.active_tasks;
    let mut sgd = Sgd::new(config.lr, config.momentum, config.weight_decay);
    let mut epochs = Vec::with_capacity(config.epochs);
    model.zero_grad();

    for epoch in 0..config.epochs {
        let start = Instant::now();
        sgd.lr = config.lr_at(epoch);
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut stream_rng(
            config.seed,
            &[stream::SHUFFLE, epoch as u64],
        ));
        let mut sums = [0.0f64; 4];
        let mut steps_in_epoch = 0usize;

        for chunk in order.chunks(config.batch_size) {
            let step_start = Instant::now();
            let out = train_step(config, pipes, data, model, &mut sgd, chunk, epoch)?;
            let (total, sup, rot, byol) = out.losses;

            for (s, v) in sums.iter_mut().zip([Some(total), sup, rot, byol]) {
                *s += v.unwrap_or(0.0);
            }
            steps_in_epoch += 1;
            sink.on_step(&StepRecord {
                epoch,
                step: model.step,
                lr: sgd.lr,
                batch_size: chunk.len(),
                views_per_image: out.views_per_image,
                loss_total: total,
                loss_sup: sup,
                loss_rot: rot,
                loss_byol: byol,
                seconds: step_start.elapsed().as_secs_f64(),
            })?;
        }

        let n = steps_in_epoch as f64;
        let mean = |on: bool, s: f64| on.then_some(s / n);
        let record = EpochRecord {
            epoch,
            lr: sgd.lr,
            loss_total: sums[0] / n,
            loss_sup: mean(tasks.supervised, sums[1]),
            loss_rot: mean(tasks.rotation, sums[2]),
            loss_byol: mean(tasks.byol, sums[3]),
            wall_time_s: start.elapsed().as_secs_f64(),
        };
        sink.on_epoch(&record, model)?;
        epochs.push(record);
    }
    sink.on_finish(model)?;
    Ok(TrainSummary {
        epochs,
        steps: model.step,
    })
}
