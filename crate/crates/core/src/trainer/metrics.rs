use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::model::MultiTaskModel;
use crate::tensor::Element;

pub const EPOCH_CSV_HEADER: &str =
    "# fewshot epoch metrics v1\nepoch,lr,loss_total,loss_sup,loss_rot,loss_byol,wall_time_s";
pub const STEP_CSV_HEADER: &str =
    "# fewshot step metrics v1\nepoch,step,lr,batch_size,views_per_image,loss_total,loss_sup,loss_rot,loss_byol,seconds";

/// Mean losses over one epoch's steps; inactive tasks are `None`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub loss_total: f64,
    pub loss_sup: Option<f64>,
    pub loss_rot: Option<f64>,
    pub loss_byol: Option<f64>,
    pub wall_time_s: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub epoch: usize,
    /// 1-based global step count after this step.
    pub step: u64,
    pub lr: f64,
    pub batch_size: usize,
    pub views_per_image: usize,
    pub loss_total: f64,
    pub loss_sup: Option<f64>,
    pub loss_rot: Option<f64>,
    pub loss_byol: Option<f64>,
    pub seconds: f64,
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:e}")).unwrap_or_default()
}

impl EpochRecord {
    /// Losses use Rust's shortest round-trip `{:e}` form; empty for inactive tasks.
    pub fn to_csv_row(&self) -> String {
        format!(
            "{},{:e},{:e},{},{},{},{:.6}",
            self.epoch,
            self.lr,
            self.loss_total,
            opt(self.loss_sup),
            opt(self.loss_rot),
            opt(self.loss_byol),
            self.wall_time_s
        )
    }
}

impl StepRecord {
    pub fn to_csv_row(&self) -> String {
        format!(
            "{},{},{:e},{},{},{:e},{},{},{},{:.6}",
            self.epoch,
            self.step,
            self.lr,
            self.batch_size,
            self.views_per_image,
            self.loss_total,
            opt(self.loss_sup),
            opt(self.loss_rot),
            opt(self.loss_byol),
            self.seconds
        )
    }
}

/// Receives training progress. Every hook defaults to doing nothing.
pub trait MetricsSink<E: Element> {
    fn on_step(&mut self, _record: &StepRecord) -> Result<()> {
        Ok(())
    }

    fn on_epoch(&mut self, _record: &EpochRecord, _model: &MultiTaskModel<E>) -> Result<()> {
        Ok(())
    }

    fn on_finish(&mut self, _model: &MultiTaskModel<E>) -> Result<()> {
        Ok(())
    }
}

pub struct NullSink;

impl<E: Element> MetricsSink<E> for NullSink {}

/// Keeps every record in memory.
#[derive(Default, Debug)]
pub struct MemorySink {
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
}

impl<E: Element> MetricsSink<E> for MemorySink {
    fn on_step(&mut self, record: &StepRecord) -> Result<()> {
        self.steps.push(record.clone());
        Ok(())
    }

    fn on_epoch(&mut self, record: &EpochRecord, _model: &MultiTaskModel<E>) -> Result<()> {
        self.epochs.push(record.clone());
        Ok(())
    }
}
