use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::eval::Embeddings;
use crate::model::MultiTaskModel;
use crate::tensor::snapshot::{self, Entry};
use crate::tensor::Element;
use crate::trainer::{EpochRecord, MetricsSink, StepRecord, EPOCH_CSV_HEADER, STEP_CSV_HEADER};

pub const FINAL_CHECKPOINT: &str = "final.ckpt";

pub fn save_checkpoint<E: Element>(model: &MultiTaskModel<E>, path: &Path) -> Result<()> {
    Ok(snapshot::save(path, &model.state_entries())?)
}

pub fn load_checkpoint<E: Element>(model: &mut MultiTaskModel<E>, path: &Path) -> Result<()> {
    let entries =
        snapshot::load(path).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    model.load_state(&entries)
}

/// Writes `embeddings` as `[N, D]` and the labels as `[N]`.
pub fn export_embeddings(path: &Path, emb: &Embeddings) -> Result<()> {
    let n = emb.labels.len();
    let entries = [
        Entry::new(
            "embeddings",
            vec![n, emb.dim],
            emb.rows.iter().map(|&v| v as f32).collect(),
        ),
        Entry::new(
            "labels",
            vec![n],
            emb.labels.iter().map(|&l| l as f32).collect(),
        ),
    ];
    Ok(snapshot::save(path, &entries)?)
}

/// Streams metrics CSVs and checkpoints into one run directory.
pub struct RunWriter {
    dir: PathBuf,
    epochs: BufWriter<File>,
    steps: BufWriter<File>,
    checkpoint_every: usize,
}

impl RunWriter {
    /// Creates `dir` and writes `metrics.csv` and `steps.csv` headers.
    pub fn create(dir: &Path, checkpoint_every: usize) -> Result<Self> {
        fs::create_dir_all(dir)?;
        let mut epochs = BufWriter::new(File::create(dir.join("metrics.csv"))?);
        let mut steps = BufWriter::new(File::create(dir.join("steps.csv"))?);
        writeln!(epochs, "{EPOCH_CSV_HEADER}")?;
        writeln!(steps, "{STEP_CSV_HEADER}")?;
        Ok(Self {
            dir: dir.to_path_buf(),
            epochs,
            steps,
            checkpoint_every,
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }
}

impl<E: Element> MetricsSink<E> for RunWriter {
    fn on_step(&mut self, record: &StepRecord) -> Result<()> {
        writeln!(self.steps, "{}", record.to_csv_row())?;
        Ok(())
    }

    fn on_epoch(&mut self, record: &EpochRecord, model: &MultiTaskModel<E>) -> Result<()> {
        writeln!(self.epochs, "{}", record.to_csv_row())?;
        self.epochs.flush()?;
        self.steps.flush()?;
        let done = record.epoch + 1;
        if self.checkpoint_every > 0 && done.is_multiple_of(self.checkpoint_every) {
            save_checkpoint(model, &self.dir.join(format!("epoch{done:04}.ckpt")))?;
        }
        Ok(())
    }

    fn on_finish(&mut self, model: &MultiTaskModel<E>) -> Result<()> {
        self.epochs.flush()?;
        self.steps.flush()?;
        save_checkpoint(model, &self.dir.join(FINAL_CHECKPOINT))
    }
}
