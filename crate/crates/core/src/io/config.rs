use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::augment::{AugmentKind, AugmentSpec};
use crate::error::{Error, Result};
use crate::eval::{BaseLearnerOptions, EpisodeSpec};
use crate::model::{HeadsConfig, ModelConfig, Pipelines};
use crate::nn::EncoderConfig;
use crate::trainer::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSection {
    /// Relative paths resolve against the config file's directory.
    pub manifest: PathBuf,
    #[serde(default = "default_train_split")]
    pub train_split: String,
    #[serde(default = "default_eval_split")]
    pub eval_split: String,
}

fn default_train_split() -> String {
    "train".into()
}

fn default_eval_split() -> String {
    "test".into()
}

/// Pipeline kind per task. The crop size defaults to the encoder input size.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentSection {
    pub supervised: AugmentKind,
    pub rotation: AugmentKind,
    pub byol: AugmentKind,
    #[serde(default)]
    pub crop_size: Option<usize>,
    #[serde(default = "default_padding")]
    pub crop_padding: usize,
}

fn default_padding() -> usize {
    4
}

impl Default for AugmentSection {
    fn default() -> Self {
        Self {
            supervised: AugmentKind::Default,
            rotation: AugmentKind::Default,
            byol: AugmentKind::Hard,
            crop_size: None,
            crop_padding: default_padding(),
        }
    }
}

impl AugmentSection {
    pub fn pipelines(&self, input_size: usize) -> Result<Pipelines> {
        let size = self.crop_size.unwrap_or(input_size);
        if size != input_size {
            return Err(Error::Config(format!(
                "crop_size {size} differs from encoder input_size {input_size}"
            )));
        }
        let spec = |k| AugmentSpec::for_kind(k, size, self.crop_padding);
        let p = Pipelines {
            supervised: spec(self.supervised),
            rotation: spec(self.rotation),
            byol: spec(self.byol),
        };
        for s in [&p.supervised, &p.rotation, &p.byol] {
            s.validate()?;
        }
        Ok(p)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSection {
    #[serde(flatten)]
    pub episodes: EpisodeSpec,
    #[serde(default)]
    pub base_learner: BaseLearnerOptions,
}

/// Everything needed to reproduce a training and evaluation run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub output_dir: PathBuf,
    pub dataset: DatasetSection,
    pub encoder: EncoderConfig,
    #[serde(default)]
    pub heads: HeadsConfig,
    pub train: TrainConfig,
    pub eval: EvalSection,
    #[serde(default)]
    pub augment: AugmentSection,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    /// Parses `path` and resolves relative paths against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        let mut c = Self::from_toml(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        if c.dataset.manifest.is_relative() {
            c.dataset.manifest = base.join(&c.dataset.manifest);
        }
        Ok(c)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate().map_err(Error::Config)?;
        self.train.validate()?;
        self.eval.episodes.validate()?;
        self.augment.pipelines(self.encoder.input_size)?;
        self.model_config(2).validate()
    }

    pub fn model_config(&self, num_classes: usize) -> ModelConfig {
        ModelConfig {
            encoder: self.encoder.clone(),
            heads: self.heads.clone(),
            num_classes,
            tau: self.train.tau,
        }
    }

    pub fn pipelines(&self) -> Result<Pipelines> {
        self.augment.pipelines(self.encoder.input_size)
    }
}
