use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::MultiTaskModel;
use crate::augment::{
    apply_pipeline, rotate90, sample_rotation, stack, AugmentSpec, Image, RotationLabel,
};
use crate::error::{Error, Result};
use crate::nn::Mode;
use crate::rng::{stream, stream_rng};
use crate::tensor::{self, Element, Tensor};

/// Active subset of {supervised, rotation, byol}. Written as `sup,rot,byol`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct TaskSet {
    pub supervised: bool,
    pub rotation: bool,
    pub byol: bool,
}

impl TaskSet {
    pub const SUPERVISED: TaskSet = TaskSet {
        supervised: true,
        rotation: false,
        byol: false,
    };

    pub fn is_empty(self) -> bool {
        !(self.supervised || self.rotation || self.byol)
    }
}

impl FromStr for TaskSet {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut t = TaskSet::default();
        for tok in s.split(',').map(str::trim).filter(|t| !t.is_empty()) {
            match tok {
                "sup" | "supervised" => t.supervised = true,
                "rot" | "rotation" => t.rotation = true,
                "byol" => t.byol = true,
                other => {
                    return Err(Error::Config(format!(
                        "unknown task `{other}` (expected sup, rot, byol)"
                    )))
                }
            }
        }
        if t.is_empty() {
            return Err(Error::Config("at least one task must be active".into()));
        }
        Ok(t)
    }
}

impl TryFrom<String> for TaskSet {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<TaskSet> for String {
    fn from(t: TaskSet) -> String {
        t.to_string()
    }
}

impl fmt::Display for TaskSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let names: Vec<&str> = [
            (self.supervised, "sup"),
            (self.rotation, "rot"),
            (self.byol, "byol"),
        ]
        .into_iter()
        .filter_map(|(on, n)| on.then_some(n))
        .collect();
        f.write_str(&names.join(","))
    }
}

/// How augmented views are shared between tasks.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ViewPolicy {
    /// Every task augments the batch with its own pipeline.
    #[default]
    #[serde(alias = "separate_views")]
    Separate,
    /// Two views from the BYOL pipeline; the supervised loss uses the first.
    #[serde(alias = "shared_views")]
    Shared,
    /// Like `Shared`, but the supervised loss is averaged over both views.
    #[serde(alias = "two_view_supervised")]
    TwoView,
}

impl FromStr for ViewPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "separate" | "separate_views" => Ok(Self::Separate),
            "shared" | "shared_views" => Ok(Self::Shared),
            "two_view" | "two_view_supervised" => Ok(Self::TwoView),
            other => Err(Error::Config(format!(
                "unknown view policy `{other}` (expected separate, shared, two_view)"
            ))),
        }
    }
}

impl fmt::Display for ViewPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Separate => "separate",
            Self::Shared => "shared",
            Self::TwoView => "two_view",
        })
    }
}

/// Multipliers on each task loss; all 1.0 gives the plain sum.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskWeights {
    pub supervised: f64,
    pub rotation: f64,
    pub byol: f64,
}

impl Default for TaskWeights {
    fn default() -> Self {
        Self {
            supervised: 1.0,
            rotation: 1.0,
            byol: 1.0,
        }
    }
}

/// Augmentation pipelines per task. Rotation is applied after `rotation`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pipelines {
    pub supervised: AugmentSpec,
    pub rotation: AugmentSpec,
    pub byol: AugmentSpec,
}

/// Augmented copies of one batch and the roles they play.
#[derive(Clone, Debug, PartialEq)]
pub struct Views {
    /// `images[v][i]` is view `v` of batch item `i`.
    pub images: Vec<Vec<Image>>,
    /// Views averaged by the supervised loss.
    pub supervised: Vec<usize>,
    pub rotation: Option<(usize, Vec<RotationLabel>)>,
    /// `(online, target)` views.
    pub byol: Option<(usize, usize)>,
}

impl Views {
    /// Augmented views produced per image.
    pub fn views_per_image(&self) -> usize {
        self.images.len()
    }
}

fn augment_batch(
    spec: &AugmentSpec,
    batch: &[Image],
    ids: &[u64],
    seed: u64,
    counter: u64,
    stream_id: u64,
) -> Result<Vec<Image>> {
    batch
        .iter()
        .zip(ids)
        .map(|(img, &id)| {
            Ok(apply_pipeline(
                spec,
                img,
                &mut stream_rng(seed, &[stream_id, counter, id]),
            )?)
        })
        .collect()
}

/// Builds the views `tasks` need under `policy`.
///
/// Item `i` draws from streams keyed by `(seed, stream, counter, ids[i])`, so
/// results do not depend on batch composition or on which other tasks run.
pub fn build_views(
    tasks: TaskSet,
    policy: ViewPolicy,
    pipes: &Pipelines,
    batch: &[Image],
    ids: &[u64],
    seed: u64,
    counter: u64,
) -> Result<Views> {
    if tasks.is_empty() {
        return Err(Error::Config("no active tasks".into()));
    }
    if batch.len() != ids.len() {
        return Err(Error::Data(format!(
            "{} images with {} ids",
            batch.len(),
            ids.len()
        )));
    }
    let aug = |spec: &AugmentSpec, stream_id: u64| {
        augment_batch(spec, batch, ids, seed, counter, stream_id)
    };
    let mut v = Views {
        images: Vec::new(),
        supervised: Vec::new(),
        rotation: None,
        byol: None,
    };
    if tasks.byol {
        v.images.push(aug(&pipes.byol, stream::AUG_BYOL_FIRST)?);
        v.images.push(aug(&pipes.byol, stream::AUG_BYOL_SECOND)?);
        v.byol = Some((0, 1));
    }
    if tasks.supervised {
        v.supervised = match (policy, tasks.byol) {
            (ViewPolicy::Shared, true) => vec![0],
            (ViewPolicy::TwoView, true) => vec![0, 1],
            (ViewPolicy::TwoView, false) => {
                v.images
                    .push(aug(&pipes.supervised, stream::AUG_SUPERVISED)?);
                v.images
                    .push(aug(&pipes.supervised, stream::AUG_BYOL_SECOND)?);
                vec![v.images.len() - 2, v.images.len() - 1]
            }
            _ => {
                v.images
                    .push(aug(&pipes.supervised, stream::AUG_SUPERVISED)?);
                vec![v.images.len() - 1]
            }
        };
    }
    if tasks.rotation {
        let imgs = aug(&pipes.rotation, stream::AUG_ROTATION)?;
        let labels: Vec<RotationLabel> = ids
            .iter()
            .map(|&id| {
                sample_rotation(&mut stream_rng(
                    seed,
                    &[stream::ROTATION_LABELS, counter, id],
                ))
            })
            .collect();
        let rotated = imgs
            .iter()
            .zip(&labels)
            .map(|(img, &l)| rotate90(img, l))
            .collect();
        v.images.push(rotated);
        v.rotation = Some((v.images.len() - 1, labels));
    }
    Ok(v)
}

/// Per-task losses and their (weighted) sum.
#[derive(Debug)]
pub struct TaskLossSet<E: Element> {
    pub supervised: Option<Tensor<E>>,
    pub rotation: Option<Tensor<E>>,
    pub byol: Option<Tensor<E>>,
    pub total: Tensor<E>,
}

impl<E: Element> TaskLossSet<E> {
    /// `(total, supervised, rotation, byol)` as plain numbers.
    pub fn values(&self) -> (f64, Option<f64>, Option<f64>, Option<f64>) {
        let f = |t: &Option<Tensor<E>>| t.as_ref().map(|t| t.item().to_f64_lossy());
        (
            self.total.item().to_f64_lossy(),
            f(&self.supervised),
            f(&self.rotation),
            f(&self.byol),
        )
    }
}

fn weighted<E: Element>(loss: &Tensor<E>, w: f64) -> Tensor<E> {
    if w == 1.0 {
        loss.clone()
    } else {
        tensor::scale(loss, E::from_f64_lossy(w))
    }
}

/// Computes every active loss on prepared `views` and sums them in the fixed
/// order supervised, rotation, byol. An online embedding shared between the
/// supervised and BYOL tasks is computed once.
pub fn total_loss_on_views<E: Element>(
    model: &MultiTaskModel<E>,
    views: &Views,
    labels: &[usize],
    tasks: TaskSet,
    weights: &TaskWeights,
) -> Result<TaskLossSet<E>> {
    if tasks.is_empty() {
        return Err(Error::Config("no active tasks".into()));
    }
    let mut emb_cache: Vec<Option<Tensor<E>>> = vec![None; views.images.len()];
    let mut embed = |v: usize| -> Result<Tensor<E>> {
        if let Some(e) = &emb_cache[v] {
            return Ok(e.clone());
        }
        let e = model
            .encoder
            .encode(&stack::<E>(&views.images[v]), Mode::Train)?;
        emb_cache[v] = Some(e.clone());
        Ok(e)
    };

    let mut supervised = None;
    if tasks.supervised {
        if views.supervised.is_empty() {
            return Err(Error::Config(
                "supervised task active without a view".into(),
            ));
        }
        let mut sum: Option<Tensor<E>> = None;
        for &v in &views.supervised {
            let l = model.supervised_loss_from_embedding(&embed(v)?, labels)?;
            sum = Some(match sum {
                None => l,
                Some(s) => tensor::add(&s, &l)?,
            });
        }
        let n = views.supervised.len();
        let sum = sum.expect("nonempty");
        supervised = Some(if n == 1 {
            sum
        } else {
            tensor::scale(&sum, E::one() / E::from_usize(n).unwrap())
        });
    }

    let mut rotation = None;
    if tasks.rotation {
        let (v, rot_labels) = views
            .rotation
            .as_ref()
            .ok_or_else(|| Error::Config("rotation task active without a view".into()))?;
        let logits = model.rotation_head.forward(&embed(*v)?, Mode::Train)?;
        let targets: Vec<usize> = rot_labels.iter().map(|l| l.index()).collect();
        rotation = Some(tensor::softmax_cross_entropy(&logits, &targets)?);
    }

    let mut byol = None;
    if tasks.byol {
        let (a, b) = views
            .byol
            .ok_or(Error::TooFewViews(views.images.len().min(1)))?;
        if a == b || a.max(b) >= views.images.len() {
            return Err(Error::TooFewViews(views.images.len()));
        }
        let emb_a = embed(a)?;
        let emb_b = if model.config.heads.symmetric_byol {
            Some(embed(b)?)
        } else {
            None
        };
        let view_a = stack::<E>(&views.images[a]);
        let view_b = stack::<E>(&views.images[b]);
        byol = Some(model.byol_loss_from_embeddings(&emb_a, emb_b.as_ref(), &view_a, &view_b)?);
    }

    let mut total: Option<Tensor<E>> = None;
    for (loss, w) in [
        (&supervised, weights.supervised),
        (&rotation, weights.rotation),
        (&byol, weights.byol),
    ] {
        if let Some(l) = loss {
            let l = weighted(l, w);
            total = Some(match total {
                None => l,
                Some(t) => tensor::add(&t, &l)?,
            });
        }
    }
    Ok(TaskLossSet {
        supervised,
        rotation,
        byol,
        total: total.expect("at least one task"),
    })
}

/// Builds views for `batch` and computes the total loss.
#[allow(clippy::too_many_arguments)]
pub fn total_loss<E: Element>(
    model: &MultiTaskModel<E>,
    batch: &[Image],
    labels: &[usize],
    ids: &[u64],
    tasks: TaskSet,
    policy: ViewPolicy,
    pipes: &Pipelines,
    weights: &TaskWeights,
    seed: u64,
    counter: u64,
) -> Result<(TaskLossSet<E>, Views)> {
    let views = build_views(tasks, policy, pipes, batch, ids, seed, counter)?;
    let losses = total_loss_on_views(model, &views, labels, tasks, weights)?;
    Ok((losses, views))
}
