//! Shared encoder with supervised, rotation and BYOL heads.

mod tasks;

use std::collections::HashMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{rotate90, sample_rotation, stack, Image, RotationLabel};
use crate::error::{Error, Result};
use crate::nn::{copy_state, Buffer, Encoder, EncoderConfig, Linear, Mlp, MlpConfig, Mode, Module};
use crate::tensor::snapshot::Entry;
use crate::tensor::{self, no_grad, Element, Parameter, Tensor};

pub use tasks::{
    build_views, total_loss, total_loss_on_views, Pipelines, TaskLossSet, TaskSet, TaskWeights,
    ViewPolicy, Views,
};

pub const ROTATION_CLASSES: usize = 4;

/// Head sizes. The rotation head mirrors the embedding width.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeadsConfig {
    pub projector_hidden: usize,
    pub projection_dim: usize,
    pub predictor_hidden: usize,
    /// Also regress the second view's prediction onto the first view's target.
    #[serde(default)]
    pub symmetric_byol: bool,
}

impl Default for HeadsConfig {
    fn default() -> Self {
        Self {
            projector_hidden: 512,
            projection_dim: 64,
            predictor_hidden: 512,
            symmetric_byol: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub heads: HeadsConfig,
    pub num_classes: usize,
    pub tau: f64,
}

impl ModelConfig {
    pub fn rotation_mlp(&self) -> MlpConfig {
        let e = self.encoder.embedding_dim;
        MlpConfig::chain(e, &[e, e], ROTATION_CLASSES, true)
    }

    pub fn projector_mlp(&self) -> MlpConfig {
        MlpConfig::chain(
            self.encoder.embedding_dim,
            &[self.heads.projector_hidden],
            self.heads.projection_dim,
            true,
        )
    }

    pub fn predictor_mlp(&self) -> MlpConfig {
        let p = self.heads.projection_dim;
        MlpConfig::chain(p, &[self.heads.predictor_hidden], p, true)
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate().map_err(Error::Config)?;
        if self.num_classes == 0 {
            return Err(Error::Config("num_classes must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.tau) {
            return Err(Error::Config(format!("tau {} outside [0, 1)", self.tau)));
        }
        let h = &self.heads;
        if h.projector_hidden == 0 || h.projection_dim == 0 || h.predictor_hidden == 0 {
            return Err(Error::Config("head sizes must be positive".into()));
        }
        Ok(())
    }
}

/// Online network (encoder, classifier, rotation head, projector, predictor)
/// plus the EMA target encoder and projector.
#[derive(Debug)]
pub struct MultiTaskModel<E: Element = f32> {
    pub config: ModelConfig,
    pub encoder: Encoder<E>,
    pub classifier: Linear<E>,
    pub rotation_head: Mlp<E>,
    pub projector: Mlp<E>,
    pub predictor: Mlp<E>,
    pub target_encoder: Encoder<E>,
    pub target_projector: Mlp<E>,
    /// Optimization steps taken so far.
    pub step: u64,
}

impl<E: Element> MultiTaskModel<E> {
    pub fn new<R: Rng + ?Sized>(config: &ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let e = config.encoder.embedding_dim;
        let encoder = Encoder::new("encoder", &config.encoder, true, rng).map_err(Error::Config)?;
        let classifier = Linear::new("classifier", e, config.num_classes, true, rng);
        let rotation_head =
            Mlp::new("rotation_head", &config.rotation_mlp(), true, rng).map_err(Error::Config)?;
        let projector =
            Mlp::new("projector", &config.projector_mlp(), true, rng).map_err(Error::Config)?;
        let predictor =
            Mlp::new("predictor", &config.predictor_mlp(), true, rng).map_err(Error::Config)?;
        let target_encoder =
            Encoder::new("target_encoder", &config.encoder, false, rng).map_err(Error::Config)?;
        let target_projector = Mlp::new("target_projector", &config.projector_mlp(), false, rng)
            .map_err(Error::Config)?;
        copy_state(&target_encoder, &encoder);
        copy_state(&target_projector, &projector);
        Ok(Self {
            config: config.clone(),
            encoder,
            classifier,
            rotation_head,
            projector,
            predictor,
            target_encoder,
            target_projector,
            step: 0,
        })
    }

    pub fn tau(&self) -> f64 {
        self.config.tau
    }

    pub fn set_tau(&mut self, tau: f64) -> Result<()> {
        if !(0.0..1.0).contains(&tau) {
            return Err(Error::Config(format!("tau {tau} outside [0, 1)")));
        }
        self.config.tau = tau;
        Ok(())
    }

    /// Parameters updated by gradient descent when `tasks` are active.
    pub fn trainable_parameters(&self, tasks: TaskSet) -> Vec<&Parameter<E>> {
        let mut p = self.encoder.parameters();
        if tasks.supervised {
            p.extend(self.classifier.parameters());
        }
        if tasks.rotation {
            p.extend(self.rotation_head.parameters());
        }
        if tasks.byol {
            p.extend(self.projector.parameters());
            p.extend(self.predictor.parameters());
        }
        p
    }

    pub fn online_parameters(&self) -> Vec<&Parameter<E>> {
        [
            self.encoder.parameters(),
            self.classifier.parameters(),
            self.rotation_head.parameters(),
            self.projector.parameters(),
            self.predictor.parameters(),
        ]
        .concat()
    }

    pub fn target_parameters(&self) -> Vec<&Parameter<E>> {
        [
            self.target_encoder.parameters(),
            self.target_projector.parameters(),
        ]
        .concat()
    }

    /// `(target, online)` pairs tracked by the moving average.
    pub fn ema_pairs(&self) -> Vec<(&Parameter<E>, &Parameter<E>)> {
        let online = [self.encoder.parameters(), self.projector.parameters()].concat();
        self.target_parameters().into_iter().zip(online).collect()
    }

    pub fn all_buffers(&self) -> Vec<&Buffer<E>> {
        [
            self.encoder.buffers(),
            self.rotation_head.buffers(),
            self.projector.buffers(),
            self.predictor.buffers(),
            self.target_encoder.buffers(),
            self.target_projector.buffers(),
        ]
        .concat()
    }

    pub fn zero_grad(&self) {
        self.online_parameters()
            .iter()
            .for_each(|p| p.value.zero_grad());
    }

    pub fn embed(&self, images: &Tensor<E>, mode: Mode) -> Result<Tensor<E>> {
        Ok(self.encoder.encode(images, mode)?)
    }

    /// Mean cross-entropy of the linear classifier over encoded images.
    pub fn supervised_loss(&self, images: &Tensor<E>, labels: &[usize]) -> Result<Tensor<E>> {
        let emb = self.encoder.encode(images, Mode::Train)?;
        self.supervised_loss_from_embedding(&emb, labels)
    }

    pub fn supervised_loss_from_embedding(
        &self,
        emb: &Tensor<E>,
        labels: &[usize],
    ) -> Result<Tensor<E>> {
        let logits = self.classifier.forward(emb)?;
        Ok(tensor::softmax_cross_entropy(&logits, labels)?)
    }

    /// Rotates each image by its own label and classifies the rotation.
    pub fn rotation_loss_with_labels(
        &self,
        images: &[Image],
        labels: &[RotationLabel],
    ) -> Result<Tensor<E>> {
        if images.len() != labels.len() {
            return Err(Error::Data(format!(
                "{} images for {} rotation labels",
                images.len(),
                labels.len()
            )));
        }
        let rotated: Vec<Image> = images
            .iter()
            .zip(labels)
            .map(|(img, &l)| rotate90(img, l))
            .collect();
        let emb = self.encoder.encode(&stack::<E>(&rotated), Mode::Train)?;
        let logits = self.rotation_head.forward(&emb, Mode::Train)?;
        let targets: Vec<usize> = labels.iter().map(|l| l.index()).collect();
        Ok(tensor::softmax_cross_entropy(&logits, &targets)?)
    }

    /// Samples one rotation per image; the batch is not replicated.
    pub fn rotation_loss<R: Rng + ?Sized>(
        &self,
        images: &[Image],
        rng: &mut R,
    ) -> Result<(Tensor<E>, Vec<RotationLabel>)> {
        let labels: Vec<RotationLabel> = images.iter().map(|_| sample_rotation(rng)).collect();
        let loss = self.rotation_loss_with_labels(images, &labels)?;
        Ok((loss, labels))
    }

    /// `q(g(F(online_view)))`.
    pub fn online_prediction(&self, emb: &Tensor<E>) -> Result<Tensor<E>> {
        let z = self.projector.forward(emb, Mode::Train)?;
        Ok(self.predictor.forward(&z, Mode::Train)?)
    }

    /// `g_target(F_target(view))`, carrying no gradient.
    pub fn target_projection(&self, view: &Tensor<E>) -> Result<Tensor<E>> {
        no_grad(|| {
            let h = self.target_encoder.encode(view, Mode::Train)?;
            Ok(self.target_projector.forward(&h, Mode::Train)?.detach())
        })
    }

    /// BYOL regression between `view_a`'s online prediction and `view_b`'s
    /// target projection (plus the swapped direction when symmetric).
    pub fn byol_loss(&self, view_a: &Tensor<E>, view_b: &Tensor<E>) -> Result<Tensor<E>> {
        let emb_a = self.encoder.encode(view_a, Mode::Train)?;
        let emb_b = self
            .config
            .heads
            .symmetric_byol
            .then(|| self.encoder.encode(view_b, Mode::Train))
            .transpose()?;
        self.byol_loss_from_embeddings(&emb_a, emb_b.as_ref(), view_a, view_b)
    }

    pub(crate) fn byol_loss_from_embeddings(
        &self,
        emb_a: &Tensor<E>,
        emb_b: Option<&Tensor<E>>,
        view_a: &Tensor<E>,
        view_b: &Tensor<E>,
    ) -> Result<Tensor<E>> {
        let loss = byol_regression_loss(
            &self.online_prediction(emb_a)?,
            &self.target_projection(view_b)?,
        )?;
        match (self.config.heads.symmetric_byol, emb_b) {
            (true, Some(emb_b)) => {
                let swapped = byol_regression_loss(
                    &self.online_prediction(emb_b)?,
                    &self.target_projection(view_a)?,
                )?;
                Ok(tensor::add(&loss, &swapped)?)
            }
            _ => Ok(loss),
        }
    }

    /// `target <- tau * target + (1 - tau) * online` over encoder and projector.
    pub fn ema_update(&self) {
        let tau = E::from_f64_lossy(self.config.tau);
        let keep = E::one() - tau;
        for (target, online) in self.ema_pairs() {
            let src = online.value.data();
            let mut dst = target.value.data_mut();
            for (t, &o) in dst.iter_mut().zip(src.iter()) {
                *t = tau * *t + keep * o;
            }
        }
    }

    /// Every parameter and buffer, then `meta.tau` and `meta.step`.
    ///
    /// `meta.step` stores the counter as `[low 24 bits, high bits]` so both
    /// halves are exact in `f32`.
    pub fn state_entries(&self) -> Vec<Entry> {
        let mut out: Vec<Entry> = self
            .online_parameters()
            .into_iter()
            .chain(self.target_parameters())
            .map(|p| Entry::new(p.name.clone(), p.shape().to_vec(), to_f32(&p.value.data())))
            .collect();
        out.extend(self.all_buffers().into_iter().map(|b| {
            let d = b.data.borrow();
            Entry::new(b.name.clone(), vec![d.len()], to_f32(&d))
        }));
        out.push(Entry::new(
            "meta.tau",
            vec![1],
            vec![self.config.tau as f32],
        ));
        let lo = (self.step & 0xFF_FFFF) as f32;
        let hi = (self.step >> 24) as f32;
        out.push(Entry::new("meta.step", vec![2], vec![lo, hi]));
        out
    }

    /// Restores a full model state written by [`state_entries`](Self::state_entries).
    pub fn load_state(&mut self, entries: &[Entry]) -> Result<()> {
        let map = index_entries(entries);
        load_module_state(&OnlineAndTarget(self), &map, "")?;
        let tau = map
            .get("meta.tau")
            .ok_or_else(|| Error::Checkpoint("missing meta.tau".into()))?;
        let step = map
            .get("meta.step")
            .ok_or_else(|| Error::Checkpoint("missing meta.step".into()))?;
        if step.data.len() != 2 || tau.data.len() != 1 {
            return Err(Error::Checkpoint("malformed meta entries".into()));
        }
        self.config.tau = tau.data[0] as f64;
        self.step = step.data[0] as u64 | ((step.data[1] as u64) << 24);
        Ok(())
    }
}

struct OnlineAndTarget<'a, E: Element>(&'a MultiTaskModel<E>);

impl<E: Element> Module<E> for OnlineAndTarget<'_, E> {
    fn parameters(&self) -> Vec<&Parameter<E>> {
        [self.0.online_parameters(), self.0.target_parameters()].concat()
    }

    fn buffers(&self) -> Vec<&Buffer<E>> {
        self.0.all_buffers()
    }
}

fn to_f32<E: Element>(v: &[E]) -> Vec<f32> {
    v.iter().map(|x| x.to_f32().unwrap_or(f32::NAN)).collect()
}

pub fn index_entries(entries: &[Entry]) -> HashMap<&str, &Entry> {
    entries.iter().map(|e| (e.name.as_str(), e)).collect()
}

/// Copies entries named `prefix + name` into `module`; every parameter and
/// buffer must be present with a matching shape.
pub fn load_module_state<E: Element>(
    module: &dyn Module<E>,
    entries: &HashMap<&str, &Entry>,
    prefix: &str,
) -> Result<()> {
    let fetch = |name: &str, shape: &[usize]| -> Result<Vec<E>> {
        let key = format!("{prefix}{name}");
        let e = entries
            .get(key.as_str())
            .ok_or_else(|| Error::Checkpoint(format!("missing entry `{key}`")))?;
        if e.dims != shape {
            return Err(Error::Checkpoint(format!(
                "`{key}` has shape {:?}, model expects {shape:?}",
                e.dims
            )));
        }
        Ok(e.data.iter().map(|&v| E::from_f32(v).unwrap()).collect())
    };
    for p in module.parameters() {
        let v = fetch(&p.name, p.shape())?;
        p.value.data_mut().copy_from_slice(&v);
    }
    for b in module.buffers() {
        let len = b.data.borrow().len();
        let v = fetch(&b.name, &[len])?;
        b.data.borrow_mut().copy_from_slice(&v);
    }
    Ok(())
}

/// Mean over the batch of `|normalize(p) - normalize(t)|^2`, i.e. `2 - 2 cos(p, t)` per pair.
pub fn byol_regression_loss<E: Element>(
    prediction: &Tensor<E>,
    target: &Tensor<E>,
) -> Result<Tensor<E>> {
    let p = tensor::l2_normalize(prediction, 1)?;
    let t = tensor::l2_normalize(target, 1)?;
    let dim = E::from_usize(prediction.shape()[1]).unwrap();
    Ok(tensor::scale(&tensor::mse(&p, &t)?, dim))
}
