use rand::Rng;
use serde::{Deserialize, Serialize};

use super::color;
use super::image::{CropBox, Image};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AugmentKind {
    /// Padded random crop, color jitter, horizontal flip.
    Default,
    /// Jitter with hue, grayscale, flip, blur and random resized crop.
    Hard,
    None,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Jitter {
    pub brightness: f32,
    pub contrast: f32,
    pub saturation: f32,
    pub hue: f32,
    pub p: f32,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Blur {
    pub kernel: usize,
    pub sigma: f32,
    pub p: f32,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResizedCrop {
    pub scale_min: f32,
    pub scale_max: f32,
    pub p: f32,
}

pub const MIN_CROP_SIZE: usize = 16;
const ASPECT_MIN: f32 = 3.0 / 4.0;
const ASPECT_MAX: f32 = 4.0 / 3.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentSpec {
    pub kind: AugmentKind,
    pub crop_size: usize,
    pub crop_padding: usize,
    pub jitter: Jitter,
    pub grayscale_p: f32,
    pub hflip_p: f32,
    pub blur: Blur,
    pub resized_crop: ResizedCrop,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum AugmentError {
    #[error("invalid augmentation spec: {0}")]
    Spec(String),
    #[error("image {height}x{width} too small for crop {crop} with padding {padding}")]
    TooSmall {
        height: usize,
        width: usize,
        crop: usize,
        padding: usize,
    },
}

impl AugmentSpec {
    /// Standard supervised augmentation.
    pub fn default_pipeline(crop_size: usize, crop_padding: usize) -> Self {
        Self {
            kind: AugmentKind::Default,
            crop_size,
            crop_padding,
            jitter: Jitter {
                brightness: 0.4,
                contrast: 0.4,
                saturation: 0.4,
                hue: 0.0,
                p: 1.0,
            },
            grayscale_p: 0.0,
            hflip_p: 0.5,
            blur: Blur {
                kernel: 3,
                sigma: 1.5,
                p: 0.0,
            },
            resized_crop: ResizedCrop {
                scale_min: 1.0,
                scale_max: 1.0,
                p: 0.0,
            },
        }
    }

    /// Strong augmentation used for the representation-prediction views.
    pub fn hard(crop_size: usize) -> Self {
        Self {
            kind: AugmentKind::Hard,
            crop_size,
            crop_padding: 0,
            jitter: Jitter {
                brightness: 0.4,
                contrast: 0.4,
                saturation: 0.4,
                hue: 0.1,
                p: 0.8,
            },
            grayscale_p: 0.2,
            hflip_p: 0.5,
            blur: Blur {
                kernel: 3,
                sigma: 1.5,
                p: 0.1,
            },
            resized_crop: ResizedCrop {
                scale_min: 0.35,
                scale_max: 1.0,
                p: 1.0,
            },
        }
    }

    pub fn none(crop_size: usize) -> Self {
        Self {
            kind: AugmentKind::None,
            ..Self::default_pipeline(crop_size, 0)
        }
    }

    /// Spec for `kind` with the fixed parameters of that kind.
    pub fn for_kind(kind: AugmentKind, crop_size: usize, crop_padding: usize) -> Self {
        match kind {
            AugmentKind::Default => Self::default_pipeline(crop_size, crop_padding),
            AugmentKind::Hard => Self::hard(crop_size),
            AugmentKind::None => Self::none(crop_size),
        }
    }

    pub fn validate(&self) -> Result<(), AugmentError> {
        let probs = [
            self.jitter.p,
            self.grayscale_p,
            self.hflip_p,
            self.blur.p,
            self.resized_crop.p,
        ];
        if probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(AugmentError::Spec(format!(
                "probabilities must lie in [0, 1]: {probs:?}"
            )));
        }
        let rc = &self.resized_crop;
        if !(rc.scale_min > 0.0 && rc.scale_min <= rc.scale_max && rc.scale_max <= 1.0) {
            return Err(AugmentError::Spec(format!(
                "resized crop scale ({}, {}) invalid",
                rc.scale_min, rc.scale_max
            )));
        }
        let j = &self.jitter;
        if [j.brightness, j.contrast, j.saturation]
            .iter()
            .any(|&s| !(0.0..=1.0).contains(&s))
            || !(0.0..=0.5).contains(&j.hue)
        {
            return Err(AugmentError::Spec("jitter strengths out of range".into()));
        }
        if self.blur.kernel != 3 || self.blur.sigma <= 0.0 {
            return Err(AugmentError::Spec(
                "blur must be a 3x3 kernel with positive sigma".into(),
            ));
        }
        if self.kind != AugmentKind::None && self.crop_size < MIN_CROP_SIZE {
            return Err(AugmentError::Spec(format!(
                "crop_size {} below minimum {MIN_CROP_SIZE}",
                self.crop_size
            )));
        }
        Ok(())
    }
}

/// Every random decision taken for one image.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AugmentTrace {
    pub crop: Option<CropBox>,
    pub jitter_applied: bool,
    pub brightness: f32,
    pub contrast: f32,
    pub saturation: f32,
    pub hue_shift: f32,
    pub hue_changed: bool,
    pub grayscale: bool,
    pub hflip: bool,
    pub blur: bool,
}

impl AugmentTrace {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("trace serializes")
    }
}

fn symmetric<R: Rng + ?Sized>(rng: &mut R, s: f32) -> f32 {
    if s > 0.0 {
        rng.gen_range(-s..=s)
    } else {
        // keep stream consumption independent of the strength
        let _: f32 = rng.gen();
        0.0
    }
}

fn coin<R: Rng + ?Sized>(rng: &mut R, p: f32) -> bool {
    rng.gen::<f32>() < p
}

fn color_jitter<R: Rng + ?Sized>(
    img: Image,
    j: &Jitter,
    rng: &mut R,
    trace: &mut AugmentTrace,
) -> Image {
    trace.jitter_applied = coin(rng, j.p);
    trace.brightness = 1.0 + symmetric(rng, j.brightness);
    trace.contrast = 1.0 + symmetric(rng, j.contrast);
    trace.saturation = 1.0 + symmetric(rng, j.saturation);
    trace.hue_shift = symmetric(rng, j.hue);
    if !trace.jitter_applied {
        return img;
    }
    trace.hue_changed = trace.hue_shift != 0.0 && img.channels == 3;
    let img = color::adjust_brightness(&img, trace.brightness);
    let img = color::adjust_contrast(&img, trace.contrast);
    let img = color::adjust_saturation(&img, trace.saturation);
    color::adjust_hue(&img, trace.hue_shift)
}

fn sample_resized_crop<R: Rng + ?Sized>(
    rng: &mut R,
    h: usize,
    w: usize,
    rc: &ResizedCrop,
) -> CropBox {
    let area = (h * w) as f32;
    for _ in 0..10 {
        let target = area * rng.gen_range(rc.scale_min..=rc.scale_max);
        let aspect = rng.gen_range(ASPECT_MIN..=ASPECT_MAX);
        let cw = (target * aspect).sqrt().round() as usize;
        let ch = (target / aspect).sqrt().round() as usize;
        if cw > 0 && ch > 0 && cw <= w && ch <= h {
            let top = rng.gen_range(0..=h - ch);
            let left = rng.gen_range(0..=w - cw);
            return CropBox {
                top,
                left,
                height: ch,
                width: cw,
            };
        }
    }
    CropBox {
        top: 0,
        left: 0,
        height: h,
        width: w,
    }
}

/// Applies `spec` to one image, returning the result and the decisions taken.
pub fn apply_pipeline_traced<R: Rng + ?Sized>(
    spec: &AugmentSpec,
    image: &Image,
    rng: &mut R,
) -> Result<(Image, AugmentTrace), AugmentError> {
    spec.validate()?;
    let mut trace = AugmentTrace {
        brightness: 1.0,
        contrast: 1.0,
        saturation: 1.0,
        ..Default::default()
    };
    let size = spec.crop_size;
    let out = match spec.kind {
        AugmentKind::None => image.clone(),
        AugmentKind::Default => {
            let pad = spec.crop_padding;
            let (ph, pw) = (image.height + 2 * pad, image.width + 2 * pad);
            if ph < size || pw < size {
                return Err(AugmentError::TooSmall {
                    height: image.height,
                    width: image.width,
                    crop: size,
                    padding: pad,
                });
            }
            let top = rng.gen_range(0..=ph - size);
            let left = rng.gen_range(0..=pw - size);
            trace.crop = Some(CropBox {
                top,
                left,
                height: size,
                width: size,
            });
            let img = image.padded_crop(pad, top, left, size);
            let img = color_jitter(img, &spec.jitter, rng, &mut trace);
            trace.hflip = coin(rng, spec.hflip_p);
            if trace.hflip {
                img.hflip()
            } else {
                img
            }
        }
        AugmentKind::Hard => {
            let img = color_jitter(image.clone(), &spec.jitter, rng, &mut trace);
            trace.grayscale = coin(rng, spec.grayscale_p);
            let img = if trace.grayscale {
                color::grayscale(&img)
            } else {
                img
            };
            trace.hflip = coin(rng, spec.hflip_p);
            let img = if trace.hflip { img.hflip() } else { img };
            trace.blur = coin(rng, spec.blur.p);
            let img = if trace.blur {
                color::gaussian_blur3(&img, spec.blur.sigma)
            } else {
                img
            };
            let crop_applied = coin(rng, spec.resized_crop.p);
            let region = sample_resized_crop(rng, img.height, img.width, &spec.resized_crop);
            if crop_applied {
                trace.crop = Some(region);
                img.resize_region(region, size, size)
            } else {
                img.resize(size, size)
            }
        }
    };
    let mut out = out;
    out.clamp01();
    Ok((out, trace))
}

pub fn apply_pipeline<R: Rng + ?Sized>(
    spec: &AugmentSpec,
    image: &Image,
    rng: &mut R,
) -> Result<Image, AugmentError> {
    apply_pipeline_traced(spec, image, rng).map(|(img, _)| img)
}
