//! Synthetic image corpus with solid-color, shape and stripe-texture classes.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::manifest::{encode_png, DatasetFormat, DatasetManifest};
use crate::augment::color::hsv_to_rgb;
use crate::augment::Image;
use crate::error::{Error, Result};
use crate::rng::{stream, stream_rng, StreamRng};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToyCorpusSpec {
    pub per_class: usize,
    pub image_size: usize,
    pub seed: u64,
    /// Classes per split, assigned in order.
    pub splits: Vec<(String, usize)>,
}

impl ToyCorpusSpec {
    pub fn new(
        train: usize,
        val: usize,
        test: usize,
        per_class: usize,
        image_size: usize,
        seed: u64,
    ) -> Self {
        let splits = vec![
            ("train".into(), train),
            ("val".into(), val),
            ("test".into(), test),
        ];
        Self {
            per_class,
            image_size,
            seed,
            splits,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.splits.iter().map(|(_, n)| n).sum()
    }

    pub fn validate(&self) -> Result<()> {
        if self.per_class == 0 || self.num_classes() == 0 || self.image_size < 8 {
            return Err(Error::Config(
                "toy corpus needs classes, per_class >= 1 and image_size >= 8".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Family {
    Solid,
    Shape,
    Texture,
}

impl Family {
    pub fn of(class: usize) -> Family {
        [Family::Solid, Family::Shape, Family::Texture][class % 3]
    }

    fn name(self) -> &'static str {
        match self {
            Family::Solid => "solid",
            Family::Shape => "shape",
            Family::Texture => "texture",
        }
    }
}

pub fn class_name(class: usize) -> String {
    format!("{}{class:02}", Family::of(class).name())
}

/// Base hue of `class`, spread by the golden ratio.
pub fn class_hue(class: usize) -> f32 {
    (class as f32 * 0.618_034).fract()
}

fn class_rgb(class: usize) -> [f32; 3] {
    let (r, g, b) = hsv_to_rgb(class_hue(class), 0.85, 0.9);
    [r, g, b]
}

fn paint(img: &mut Image, y: usize, x: usize, rgb: [f32; 3]) {
    for (c, v) in rgb.iter().enumerate() {
        *img.at_mut(c, y, x) = *v;
    }
}

fn random_rgb(rng: &mut StreamRng) -> [f32; 3] {
    let (r, g, b) = hsv_to_rgb(rng.gen(), rng.gen_range(0.5..1.0), rng.gen_range(0.5..1.0));
    [r, g, b]
}

/// Renders one example of `class`; `rng` drives the per-example variation.
///
/// Solid classes are identified by their color. Shape and texture classes
/// draw fresh colors per example, so only geometry identifies them: shape
/// variant `v` is outline `v % 4` at size band `v / 4 % 2`, texture variant
/// `v` is stripe orientation `v % 4` at frequency band `v / 4 % 3`.
pub fn render(class: usize, size: usize, rng: &mut StreamRng) -> Image {
    let s = size as f32;
    let v = class / 3;
    let mut img = Image::filled(3, size, size, 0.0);
    match Family::of(class) {
        Family::Solid => {
            let rgb = class_rgb(class);
            let gain = rng.gen_range(0.9..1.1f32);
            for y in 0..size {
                for x in 0..size {
                    paint(&mut img, y, x, rgb.map(|c| c * gain));
                }
            }
        }
        Family::Shape => {
            let fg = random_rgb(rng);
            let bg = random_rgb(rng).map(|c| c * 0.3);
            let band = if (v / 4).is_multiple_of(2) { 0.3 } else { 0.18 };
            let radius = s * band * rng.gen_range(0.85..1.15f32);
            let cy = s / 2.0 + rng.gen_range(-0.12..0.12f32) * s;
            let cx = s / 2.0 + rng.gen_range(-0.12..0.12f32) * s;
            for y in 0..size {
                for x in 0..size {
                    let (dy, dx) = (y as f32 + 0.5 - cy, x as f32 + 0.5 - cx);
                    let inside = match v % 4 {
                        0 => dy * dy + dx * dx <= radius * radius,
                        1 => dy.abs() <= radius && dx.abs() <= radius,
                        2 => dy >= -radius && dy <= radius && dx.abs() <= (dy + radius) / 2.0,
                        _ => {
                            (dy.abs() <= radius / 3.0 && dx.abs() <= radius)
                                || (dx.abs() <= radius / 3.0 && dy.abs() <= radius)
                        }
                    };
                    paint(&mut img, y, x, if inside { fg } else { bg });
                }
            }
        }
        Family::Texture => {
            let (on_rgb, off_rgb) = (random_rgb(rng), random_rgb(rng).map(|c| c * 0.3));
            let angle = (v % 4) as f32 * std::f32::consts::FRAC_PI_4;
            let period = s / (2.0 + 2.0 * (v / 4 % 3) as f32);
            let phase = rng.gen_range(0.0..period);
            let (sin, cos) = angle.sin_cos();
            for y in 0..size {
                for x in 0..size {
                    let t = x as f32 * cos + y as f32 * sin + phase;
                    let on = (t / period).rem_euclid(1.0) < 0.5;
                    paint(&mut img, y, x, if on { on_rgb } else { off_rgb });
                }
            }
        }
    }
    for p in img.data.iter_mut() {
        *p += rng.gen_range(-0.04..0.04f32);
    }
    img.clamp01();
    img
}

/// Writes the corpus as PNGs under `out_dir/<split>/<class>/NNNN.png` plus
/// `out_dir/manifest.toml`, returning the manifest path.
pub fn generate_toy_corpus(spec: &ToyCorpusSpec, out_dir: &Path) -> Result<PathBuf> {
    spec.validate()?;
    let mut splits = BTreeMap::new();
    let mut class = 0;
    for (split, count) in &spec.splits {
        let names: Vec<String> = (class..class + count).map(class_name).collect();
        for c in class..class + count {
            let dir = out_dir.join(split).join(class_name(c));
            fs::create_dir_all(&dir)?;
            for i in 0..spec.per_class {
                let mut rng = stream_rng(spec.seed, &[stream::TOY_CORPUS, c as u64, i as u64]);
                encode_png(
                    &dir.join(format!("{i:04}.png")),
                    &render(c, spec.image_size, &mut rng),
                )?;
            }
        }
        splits.insert(split.clone(), names);
        class += count;
    }
    let manifest = DatasetManifest {
        root: PathBuf::from("."),
        format: DatasetFormat::ImageFolder,
        image_size: spec.image_size,
        channels: 3,
        splits,
    };
    let path = out_dir.join("manifest.toml");
    manifest.save(&path)?;
    Ok(path)
}
