//! In-memory labeled image sets and merged meta-training.

use std::collections::BTreeSet;

use crate::augment::Image;
use crate::error::{Error, Result};

/// Images `[N, C, S, S]` with labels indexing `class_names`.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledDataset {
    pub split: String,
    pub channels: usize,
    pub image_size: usize,
    pub images: Vec<f32>,
    pub labels: Vec<usize>,
    pub class_names: Vec<String>,
}

impl LabeledDataset {
    pub fn new(
        split: impl Into<String>,
        channels: usize,
        image_size: usize,
        images: Vec<f32>,
        labels: Vec<usize>,
        class_names: Vec<String>,
    ) -> Result<Self> {
        let per = channels * image_size * image_size;
        if per == 0 || images.len() != labels.len() * per {
            return Err(Error::Data(format!(
                "{} values for {} images of {channels}x{image_size}x{image_size}",
                images.len(),
                labels.len()
            )));
        }
        if let Some(&l) = labels.iter().find(|&&l| l >= class_names.len()) {
            return Err(Error::Data(format!(
                "label {l} outside {} classes",
                class_names.len()
            )));
        }
        Ok(Self {
            split: split.into(),
            channels,
            image_size,
            images,
            labels,
            class_names,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn pixels_per_image(&self) -> usize {
        self.channels * self.image_size * self.image_size
    }

    pub fn image_data(&self, i: usize) -> &[f32] {
        let per = self.pixels_per_image();
        &self.images[i * per..(i + 1) * per]
    }

    pub fn image(&self, i: usize) -> Image {
        Image::new(
            self.channels,
            self.image_size,
            self.image_size,
            self.image_data(i).to_vec(),
        )
    }

    /// Example indices grouped by label.
    pub fn indices_by_class(&self) -> Vec<Vec<usize>> {
        let mut by = vec![Vec::new(); self.num_classes()];
        for (i, &l) in self.labels.iter().enumerate() {
            by[l].push(i);
        }
        by
    }
}

/// Unions training tasks into one dataset over a global class index.
///
/// Global indices follow the sorted order of class names, so a class that
/// appears in several tasks maps to one index. Examples are concatenated in
/// task order without deduplication.
pub fn merge_meta_training(tasks: &[LabeledDataset]) -> Result<LabeledDataset> {
    let first = tasks
        .first()
        .ok_or_else(|| Error::Data("no tasks to merge".into()))?;
    for t in tasks {
        if (t.channels, t.image_size) != (first.channels, first.image_size) {
            return Err(Error::Data(format!(
                "inconsistent image shapes: {}x{} in `{}` vs {}x{} in `{}`",
                t.channels, t.image_size, t.split, first.channels, first.image_size, first.split
            )));
        }
    }
    let names: BTreeSet<&str> = tasks
        .iter()
        .flat_map(|t| t.class_names.iter().map(String::as_str))
        .collect();
    let class_names: Vec<String> = names.into_iter().map(str::to_owned).collect();
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for t in tasks {
        let remap: Vec<usize> = t
            .class_names
            .iter()
            .map(|n| class_names.binary_search(n).expect("name collected above"))
            .collect();
        images.extend_from_slice(&t.images);
        labels.extend(t.labels.iter().map(|&l| remap[l]));
    }
    LabeledDataset::new(
        "merged",
        first.channels,
        first.image_size,
        images,
        labels,
        class_names,
    )
}
