use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::augment::Image;
use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::tensor::snapshot::{self, Entry};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetFormat {
    /// `root/<split>/<class>/*.png`
    ImageFolder,
    /// `root/<split>.bin`, one snapshot entry `[n, C, S, S]` per class.
    PackedBinary,
}

/// Where a dataset lives and how its classes are split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    /// Relative paths resolve against the manifest file's directory.
    pub root: PathBuf,
    pub format: DatasetFormat,
    pub image_size: usize,
    pub channels: usize,
    pub splits: BTreeMap<String, Vec<String>>,
}

impl DatasetManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read manifest {}: {e}", path.display())))?;
        let mut m: DatasetManifest = toml::from_str(&text)
            .map_err(|e| Error::Config(format!("manifest {}: {e}", path.display())))?;
        if m.root.is_relative() {
            m.root = path.parent().unwrap_or(Path::new(".")).join(&m.root);
        }
        m.validate()?;
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))?;
        fs::write(path, text)?;
        Ok(())
    }

    /// Split class lists must be pairwise disjoint and free of duplicates.
    pub fn validate(&self) -> Result<()> {
        if self.image_size == 0 || !(self.channels == 1 || self.channels == 3) {
            return Err(Error::Config(format!(
                "manifest needs image_size > 0 and 1 or 3 channels, got {} and {}",
                self.image_size, self.channels
            )));
        }
        let mut owner: BTreeMap<&str, &str> = BTreeMap::new();
        for (split, classes) in &self.splits {
            for c in classes {
                if let Some(prev) = owner.insert(c, split) {
                    return Err(Error::Data(if prev == split {
                        format!("class `{c}` listed twice in split `{split}`")
                    } else {
                        format!("class `{c}` present in splits `{prev}` and `{split}`")
                    }));
                }
            }
        }
        Ok(())
    }

    fn classes(&self, split: &str) -> Result<Vec<String>> {
        let mut classes = self
            .splits
            .get(split)
            .cloned()
            .ok_or_else(|| Error::Data(format!("manifest has no split `{split}`")))?;
        classes.sort();
        Ok(classes)
    }

    /// Loads `split`, labelling classes in sorted name order.
    pub fn ingest(&self, split: &str) -> Result<LabeledDataset> {
        self.validate()?;
        let classes = self.classes(split)?;
        match self.format {
            DatasetFormat::ImageFolder => self.ingest_folder(split, classes),
            DatasetFormat::PackedBinary => self.ingest_packed(split, classes),
        }
    }

    fn ingest_folder(&self, split: &str, classes: Vec<String>) -> Result<LabeledDataset> {
        let per_class: Vec<Result<Vec<Vec<f32>>>> = std::thread::scope(|s| {
            let handles: Vec<_> = classes
                .iter()
                .map(|c| {
                    let dir = self.root.join(split).join(c);
                    s.spawn(move || self.read_class_dir(&dir))
                })
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("decoder thread panicked"))
                .collect()
        });
        let mut images = Vec::new();
        let mut labels = Vec::new();
        for (label, imgs) in per_class.into_iter().enumerate() {
            for img in imgs? {
                images.extend(img);
                labels.push(label);
            }
        }
        LabeledDataset::new(
            split,
            self.channels,
            self.image_size,
            images,
            labels,
            classes,
        )
    }

    fn read_class_dir(&self, dir: &Path) -> Result<Vec<Vec<f32>>> {
        let mut files: Vec<PathBuf> = fs::read_dir(dir)
            .map_err(|e| Error::Data(format!("class directory {}: {e}", dir.display())))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
            .collect();
        files.sort();
        if files.is_empty() {
            return Err(Error::Data(format!("no PNG files in {}", dir.display())));
        }
        files
            .iter()
            .map(|f| decode_png(f, self.channels, self.image_size))
            .collect()
    }

    fn ingest_packed(&self, split: &str, classes: Vec<String>) -> Result<LabeledDataset> {
        let path = self.root.join(format!("{split}.bin"));
        let entries = snapshot::load(&path)?;
        let by_name: BTreeMap<&str, &Entry> =
            entries.iter().map(|e| (e.name.as_str(), e)).collect();
        let want = [self.channels, self.image_size, self.image_size];
        let mut images = Vec::new();
        let mut labels = Vec::new();
        for (label, c) in classes.iter().enumerate() {
            let e = by_name
                .get(c.as_str())
                .ok_or_else(|| Error::Data(format!("{} has no record `{c}`", path.display())))?;
            if e.dims.len() != 4 || e.dims[1..] != want {
                return Err(Error::Data(format!(
                    "record `{c}` has shape {:?}, expected [_, {want:?}]",
                    e.dims
                )));
            }
            images.extend_from_slice(&e.data);
            labels.extend(std::iter::repeat_n(label, e.dims[0]));
        }
        LabeledDataset::new(
            split,
            self.channels,
            self.image_size,
            images,
            labels,
            classes,
        )
    }
}

/// Decodes a PNG to `[C, S, S]` in `[0, 1]`, resizing bilinearly if needed.
pub fn decode_png(path: &Path, channels: usize, size: usize) -> Result<Vec<f32>> {
    let img = image::open(path)
        .map_err(|e| Error::Data(format!("unreadable image {}: {e}", path.display())))?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let interleaved: Vec<u8> = if channels == 1 {
        img.to_luma8().into_raw()
    } else {
        img.to_rgb8().into_raw()
    };
    let mut data = vec![0.0f32; channels * h * w];
    for (i, &v) in interleaved.iter().enumerate() {
        let (pix, c) = (i / channels, i % channels);
        data[c * h * w + pix] = v as f32 / 255.0;
    }
    let img = Image::new(channels, h, w, data);
    Ok(if h == size && w == size {
        img.data
    } else {
        img.resize(size, size).data
    })
}

/// Quantizes `[C, H, W]` values in `[0, 1]` to 8 bits and writes a PNG.
pub fn encode_png(path: &Path, img: &Image) -> Result<()> {
    let (h, w, c) = (img.height, img.width, img.channels);
    let mut raw = vec![0u8; h * w * c];
    for ch in 0..c {
        for p in 0..h * w {
            raw[p * c + ch] = (img.data[ch * h * w + p].clamp(0.0, 1.0) * 255.0).round() as u8;
        }
    }
    let color = if c == 1 {
        image::ExtendedColorType::L8
    } else {
        image::ExtendedColorType::Rgb8
    };
    image::save_buffer_with_format(
        path,
        &raw,
        w as u32,
        h as u32,
        color,
        image::ImageFormat::Png,
    )
    .map_err(|e| Error::Data(format!("cannot write {}: {e}", path.display())))
}

/// Writes `data` as `<dir>/<split>.bin` in the packed layout.
pub fn write_packed_split(dir: &Path, data: &LabeledDataset) -> Result<PathBuf> {
    let per = data.pixels_per_image();
    let entries: Vec<Entry> = data
        .indices_by_class()
        .iter()
        .zip(&data.class_names)
        .map(|(idx, name)| {
            let pixels = idx
                .iter()
                .flat_map(|&i| data.images[i * per..(i + 1) * per].iter().copied())
                .collect();
            Entry::new(
                name.clone(),
                vec![idx.len(), data.channels, data.image_size, data.image_size],
                pixels,
            )
        })
        .collect();
    let path = dir.join(format!("{}.bin", data.split));
    snapshot::save(&path, &entries)?;
    Ok(path)
}
