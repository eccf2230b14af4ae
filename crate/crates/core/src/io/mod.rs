//! Datasets on disk, run configuration, toy corpus and run artifacts.

mod config;
mod manifest;
mod run;
mod toy;

pub use config::{AugmentSection, DatasetSection, EvalSection, RunConfig};
pub use manifest::{decode_png, encode_png, write_packed_split, DatasetFormat, DatasetManifest};
pub use run::{export_embeddings, load_checkpoint, save_checkpoint, RunWriter, FINAL_CHECKPOINT};
pub use toy::{class_hue, class_name, generate_toy_corpus, render, Family, ToyCorpusSpec};
