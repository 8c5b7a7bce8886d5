//! Synthetic clean/moiré pairs: procedural sources, the capture simulation,
//! datasets with a fixed train/validation split, and file I/O.

pub mod dataset;
pub mod io;
pub mod moire;
pub mod source;

pub use dataset::{make_dataset, sample_patch, train_count, Dataset, SpecRanges};
pub use io::{read_png, write_dataset, write_png, Manifest, ManifestEntry, Split};
pub use moire::{mosaic_demosaic, synth_pair, Cfa, ImagePair, SynthSpec};
pub use source::{procedural_image, procedural_sources, SourceKind};
