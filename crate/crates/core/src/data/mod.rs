//! Dataset ingestion, preprocessing, augmentation and synthetic data.

mod augment;
mod manifest;
mod preprocess;
mod synth;

use std::path::{Path, PathBuf};

use thiserror::Error;

pub use self::augment::{augment, sample_crop_offset, AugmentConfig};
pub use self::manifest::{load_manifest, write_manifest, ManifestLoad, MissingImage, SampleRecord, MANIFEST_HEADER};
pub use self::preprocess::{load_image, preprocess, preprocess_file, Normalization};
pub use self::synth::{export_dataset, synth_age, synth_dataset, synth_sample, SYNTH_LAYOUT};
use crate::granularity::AgeLabel;
use crate::tensor::ImageTensor;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{}:{line}: {message}", path.display())]
    Parse { path: PathBuf, line: u64, message: String },
    #[error("{}: manifest has no records", .0.display())]
    EmptyManifest(PathBuf),
    #[error("cannot decode image {}: {message}", path.display())]
    Decode { path: PathBuf, message: String },
    #[error("cannot encode image {}: {message}", path.display())]
    Encode { path: PathBuf, message: String },
    #[error("image shape {actual:?} is not {expected}x{expected} with 3 channels")]
    WrongShape { expected: usize, actual: [usize; 3] },
    #[error("invalid augmentation config: {0}")]
    InvalidAugment(String),
    #[error("sample count must be at least 1")]
    EmptyRequest,
}

/// One decoded, normalized image with its label.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub image: ImageTensor,
    pub age: AgeLabel,
}

/// An in-memory split.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dataset {
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn new(samples: Vec<Sample>) -> Self {
        Self { samples }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn ages(&self) -> Vec<f64> {
        self.samples.iter().map(|s| s.age.years()).collect()
    }

    /// Number of labels that fall outside the age grid and will be clamped.
    pub fn clamped_label_count(&self) -> usize {
        self.samples.iter().filter(|s| s.age.is_out_of_range()).count()
    }

    /// Decodes every record of a loaded manifest.
    pub fn from_manifest(
        load: &ManifestLoad,
        images_root: &Path,
        input_size: usize,
        norm: &Normalization,
    ) -> Result<Self, DataError> {
        let samples = load
            .records
            .iter()
            .map(|r| {
                Ok(Sample {
                    image: preprocess_file(&images_root.join(&r.image_path), input_size, norm)?,
                    age: AgeLabel::new(r.apparent_age),
                })
            })
            .collect::<Result<Vec<_>, DataError>>()?;
        let ds = Self { samples };
        let clamped = ds.clamped_label_count();
        if clamped > 0 {
            log::warn!("{clamped} labels fall outside 1..=100 and will be clamped");
        }
        Ok(ds)
    }

    /// Loads a manifest and decodes it, logging rows whose image is missing.
    pub fn load(
        manifest_path: &Path,
        images_root: &Path,
        input_size: usize,
        norm: &Normalization,
    ) -> Result<Self, DataError> {
        let load = load_manifest(manifest_path, images_root)?;
        for m in &load.missing {
            log::warn!(
                "{}:{}: image {} not found, skipped",
                manifest_path.display(),
                m.line,
                m.path.display()
            );
        }
        if load.records.is_empty() {
            return Err(DataError::EmptyManifest(manifest_path.to_path_buf()));
        }
        Self::from_manifest(&load, images_root, input_size, norm)
    }
}
