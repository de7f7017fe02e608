//! Dataset ingestion, preprocessing, augmentation and batching.

mod batch;
pub mod image;
mod manifest;
mod report;
pub mod synth;
mod vocab;

use schemars::JsonSchema;
use serde::{Deserialize, Serialize};

pub use batch::{split_samples, Batch, Batches, DecodePolicy, Loader};
pub use image::{augment_hflip, decode, decode_and_resize, denormalize, hflip, normalize, resize_bilinear, Normalization};
pub use manifest::{load_manifest, load_manifest_in, parse_manifest, Sample, NO_FINDING};
pub use report::ClassDistribution;
pub(crate) use report::xml_escape;
pub use vocab::LabelVocabulary;

use crate::error::{Error, Result};
use crate::fusion::ModelConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct PreprocessConfig {
    /// Side of the square model input in pixels.
    pub target_size: usize,
    #[serde(default)]
    pub normalization: Normalization,
    #[serde(default = "default_hflip")]
    pub hflip_probability: f64,
}

fn default_hflip() -> f64 {
    0.5
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        PreprocessConfig {
            target_size: 32,
            normalization: Normalization::default(),
            hflip_probability: default_hflip(),
        }
    }
}

impl PreprocessConfig {
    pub fn validate(&self) -> Result<()> {
        if self.target_size == 0 {
            return Err(Error::config("preprocess.target_size", "must be positive"));
        }
        if !(0.0..=1.0).contains(&self.hflip_probability) {
            return Err(Error::config("preprocess.hflip_probability", "must lie in [0, 1]"));
        }
        self.normalization.validate()
    }

    /// Checks that preprocessed images fit the model input.
    pub fn validate_for(&self, model: &ModelConfig) -> Result<()> {
        self.validate()?;
        if self.target_size != model.image_size() {
            return Err(Error::config(
                "preprocess.target_size",
                format!("{} differs from the model image_size {}", self.target_size, model.image_size()),
            ));
        }
        Ok(())
    }
}
