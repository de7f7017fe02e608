//! Run configuration file.

use std::path::{Path, PathBuf};

use dualvit::data::{DecodePolicy, LabelVocabulary, PreprocessConfig};
use dualvit::swin::SwinConfig;
use dualvit::train::TrainConfig;
use dualvit::vit::VitConfig;
use dualvit::ModelConfig;
use schemars::JsonSchema;
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    #[serde(default)]
    pub vit: VitConfig,
    #[serde(default)]
    pub swin: SwinConfig,
    /// Label names in output order; defaults to the 14 chest X-ray findings.
    #[serde(default)]
    pub labels: LabelVocabulary,
}

impl ModelSection {
    pub fn model_config(&self) -> ModelConfig {
        ModelConfig { vit: self.vit.clone(), swin: self.swin.clone() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    /// `image_path,labels` CSV.
    pub manifest: PathBuf,
    /// Base for relative image paths; the manifest directory by default.
    #[serde(default)]
    pub image_root: Option<PathBuf>,
    #[serde(default)]
    pub preprocess: PreprocessConfig,
    #[serde(default)]
    pub decode_policy: DecodePolicy,
    /// Keep decoded images in memory between epochs.
    #[serde(default = "default_cache")]
    pub cache: bool,
}

fn default_cache() -> bool {
    true
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub model: ModelSection,
    /// Required by `train`.
    #[serde(default)]
    pub data: Option<DataSection>,
    #[serde(default)]
    pub train: TrainConfig,
    /// Used when `--out` is not given.
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
}

impl RunConfig {
    /// Parses `path`; relative paths inside are taken relative to its directory.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
        let mut de = serde_json::Deserializer::from_str(&text);
        let mut config: RunConfig = serde_path_to_error::deserialize(&mut de).map_err(|e| {
            let field = e.path().to_string();
            CliError::Input(format!("{}: {field}: {}", path.display(), e.into_inner()))
        })?;
        let base = path.parent().unwrap_or(Path::new(""));
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        if let Some(data) = &mut config.data {
            resolve(&mut data.manifest);
            if let Some(root) = &mut data.image_root {
                resolve(root);
            }
        }
        if let Some(out) = &mut config.output_dir {
            resolve(out);
        }
        config.validate()?;
        Ok(config)
    }

    /// Cross-section checks, run before any work starts.
    pub fn validate(&self) -> Result<(), CliError> {
        let model = self.model.model_config();
        model.validate()?;
        self.train.validate()?;
        if let Some(data) = &self.data {
            data.preprocess.validate_for(&model)?;
        }
        Ok(())
    }

    pub fn data(&self) -> Result<&DataSection, CliError> {
        self.data
            .as_ref()
            .ok_or_else(|| CliError::Input("invalid configuration: data: required for training".into()))
    }
}
