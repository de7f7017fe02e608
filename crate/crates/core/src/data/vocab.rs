use std::borrow::Cow;
use std::collections::HashSet;

use schemars::{JsonSchema, Schema, SchemaGenerator};
use serde::{Deserialize, Serialize};

use super::manifest::NO_FINDING;
use crate::error::{Error, Result};

const DEFAULT_LABELS: [&str; 14] = [
    "Atelectasis",
    "Cardiomegaly",
    "Effusion",
    "Infiltration",
    "Mass",
    "Nodule",
    "Pneumonia",
    "Pneumothorax",
    "Consolidation",
    "Edema",
    "Emphysema",
    "Fibrosis",
    "Pleural_Thickening",
    "Hernia",
];

/// Ordered, unique label names; a label's position is its class id.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct LabelVocabulary {
    names: Vec<String>,
}

impl LabelVocabulary {
    pub fn new<S: Into<String>>(names: impl IntoIterator<Item = S>) -> Result<Self> {
        let names: Vec<String> = names.into_iter().map(Into::into).collect();
        if names.is_empty() {
            return Err(Error::config("labels", "vocabulary is empty"));
        }
        let mut seen = HashSet::new();
        for name in &names {
            if name.trim().is_empty() || name.trim() != name || name.contains('|') || name.contains(',') {
                return Err(Error::config("labels", format!("invalid label name {name:?}")));
            }
            if name == NO_FINDING {
                return Err(Error::config("labels", format!("{NO_FINDING:?} is reserved for empty targets")));
            }
            if !seen.insert(name.as_str()) {
                return Err(Error::config("labels", format!("duplicate label {name:?}")));
            }
        }
        Ok(LabelVocabulary { names })
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn name(&self, index: usize) -> &str {
        &self.names[index]
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    /// The first `k` labels.
    pub fn truncated(&self, k: usize) -> Result<Self> {
        if k == 0 || k > self.len() {
            return Err(Error::invalid("truncated", format!("{k} labels out of {}", self.len())));
        }
        Ok(LabelVocabulary { names: self.names[..k].to_vec() })
    }
}

impl Default for LabelVocabulary {
    fn default() -> Self {
        LabelVocabulary { names: DEFAULT_LABELS.iter().map(|s| s.to_string()).collect() }
    }
}

impl TryFrom<Vec<String>> for LabelVocabulary {
    type Error = Error;

    fn try_from(names: Vec<String>) -> Result<Self> {
        LabelVocabulary::new(names)
    }
}

impl From<LabelVocabulary> for Vec<String> {
    fn from(v: LabelVocabulary) -> Self {
        v.names
    }
}

impl JsonSchema for LabelVocabulary {
    fn schema_name() -> Cow<'static, str> {
        "LabelVocabulary".into()
    }

    fn json_schema(generator: &mut SchemaGenerator) -> Schema {
        <Vec<String>>::json_schema(generator)
    }
}
