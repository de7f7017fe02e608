use std::collections::HashSet;
use std::io::Read;
use std::path::{Path, PathBuf};

use super::LabelVocabulary;
use crate::error::{Error, Result};

/// Labels field value meaning "no label set".
pub const NO_FINDING: &str = "No Finding";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Sample {
    pub image_path: PathBuf,
    /// One flag per vocabulary entry.
    pub targets: Vec<bool>,
}

impl Sample {
    pub fn is_no_finding(&self) -> bool {
        !self.targets.iter().any(|&t| t)
    }
}

/// Reads an `image_path,labels` CSV. Relative image paths are resolved
/// against the manifest's directory; rows keep file order.
pub fn load_manifest(path: impl AsRef<Path>, vocab: &LabelVocabulary) -> Result<Vec<Sample>> {
    let path = path.as_ref();
    load_manifest_in(path, vocab, path.parent().unwrap_or(Path::new("")))
}

/// [`load_manifest`] with relative image paths resolved against `image_root`.
pub fn load_manifest_in(path: impl AsRef<Path>, vocab: &LabelVocabulary, image_root: &Path) -> Result<Vec<Sample>> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut samples = parse_manifest(file, path, vocab)?;
    for s in &mut samples {
        if s.image_path.is_relative() {
            s.image_path = image_root.join(&s.image_path);
        }
    }
    Ok(samples)
}

/// Parses manifest text; `source` only labels errors. Paths are kept as
/// written.
pub fn parse_manifest<R: Read>(reader: R, source: &Path, vocab: &LabelVocabulary) -> Result<Vec<Sample>> {
    let err = |line: usize, reason: String| Error::Manifest { path: source.to_path_buf(), line, reason };
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers().map_err(|e| err(1, e.to_string()))?.clone();
    let column = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| err(1, format!("header must contain image_path and labels, got {:?}", headers.iter().collect::<Vec<_>>())))
    };
    let (path_col, label_col) = (column("image_path")?, column("labels")?);

    let mut seen = HashSet::new();
    let mut samples = Vec::new();
    for record in rdr.records() {
        let record = record.map_err(|e| err(e.position().map_or(0, |p| p.line() as usize), e.to_string()))?;
        let line = record.position().map_or(0, |p| p.line() as usize);
        let image_path = record.get(path_col).unwrap_or("");
        if image_path.is_empty() {
            return Err(err(line, "empty image_path".into()));
        }
        if !seen.insert(image_path.to_string()) {
            return Err(err(line, format!("duplicate image_path {image_path:?}")));
        }
        let field = record.get(label_col).unwrap_or("");
        let mut targets = vec![false; vocab.len()];
        if !field.is_empty() && field != NO_FINDING {
            for name in field.split('|').map(str::trim) {
                if name == NO_FINDING {
                    return Err(err(line, format!("{NO_FINDING:?} combined with other labels")));
                }
                let k = vocab.index_of(name).ok_or_else(|| err(line, format!("unknown label {name:?}")))?;
                if std::mem::replace(&mut targets[k], true) {
                    return Err(err(line, format!("label {name:?} listed twice")));
                }
            }
        }
        samples.push(Sample { image_path: PathBuf::from(image_path), targets });
    }
    if samples.is_empty() {
        return Err(err(1, "manifest has no rows".into()));
    }
    Ok(samples)
}
