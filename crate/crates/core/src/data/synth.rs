//! Deterministic synthetic dataset: one grayscale geometric pattern per
//! class with seeded pixel noise.

use std::path::{Path, PathBuf};

use super::LabelVocabulary;
use crate::error::{Error, Result};
use crate::rng::{stream, Rng};

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub count: usize,
    /// Sample `i` is labeled with class `i mod num_classes`.
    pub num_classes: usize,
    pub image_size: usize,
    pub seed: u64,
}

/// Whether pixel `(x, y)` is foreground for `class`.
fn pattern(class: usize, x: usize, y: usize, size: usize) -> bool {
    let p = (size / 8).max(2) * (1 + class / 6);
    match class % 6 {
        0 => (y / p).is_multiple_of(2),
        1 => (x / p).is_multiple_of(2),
        2 => (x / p + y / p).is_multiple_of(2),
        3 => {
            let c = size as f64 / 2.0 - 0.5;
            let (dx, dy) = (x as f64 - c, y as f64 - c);
            dx * dx + dy * dy <= (size as f64 / 3.0 / (1 + class / 6) as f64).powi(2)
        }
        4 => ((x + y) / p).is_multiple_of(2),
        _ => x < p || y < p || x + p >= size || y + p >= size,
    }
}

/// Pixel rows of sample `index`.
pub fn render(class: usize, size: usize, seed: u64, index: usize) -> Vec<u8> {
    let mut rng = Rng::stream(seed, &[stream::SYNTH, index as u64]);
    let mut px = Vec::with_capacity(size * size);
    for y in 0..size {
        for x in 0..size {
            let base = if pattern(class, x, y, size) { 200.0 } else { 50.0 };
            px.push((base + rng.uniform(-20.0, 20.0)).round().clamp(0.0, 255.0) as u8);
        }
    }
    px
}

/// Writes `images/img_NNNN.png` and `manifest.csv` under `dir`; returns the
/// manifest path.
pub fn generate(dir: &Path, spec: &SynthSpec, vocab: &LabelVocabulary) -> Result<PathBuf> {
    if spec.num_classes == 0 || spec.num_classes > vocab.len() {
        return Err(Error::config("num_classes", format!("must lie in 1..={}", vocab.len())));
    }
    if spec.image_size < 2 || spec.count == 0 {
        return Err(Error::config("synth", "count must be positive and image_size at least 2"));
    }
    let images = dir.join("images");
    std::fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
    let mut manifest = csv::Writer::from_writer(Vec::new());
    manifest.write_record(["image_path", "labels"]).expect("in-memory write");
    for i in 0..spec.count {
        let class = i % spec.num_classes;
        let name = format!("img_{i:04}.png");
        let path = images.join(&name);
        let size = spec.image_size as u32;
        let img = image::GrayImage::from_raw(size, size, render(class, spec.image_size, spec.seed, i))
            .expect("buffer matches dimensions");
        img.save(&path).map_err(|e| Error::Decode { path: path.clone(), reason: e.to_string() })?;
        manifest.write_record([format!("images/{name}"), vocab.name(class).to_string()]).expect("in-memory write");
    }
    let path = dir.join("manifest.csv");
    let text = manifest.into_inner().expect("in-memory flush");
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}
