//! Image decoding and per-image preprocessing on `[3, H, W]` tensors with
//! pixel values in `[0, 255]`.

use std::path::Path;

use schemars::JsonSchema;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(tag = "mode", rename_all = "snake_case", deny_unknown_fields)]
pub enum Normalization {
    /// `(x / 255 - 0.5) / 0.5`, onto exactly `[-1, 1]`.
    #[default]
    UnitRange,
    /// Per channel `(x / 255 - mean_c) / std_c`.
    DatasetStats { mean: [f64; 3], std: [f64; 3] },
}

impl Normalization {
    pub fn validate(&self) -> Result<()> {
        if let Normalization::DatasetStats { mean, std } = self {
            if let Some(c) = std.iter().position(|s| !(*s > 0.0) || !s.is_finite()) {
                return Err(Error::config(
                    format!("preprocess.normalization.std[{c}]"),
                    format!("{} is not a positive standard deviation", std[c]),
                ));
            }
            if mean.iter().any(|m| !m.is_finite()) {
                return Err(Error::config("preprocess.normalization.mean", "must be finite"));
            }
        }
        Ok(())
    }

    /// Per-channel `(offset, scale)` with `normalized = (x / 255 - offset) / scale`.
    fn affine(&self) -> [(f64, f64); 3] {
        match self {
            Normalization::UnitRange => [(0.5, 0.5); 3],
            Normalization::DatasetStats { mean, std } => [0, 1, 2].map(|c| (mean[c], std[c])),
        }
    }
}

fn channels_of(x: &Tensor<f64>, op: &'static str) -> Result<(usize, usize, usize)> {
    match *x.shape() {
        [c, h, w] => Ok((c, h, w)),
        _ => Err(Error::shape(op, format!("expected [C, H, W], got {:?}", x.shape()))),
    }
}

/// Decodes a PNG (or any format enabled in the `image` crate) into a
/// `[3, H, W]` tensor; grayscale is replicated to three channels and alpha
/// is dropped.
pub fn decode(path: &Path) -> Result<Tensor<f64>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_bytes(&bytes, path)
}

/// [`decode`] from memory; `path` only labels errors.
pub fn decode_bytes(bytes: &[u8], path: &Path) -> Result<Tensor<f64>> {
    let decode_err = |reason: String| Error::Decode { path: path.to_path_buf(), reason };
    let img = image::load_from_memory(bytes).map_err(|e| decode_err(e.to_string()))?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    if w == 0 || h == 0 {
        return Err(decode_err("zero-sized image".into()));
    }
    let plane = w * h;
    let mut data = vec![0.0; 3 * plane];
    if img.color().has_color() {
        let rgb = img.to_rgb8();
        for (k, px) in rgb.pixels().enumerate() {
            for c in 0..3 {
                data[c * plane + k] = f64::from(px[c]);
            }
        }
    } else {
        let gray = img.to_luma8();
        for (k, px) in gray.pixels().enumerate() {
            let v = f64::from(px[0]);
            for c in 0..3 {
                data[c * plane + k] = v;
            }
        }
    }
    Tensor::new(vec![3, h, w], data)
}

/// Bilinear resampling with sample centers at `(i + 0.5) · scale - 0.5`,
/// clamped to the source edges.
pub fn resize_bilinear(x: &Tensor<f64>, out_h: usize, out_w: usize) -> Result<Tensor<f64>> {
    let (c, h, w) = channels_of(x, "resize_bilinear")?;
    if out_h == 0 || out_w == 0 {
        return Err(Error::invalid("resize_bilinear", "target size must be positive"));
    }
    let taps = |n_in: usize, n_out: usize| -> Vec<(usize, usize, f64)> {
        let scale = n_in as f64 / n_out as f64;
        (0..n_out)
            .map(|i| {
                let s = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (n_in - 1) as f64);
                let lo = s.floor() as usize;
                let hi = (lo + 1).min(n_in - 1);
                (lo, hi, s - lo as f64)
            })
            .collect()
    };
    let (rows, cols) = (taps(h, out_h), taps(w, out_w));
    let src = x.data();
    let mut out = Vec::with_capacity(c * out_h * out_w);
    for ch in 0..c {
        let plane = &src[ch * h * w..(ch + 1) * h * w];
        for &(y0, y1, fy) in &rows {
            for &(x0, x1, fx) in &cols {
                let top = plane[y0 * w + x0] * (1.0 - fx) + plane[y0 * w + x1] * fx;
                let bottom = plane[y1 * w + x0] * (1.0 - fx) + plane[y1 * w + x1] * fx;
                out.push(top * (1.0 - fy) + bottom * fy);
            }
        }
    }
    Tensor::new(vec![c, out_h, out_w], out)
}

/// Decodes an image file and resizes it to `size × size`.
pub fn decode_and_resize(path: impl AsRef<Path>, size: usize) -> Result<Tensor<f64>> {
    let img = decode(path.as_ref())?;
    if img.shape()[1] == size && img.shape()[2] == size {
        return Ok(img);
    }
    resize_bilinear(&img, size, size)
}

pub fn normalize(x: &Tensor<f64>, mode: &Normalization) -> Result<Tensor<f64>> {
    mode.validate()?;
    let (c, h, w) = channels_of(x, "normalize")?;
    if c != 3 {
        return Err(Error::shape("normalize", format!("expected 3 channels, got {c}")));
    }
    let affine = mode.affine();
    let plane = h * w;
    let data = x
        .data()
        .iter()
        .enumerate()
        .map(|(k, &v)| {
            let (offset, scale) = affine[k / plane];
            (v / 255.0 - offset) / scale
        })
        .collect();
    Tensor::new(x.shape().to_vec(), data)
}

/// Inverse of [`normalize`], back to `[0, 255]` pixel values.
pub fn denormalize(x: &Tensor<f64>, mode: &Normalization) -> Result<Tensor<f64>> {
    let (c, h, w) = channels_of(x, "denormalize")?;
    if c != 3 {
        return Err(Error::shape("denormalize", format!("expected 3 channels, got {c}")));
    }
    let affine = mode.affine();
    let plane = h * w;
    let data = x
        .data()
        .iter()
        .enumerate()
        .map(|(k, &v)| {
            let (offset, scale) = affine[k / plane];
            (v * scale + offset) * 255.0
        })
        .collect();
    Tensor::new(x.shape().to_vec(), data)
}

/// Reverses the column axis of a `[.., W]` tensor.
pub fn hflip<T: crate::tensor::Element>(x: &Tensor<T>) -> Tensor<T> {
    let w = *x.shape().last().expect("tensor has rank >= 1");
    let data = x
        .data()
        .chunks(w)
        .flat_map(|row| row.iter().rev().copied())
        .collect();
    Tensor::new(x.shape().to_vec(), data).expect("same shape")
}

/// Flips with probability `p`, drawing exactly one `next_f64` from `rng`
/// either way; flips iff the draw is below `p`. Returns whether it flipped.
pub fn augment_hflip(x: &Tensor<f64>, p: f64, rng: &mut Rng) -> (Tensor<f64>, bool) {
    if rng.next_f64() < p {
        (hflip(x), true)
    } else {
        (x.clone(), false)
    }
}
