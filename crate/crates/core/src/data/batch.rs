use std::sync::OnceLock;

use rayon::prelude::*;
use schemars::JsonSchema;
use serde::{Deserialize, Serialize};

use super::image::{augment_hflip, decode_and_resize, normalize};
use super::{PreprocessConfig, Sample};
use crate::error::{Error, Result};
use crate::rng::{stream, Rng};
use crate::tensor::{Element, Tensor};

/// What to do with a sample whose image cannot be read or decoded.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize, JsonSchema)]
#[serde(rename_all = "snake_case")]
pub enum DecodePolicy {
    #[default]
    Abort,
    /// Drop the sample from its batch and log a warning.
    Skip,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Batch<T: Element = f64> {
    /// `[B, 3, S, S]`.
    pub images: Tensor<T>,
    /// `[B, K]` of 0/1.
    pub targets: Tensor<T>,
    /// Manifest indices of the rows, in batch order.
    pub indices: Vec<usize>,
}

/// Produces preprocessed batches from a sample list.
///
/// Decoding fans out over the rayon pool; results are always assembled in
/// sample order. With `cache` set, each image is decoded and normalized once
/// and reused in later epochs (augmentation is applied afterwards).
pub struct Loader<'a> {
    samples: &'a [Sample],
    preprocess: PreprocessConfig,
    policy: DecodePolicy,
    cache: Option<Vec<OnceLock<Tensor<f64>>>>,
}

impl<'a> Loader<'a> {
    pub fn new(samples: &'a [Sample], preprocess: &PreprocessConfig, policy: DecodePolicy) -> Result<Self> {
        preprocess.validate()?;
        Ok(Loader { samples, preprocess: preprocess.clone(), policy, cache: None })
    }

    pub fn with_cache(mut self) -> Self {
        self.cache = Some((0..self.samples.len()).map(|_| OnceLock::new()).collect());
        self
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Sample order for one epoch: a Fisher-Yates shuffle from stream
    /// `(seed, SHUFFLE, epoch)` when training, file order otherwise.
    pub fn epoch_order(&self, seed: u64, epoch: u64, training: bool) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.samples.len()).collect();
        if training {
            Rng::stream(seed, &[stream::SHUFFLE, epoch]).shuffle(&mut order);
        }
        order
    }

    /// Decoded, resized and normalized image of sample `index`.
    pub fn preprocessed(&self, index: usize) -> Result<Tensor<f64>> {
        let load = || {
            let s = &self.samples[index];
            let img = decode_and_resize(&s.image_path, self.preprocess.target_size)?;
            normalize(&img, &self.preprocess.normalization)
        };
        match &self.cache {
            Some(cache) => {
                if let Some(t) = cache[index].get() {
                    return Ok(t.clone());
                }
                let t = load()?;
                Ok(cache[index].get_or_init(|| t).clone())
            }
            None => load(),
        }
    }

    /// Assembles the batch for `indices`. Training batches are augmented
    /// with one flip draw per sample from stream `(seed, AUGMENT, epoch, index)`.
    /// Returns `None` when every sample was skipped.
    pub fn load_batch<T: Element>(
        &self,
        indices: &[usize],
        seed: u64,
        epoch: u64,
        training: bool,
    ) -> Result<Option<Batch<T>>> {
        let images: Vec<Result<Tensor<f64>>> = indices
            .par_iter()
            .map(|&i| {
                let img = self.preprocessed(i)?;
                Ok(if training {
                    let mut rng = Rng::stream(seed, &[stream::AUGMENT, epoch, i as u64]);
                    augment_hflip(&img, self.preprocess.hflip_probability, &mut rng).0
                } else {
                    img
                })
            })
            .collect();
        let k = self.samples.first().map_or(0, |s| s.targets.len());
        let (mut pixels, mut targets, mut kept) = (Vec::new(), Vec::new(), Vec::new());
        for (&i, img) in indices.iter().zip(images) {
            let img = match img {
                Ok(img) => img,
                Err(e @ (Error::Io { .. } | Error::Decode { .. })) if self.policy == DecodePolicy::Skip => {
                    log::warn!("skipping sample {i}: {e}");
                    continue;
                }
                Err(e) => return Err(e),
            };
            pixels.extend(img.data().iter().map(|&v| T::from_f64(v)));
            targets.extend(self.samples[i].targets.iter().map(|&t| if t { T::one() } else { T::zero() }));
            kept.push(i);
        }
        if kept.is_empty() {
            return Ok(None);
        }
        let s = self.preprocess.target_size;
        Ok(Some(Batch {
            images: Tensor::new(vec![kept.len(), 3, s, s], pixels)?,
            targets: Tensor::new(vec![kept.len(), k], targets)?,
            indices: kept,
        }))
    }

    /// Lazily loaded batches for one epoch; the last batch may be short.
    pub fn batches<T: Element>(
        &'a self,
        batch_size: usize,
        seed: u64,
        epoch: u64,
        training: bool,
    ) -> Result<Batches<'a, T>> {
        if batch_size == 0 {
            return Err(Error::config("train.batch_size", "must be positive"));
        }
        Ok(Batches {
            loader: self,
            order: self.epoch_order(seed, epoch, training),
            pos: 0,
            batch_size,
            seed,
            epoch,
            training,
            _precision: std::marker::PhantomData,
        })
    }
}

pub struct Batches<'a, T: Element> {
    loader: &'a Loader<'a>,
    order: Vec<usize>,
    pos: usize,
    batch_size: usize,
    seed: u64,
    epoch: u64,
    training: bool,
    _precision: std::marker::PhantomData<T>,
}

impl<T: Element> Iterator for Batches<'_, T> {
    type Item = Result<Batch<T>>;

    fn next(&mut self) -> Option<Self::Item> {
        while self.pos < self.order.len() {
            let end = (self.pos + self.batch_size).min(self.order.len());
            let chunk = &self.order[self.pos..end];
            self.pos = end;
            match self.loader.load_batch(chunk, self.seed, self.epoch, self.training) {
                Ok(Some(b)) => return Some(Ok(b)),
                Ok(None) => continue,
                Err(e) => {
                    self.pos = self.order.len();
                    return Some(Err(e));
                }
            }
        }
        None
    }
}

/// Seeded split into `(first, second)` with `round(ratio · n)` samples in
/// `first`; both halves keep manifest order.
pub fn split_samples(samples: &[Sample], ratio: f64, seed: u64) -> Result<(Vec<Sample>, Vec<Sample>)> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(Error::invalid("split_samples", format!("ratio {ratio} outside [0, 1]")));
    }
    let mut order: Vec<usize> = (0..samples.len()).collect();
    Rng::stream(seed, &[stream::SPLIT]).shuffle(&mut order);
    let cut = (ratio * samples.len() as f64).round() as usize;
    let mut first = order[..cut].to_vec();
    let mut second = order[cut..].to_vec();
    first.sort_unstable();
    second.sort_unstable();
    let pick = |idx: Vec<usize>| idx.into_iter().map(|i| samples[i].clone()).collect();
    Ok((pick(first), pick(second)))
}
