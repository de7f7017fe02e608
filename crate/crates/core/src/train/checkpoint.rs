//! Binary checkpoint files.
//!
//! Layout: the 8-byte magic, a little-endian `u32` header length, the JSON
//! header, zero padding to a 64-byte boundary, then the tensor data. Each
//! tensor starts on a 64-byte boundary (offsets are relative to the start of
//! the data section) and is stored row-major, little-endian, in the
//! checkpoint precision.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::AdamState;
use crate::data::{LabelVocabulary, PreprocessConfig};
use crate::error::{Error, Result};
use crate::fusion::{DualStageModel, ModelConfig};
use crate::tensor::{DType, Element, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"DSTCKPT1";
pub const FORMAT_VERSION: u32 = 1;
const ALIGN: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    /// Absent for optimizer moments.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trainable: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub precision: DType,
    pub model: ModelConfig,
    pub preprocess: PreprocessConfig,
    pub vocabulary: LabelVocabulary,
    /// SHA-256 of the model config and vocabulary, hex encoded.
    pub config_hash: String,
    pub epoch: u64,
    pub seed: u64,
    /// Present when optimizer moments are stored.
    pub optimizer_step: Option<u64>,
    pub loss_history: Vec<f64>,
    pub tensors: Vec<TensorEntry>,
}

/// Everything needed to continue an interrupted run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingState<T: Element> {
    /// Completed epochs.
    pub epoch: u64,
    pub seed: u64,
    pub adam: AdamState<T>,
    pub loss_history: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint<T: Element> {
    pub model: DualStageModel<T>,
    pub vocabulary: LabelVocabulary,
    pub preprocess: PreprocessConfig,
    /// Epoch and seed are kept even without optimizer state.
    pub epoch: u64,
    pub seed: u64,
    pub loss_history: Vec<f64>,
    pub adam: Option<AdamState<T>>,
}

impl<T: Element> Checkpoint<T> {
    pub fn training_state(&self) -> Option<TrainingState<T>> {
        self.adam.as_ref().map(|adam| TrainingState {
            epoch: self.epoch,
            seed: self.seed,
            adam: adam.clone(),
            loss_history: self.loss_history.clone(),
        })
    }
}

pub fn config_hash(model: &ModelConfig, vocabulary: &LabelVocabulary) -> String {
    let bytes = serde_json::to_vec(&(model, vocabulary)).expect("configs serialize");
    Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn align(n: usize) -> usize {
    n.div_ceil(ALIGN) * ALIGN
}

/// Serializes a checkpoint to bytes.
pub fn encode<T: Element>(ckpt: &Checkpoint<T>) -> Result<Vec<u8>> {
    let params = &ckpt.model.params;
    if ckpt.vocabulary.len() != ckpt.model.num_labels() {
        return Err(Error::Checkpoint(format!(
            "{} labels in the vocabulary, {} model outputs",
            ckpt.vocabulary.len(),
            ckpt.model.num_labels()
        )));
    }
    let mut listed: Vec<(String, &Tensor<T>, Option<bool>)> =
        params.iter().map(|(_, p)| (p.name.clone(), &p.value, Some(p.trainable))).collect();
    if let Some(adam) = &ckpt.adam {
        if !adam.matches(params) {
            return Err(Error::Checkpoint("optimizer state does not match the model parameters".into()));
        }
        for (moment, values) in [("m", &adam.m), ("v", &adam.v)] {
            for ((_, p), value) in params.iter().zip(values) {
                listed.push((format!("adam.{moment}/{}", p.name), value, None));
            }
        }
    }
    let mut offset = 0;
    let mut tensors = Vec::with_capacity(listed.len());
    for (name, value, trainable) in listed {
        tensors.push((TensorEntry { name, shape: value.shape().to_vec(), offset, trainable }, value));
        offset = align(offset + value.numel() * T::DTYPE.size_of());
    }
    let data_len = offset;
    let header = CheckpointHeader {
        format_version: FORMAT_VERSION,
        precision: T::DTYPE,
        model: ckpt.model.config.clone(),
        preprocess: ckpt.preprocess.clone(),
        vocabulary: ckpt.vocabulary.clone(),
        config_hash: config_hash(&ckpt.model.config, &ckpt.vocabulary),
        epoch: ckpt.epoch,
        seed: ckpt.seed,
        optimizer_step: ckpt.adam.as_ref().map(|a| a.step),
        loss_history: ckpt.loss_history.clone(),
        tensors: tensors.iter().map(|(e, _)| e.clone()).collect(),
    };
    let json = serde_json::to_vec(&header).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let header_len = u32::try_from(json.len()).map_err(|_| Error::Checkpoint("header exceeds 4 GiB".into()))?;
    let data_start = align(CHECKPOINT_MAGIC.len() + 4 + json.len());
    let mut out = Vec::with_capacity(data_start + data_len);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&header_len.to_le_bytes());
    out.extend_from_slice(&json);
    out.resize(data_start, 0);
    for (entry, value) in &tensors {
        out.resize(data_start + entry.offset, 0);
        for &x in value.data() {
            x.extend_le_bytes(&mut out);
        }
    }
    out.resize(data_start + data_len, 0);
    Ok(out)
}

fn split_header(bytes: &[u8]) -> Result<(CheckpointHeader, &[u8])> {
    if bytes.len() < 12 {
        return Err(Error::Checkpoint("file is truncated before the header".into()));
    }
    if &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
    }
    let header_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let json = bytes
        .get(12..12 + header_len)
        .ok_or_else(|| Error::Checkpoint("file is truncated inside the header".into()))?;
    let version: serde_json::Value = serde_json::from_slice(json).map_err(|e| Error::Checkpoint(format!("header: {e}")))?;
    match version.get("format_version").and_then(|v| v.as_u64()) {
        Some(v) if v == FORMAT_VERSION as u64 => {}
        Some(v) => {
            return Err(Error::Checkpoint(format!(
                "format version {v} is not supported (expected {FORMAT_VERSION})"
            )))
        }
        None => return Err(Error::Checkpoint("header has no format_version".into())),
    }
    let header: CheckpointHeader =
        serde_json::from_value(version).map_err(|e| Error::Checkpoint(format!("header: {e}")))?;
    if header.config_hash != config_hash(&header.model, &header.vocabulary) {
        return Err(Error::Checkpoint("config hash does not match the stored config and vocabulary".into()));
    }
    let data_start = align(12 + header_len);
    let data = bytes.get(data_start..).unwrap_or(&[]);
    Ok((header, data))
}

/// Decodes a checkpoint written at precision `T`. With `vocabulary` set, the
/// stored label vocabulary must equal it.
pub fn decode<T: Element>(bytes: &[u8], vocabulary: Option<&LabelVocabulary>) -> Result<Checkpoint<T>> {
    let (header, data) = split_header(bytes)?;
    if header.precision != T::DTYPE {
        return Err(Error::Checkpoint(format!(
            "checkpoint is {} but {} was requested",
            header.precision,
            T::DTYPE
        )));
    }
    if let Some(v) = vocabulary {
        if v != &header.vocabulary {
            return Err(Error::VocabularyMismatch {
                expected: header.vocabulary.names().to_vec(),
                found: v.names().to_vec(),
            });
        }
    }
    let width = T::DTYPE.size_of();
    let read = |entry: &TensorEntry| -> Result<Tensor<T>> {
        let numel: usize = entry.shape.iter().product();
        let bytes = data.get(entry.offset..entry.offset + numel * width).ok_or_else(|| {
            Error::Checkpoint(format!("file is truncated inside tensor {}", entry.name))
        })?;
        let values = bytes.chunks_exact(width).map(T::from_le_slice).collect();
        Tensor::new(entry.shape.clone(), values)
    };
    let mut model = DualStageModel::<T>::new(&header.model, header.vocabulary.len(), 0)
        .map_err(|e| Error::Checkpoint(format!("stored model config: {e}")))?;
    let (mut m, mut v) = (Vec::new(), Vec::new());
    let mut loaded = vec![false; model.params.len()];
    for entry in &header.tensors {
        let (moment, name) = match entry.name.split_once('/') {
            Some(("adam.m", rest)) => (Some(&mut m), rest),
            Some(("adam.v", rest)) => (Some(&mut v), rest),
            _ => (None, entry.name.as_str()),
        };
        let id = model
            .params
            .find(name)
            .ok_or_else(|| Error::Checkpoint(format!("unknown tensor {}", entry.name)))?;
        if model.params.value(id).shape() != entry.shape.as_slice() {
            return Err(Error::Checkpoint(format!(
                "tensor {} has shape {:?}, the model expects {:?}",
                entry.name,
                entry.shape,
                model.params.value(id).shape()
            )));
        }
        let value = read(entry)?;
        match moment {
            Some(list) => {
                if list.len() != id.index() {
                    return Err(Error::Checkpoint(format!("optimizer tensor {} is out of order", entry.name)));
                }
                list.push(value);
            }
            None => {
                let param = model.params.get_mut(id);
                param.value = value;
                param.trainable = entry.trainable.unwrap_or(true);
                loaded[id.index()] = true;
            }
        }
    }
    if let Some(i) = loaded.iter().position(|&l| !l) {
        let name = &model.params.iter().nth(i).unwrap().1.name;
        return Err(Error::Checkpoint(format!("parameter {name} is missing")));
    }
    let adam = match header.optimizer_step {
        Some(step) => {
            let state = AdamState { step, m, v };
            if !state.matches(&model.params) {
                return Err(Error::Checkpoint("optimizer moments are incomplete".into()));
            }
            Some(state)
        }
        None if m.is_empty() && v.is_empty() => None,
        None => return Err(Error::Checkpoint("optimizer moments without an optimizer step".into())),
    };
    Ok(Checkpoint {
        model,
        vocabulary: header.vocabulary,
        preprocess: header.preprocess,
        epoch: header.epoch,
        seed: header.seed,
        loss_history: header.loss_history,
        adam,
    })
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

/// Reads only the header, e.g. to pick the precision before loading.
pub fn read_header(path: &Path) -> Result<CheckpointHeader> {
    Ok(split_header(&read_file(path)?)?.0)
}

pub fn load_checkpoint<T: Element>(path: &Path, vocabulary: Option<&LabelVocabulary>) -> Result<Checkpoint<T>> {
    decode(&read_file(path)?, vocabulary).map_err(|e| match e {
        Error::Checkpoint(reason) => Error::Checkpoint(format!("{}: {reason}", path.display())),
        e => e,
    })
}

/// Writes to a temporary file in the same directory, then renames it over
/// `path`.
pub fn save_checkpoint<T: Element>(ckpt: &Checkpoint<T>, path: &Path) -> Result<()> {
    let bytes = encode(ckpt)?;
    let dir = path.parent().filter(|d| !d.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::invalid("save_checkpoint", format!("{} has no file name", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp", file_name.to_string_lossy()));
    let write = || -> std::io::Result<()> {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    };
    write().map_err(|e| {
        let _ = fs::remove_file(&tmp);
        Error::io(path, e)
    })
}
