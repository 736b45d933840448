//! Checkpoint directories: `manifest.json` plus little-endian `params.bin`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::nn::{Float, HourglassModel, ModelConfig, Tensor, HEAD_PREFIX};
use crate::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const BLOB_FILE: &str = "params.bin";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EntryKind {
    Param,
    Buffer,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    pub name: String,
    pub shape: Vec<usize>,
    pub kind: EntryKind,
    pub data: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
    /// Offset into `params.bin`, in values.
    offset: usize,
    kind: EntryKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    config: ModelConfig,
    tensors: Vec<ManifestEntry>,
}

/// Model configuration plus every named array, in model visiting order.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub entries: Vec<Entry>,
}

impl Checkpoint {
    pub fn from_model<T: Float>(model: &HourglassModel<T>) -> Self {
        let mut entries = Vec::new();
        model.visit(&mut |name, p| {
            entries.push(Entry {
                name: name.to_string(),
                shape: p.value.shape().to_vec(),
                kind: if p.trainable {
                    EntryKind::Param
                } else {
                    EntryKind::Buffer
                },
                data: p.value.data().iter().map(|v| v.as_f64() as f32).collect(),
            })
        });
        Self {
            config: model.config().clone(),
            entries,
        }
    }

    pub fn entry(&self, name: &str) -> Option<&Entry> {
        self.entries.iter().find(|e| e.name == name)
    }

    /// Rebuilds the model. Names and shapes must match the layout implied by
    /// the stored configuration exactly.
    pub fn to_model<T: Float>(&self) -> Result<HourglassModel<T>> {
        let mut model = HourglassModel::<T>::new(self.config.clone(), 0)?;
        check_layout(
            &model,
            self.entries
                .iter()
                .map(|e| (e.name.as_str(), e.shape.as_slice())),
        )?;
        let mut it = self.entries.iter();
        model.visit_mut(&mut |_, p| {
            let e = it.next().expect("layout checked");
            let data = e.data.iter().map(|&v| T::of(v as f64)).collect();
            p.value = Tensor::new(e.shape.clone(), data).expect("shape checked");
        });
        Ok(model)
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut offset = 0;
        let mut tensors = Vec::with_capacity(self.entries.len());
        let mut blob = Vec::new();
        for e in &self.entries {
            tensors.push(ManifestEntry {
                name: e.name.clone(),
                shape: e.shape.clone(),
                offset,
                kind: e.kind,
            });
            offset += e.data.len();
            for v in &e.data {
                blob.extend_from_slice(&v.to_le_bytes());
            }
        }
        let manifest = Manifest {
            format_version: FORMAT_VERSION,
            config: self.config.clone(),
            tensors,
        };
        let mut json = serde_json::to_string_pretty(&manifest)
            .map_err(|e| Error::CheckpointManifest(e.to_string()))?;
        json.push('\n');
        let mpath = dir.join(MANIFEST_FILE);
        fs::write(&mpath, json).map_err(|e| Error::io(mpath, e))?;
        let bpath = dir.join(BLOB_FILE);
        fs::write(&bpath, blob).map_err(|e| Error::io(bpath, e))
    }

    /// Reads and validates a checkpoint directory.
    ///
    /// Errors are checked in this order: unreadable or malformed manifest,
    /// format version, parameter names, parameter shapes, offsets, blob size.
    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let mpath = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
        let value: serde_json::Value =
            serde_json::from_str(&text).map_err(|e| Error::CheckpointManifest(e.to_string()))?;
        let found = value
            .get("format_version")
            .and_then(|v| v.as_u64())
            .ok_or_else(|| Error::CheckpointManifest("missing format_version".into()))?;
        if found != FORMAT_VERSION as u64 {
            return Err(Error::CheckpointVersion {
                found: found.min(u32::MAX as u64) as u32,
                expected: FORMAT_VERSION,
            });
        }
        let manifest: Manifest =
            serde_json::from_value(value).map_err(|e| Error::CheckpointManifest(e.to_string()))?;
        let model = HourglassModel::<f32>::new(manifest.config.clone(), 0)
            .map_err(|e| Error::CheckpointManifest(e.to_string()))?;
        check_layout(
            &model,
            manifest
                .tensors
                .iter()
                .map(|t| (t.name.as_str(), t.shape.as_slice())),
        )?;
        let mut expected = 0;
        for t in &manifest.tensors {
            if t.offset != expected {
                return Err(Error::CheckpointManifest(format!(
                    "`{}` starts at offset {}, expected {expected}",
                    t.name, t.offset
                )));
            }
            expected += t.shape.iter().product::<usize>();
        }
        let bpath = dir.join(BLOB_FILE);
        let blob = fs::read(&bpath).map_err(|e| Error::io(&bpath, e))?;
        let needed = expected as u64 * 4;
        if (blob.len() as u64) < needed {
            return Err(Error::CheckpointTruncated {
                needed,
                found: blob.len() as u64,
            });
        }
        if blob.len() as u64 != needed {
            return Err(Error::CheckpointManifest(format!(
                "{} trailing bytes in {BLOB_FILE}",
                blob.len() as u64 - needed
            )));
        }
        let mut kinds = Vec::new();
        model.visit(&mut |_, p| kinds.push(p.trainable));
        let mut entries = Vec::with_capacity(manifest.tensors.len());
        for (t, trainable) in manifest.tensors.into_iter().zip(kinds) {
            let want = if trainable {
                EntryKind::Param
            } else {
                EntryKind::Buffer
            };
            if t.kind != want {
                return Err(Error::CheckpointManifest(format!(
                    "`{}` is recorded as {:?}, expected {want:?}",
                    t.name, t.kind
                )));
            }
            let n: usize = t.shape.iter().product();
            let bytes = &blob[t.offset * 4..(t.offset + n) * 4];
            let data = bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            entries.push(Entry {
                name: t.name,
                shape: t.shape,
                kind: t.kind,
                data,
            });
        }
        Ok(Self {
            config: manifest.config,
            entries,
        })
    }
}

fn check_layout<'a, T: Float>(
    model: &HourglassModel<T>,
    entries: impl Iterator<Item = (&'a str, &'a [usize])>,
) -> Result<()> {
    let mut expected = Vec::new();
    model.visit(&mut |n, p| expected.push((n.to_string(), p.value.shape().to_vec())));
    let entries: Vec<_> = entries.collect();
    if entries.len() != expected.len() {
        return Err(Error::CheckpointNameMismatch(format!(
            "{} arrays stored, model has {}",
            entries.len(),
            expected.len()
        )));
    }
    for ((name, shape), (want_name, want_shape)) in entries.iter().zip(&expected) {
        if name != want_name {
            return Err(Error::CheckpointNameMismatch(format!(
                "found `{name}` where `{want_name}` was expected"
            )));
        }
        if *shape != want_shape.as_slice() {
            return Err(Error::CheckpointShapeMismatch {
                name: name.to_string(),
                manifest: shape.to_vec(),
                model: want_shape.clone(),
            });
        }
    }
    Ok(())
}

pub fn save_checkpoint<T: Float>(model: &HourglassModel<T>, dir: impl AsRef<Path>) -> Result<()> {
    Checkpoint::from_model(model).save(dir)
}

pub fn load_checkpoint<T: Float>(dir: impl AsRef<Path>) -> Result<HourglassModel<T>> {
    Checkpoint::load(dir)?.to_model()
}

/// Builds a model for `config` whose arrays are copied from `source`, except
/// for the final 1x1 convolution which keeps its fresh initialisation from
/// `seed`. Nothing is frozen.
pub fn transfer_init<T: Float>(
    config: &ModelConfig,
    source: &Checkpoint,
    seed: u64,
) -> Result<HourglassModel<T>> {
    let src = &source.config;
    let mut mismatches = Vec::new();
    if src.width != config.width {
        mismatches.push(format!("width {} vs {}", src.width, config.width));
    }
    if src.depth != config.depth {
        mismatches.push(format!("depth {} vs {}", src.depth, config.depth));
    }
    if src.input_size != config.input_size {
        mismatches.push(format!(
            "input size {} vs {}",
            src.input_size, config.input_size
        ));
    }
    if src.block != config.block {
        mismatches.push(format!("block {:?} vs {:?}", src.block, config.block));
    }
    if !mismatches.is_empty() {
        return Err(Error::IncompatibleCheckpoint(mismatches.join(", ")));
    }
    let mut model = HourglassModel::<T>::new(config.clone(), seed)?;
    let mut failure = None;
    model.visit_mut(&mut |name, p| {
        if name.starts_with(HEAD_PREFIX) || failure.is_some() {
            return;
        }
        match source.entry(name) {
            Some(e) if e.shape == p.value.shape() => {
                let data = e.data.iter().map(|&v| T::of(v as f64)).collect();
                p.value = Tensor::new(e.shape.clone(), data).expect("shape checked");
            }
            Some(e) => {
                failure = Some(Error::IncompatibleCheckpoint(format!(
                    "`{name}` has shape {:?}, expected {:?}",
                    e.shape,
                    p.value.shape()
                )))
            }
            None => {
                failure = Some(Error::IncompatibleCheckpoint(format!(
                    "`{name}` is missing"
                )))
            }
        }
    });
    match failure {
        Some(e) => Err(e),
        None => Ok(model),
    }
}
