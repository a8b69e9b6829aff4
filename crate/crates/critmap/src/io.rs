//! Bit-exact serialization: model bundles, dataset files, profile files,
//! CSV export, and dataset subsampling.
//!
//! Model bundle (`.lcm`), all integers little-endian:
//!
//! ```text
//! 0   magic "LCM1"
//! 4   format_version: u32 (currently 1)
//! 8   metadata_len: u64
//! 16  metadata: UTF-8 JSON (graph topology, hyperparams, init specs,
//!     dtype, tensor table of name -> {shape, dtype, offset, len})
//!     zero padding to the next 64-byte boundary
//! ..  tensor blobs: raw little-endian floats; each blob's offset is
//!     relative to the (64-aligned) blob region start and is itself a
//!     multiple of 64
//! ```
//!
//! Dataset file (`.lcd`):
//!
//! ```text
//! 0   magic "LCD1"
//! 4   n, channels, height, width, num_classes: u32 each
//! 24  pixels: n*c*h*w f32 in [0, 1], sample-major
//! ..  labels: n u16
//! ```
//!
//! The file length must match the header arithmetic exactly. Profiles are
//! JSON documents; floats are written with shortest round-trip precision,
//! so reloads reproduce every value bit for bit. All loaders reject
//! malformed input with a typed error and return no partial state.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::criticality::CriticalityProfile;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{LayerKind, LayerParams, LayerSpec, ModelGraph};
use crate::rng::Rng;
use crate::tensor::{Dtype, Tensor};

const MODEL_MAGIC: [u8; 4] = *b"LCM1";
const DATASET_MAGIC: [u8; 4] = *b"LCD1";
const MODEL_VERSION: u32 = 1;
const BLOB_ALIGN: usize = 64;

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    dtype: Dtype,
    /// Byte offset relative to the blob region start; multiple of 64.
    offset: u64,
    /// Blob length in bytes.
    len: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct ModelMetadata {
    model_id: String,
    dtype: Dtype,
    num_classes: usize,
    input_shape: [usize; 3],
    layers: Vec<LayerSpec>,
    tensors: Vec<TensorEntry>,
}

fn align_up(x: usize) -> usize {
    x.div_ceil(BLOB_ALIGN) * BLOB_ALIGN
}

/// Serialize a model to bundle bytes.
pub fn model_to_bytes(model: &ModelGraph) -> Result<Vec<u8>> {
    let mut entries = Vec::new();
    let mut blobs: Vec<&Tensor> = Vec::new();
    let mut cursor = 0usize;
    for layer in &model.layers {
        if let Some(params) = model.params.get(&layer.id) {
            for (name, tensor) in params.named() {
                let offset = align_up(cursor);
                let len = tensor.len() * tensor.dtype().size_bytes();
                entries.push(TensorEntry {
                    name: format!("{}.{name}", layer.id),
                    shape: tensor.shape().to_vec(),
                    dtype: tensor.dtype(),
                    offset: offset as u64,
                    len: len as u64,
                });
                blobs.push(tensor);
                cursor = offset + len;
            }
        }
    }
    let metadata = ModelMetadata {
        model_id: model.id.clone(),
        dtype: model.dtype,
        num_classes: model.num_classes,
        input_shape: model.input_shape,
        layers: model.layers.clone(),
        tensors: entries,
    };
    let meta_bytes = serde_json::to_vec(&metadata).map_err(|e| Error::Metadata(e.to_string()))?;

    let blob_start = align_up(16 + meta_bytes.len());
    let mut out = Vec::with_capacity(blob_start + cursor);
    out.extend_from_slice(&MODEL_MAGIC);
    out.extend_from_slice(&MODEL_VERSION.to_le_bytes());
    out.extend_from_slice(&(meta_bytes.len() as u64).to_le_bytes());
    out.extend_from_slice(&meta_bytes);
    out.resize(blob_start, 0);
    for (entry, tensor) in metadata.tensors.iter().zip(&blobs) {
        out.resize(blob_start + entry.offset as usize, 0);
        out.extend_from_slice(&tensor.to_le_bytes());
    }
    Ok(out)
}

/// Parse bundle bytes back into a model.
pub fn model_from_bytes(bytes: &[u8]) -> Result<ModelGraph> {
    if bytes.len() < 16 {
        return Err(Error::Truncated("bundle shorter than its header".to_string()));
    }
    let magic: [u8; 4] = bytes[0..4].try_into().unwrap();
    if magic != MODEL_MAGIC {
        return Err(Error::BadMagic {
            expected: MODEL_MAGIC,
            found: magic,
        });
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != MODEL_VERSION {
        return Err(Error::VersionMismatch {
            found: version,
            supported: MODEL_VERSION,
        });
    }
    let meta_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let meta_end = 16usize
        .checked_add(meta_len)
        .ok_or_else(|| Error::Truncated("metadata length overflows".to_string()))?;
    if meta_end > bytes.len() {
        return Err(Error::Truncated(format!(
            "metadata declares {meta_len} bytes but only {} remain",
            bytes.len() - 16
        )));
    }
    let metadata: ModelMetadata = serde_json::from_slice(&bytes[16..meta_end])
        .map_err(|e| Error::Metadata(e.to_string()))?;

    let blob_start = align_up(meta_end);
    let blob_region = bytes.len().saturating_sub(blob_start);
    let mut tensors: BTreeMap<&str, Tensor> = BTreeMap::new();
    for entry in &metadata.tensors {
        if entry.offset % BLOB_ALIGN as u64 != 0 {
            return Err(Error::MisalignedBlob {
                name: entry.name.clone(),
                offset: entry.offset,
            });
        }
        let expect_len = entry.shape.iter().product::<usize>() * entry.dtype.size_bytes();
        if entry.len as usize != expect_len {
            return Err(Error::shape(format!(
                "tensor {}: blob of {} bytes does not match shape {:?} with dtype {}",
                entry.name, entry.len, entry.shape, entry.dtype
            )));
        }
        let end = entry
            .offset
            .checked_add(entry.len)
            .ok_or_else(|| Error::Truncated(format!("tensor {} range overflows", entry.name)))?;
        if end as usize > blob_region {
            return Err(Error::Truncated(format!(
                "tensor {} extends past end of file",
                entry.name
            )));
        }
        let start = blob_start + entry.offset as usize;
        let tensor =
            Tensor::from_le_bytes(&entry.shape, entry.dtype, &bytes[start..start + entry.len as usize])?;
        tensors.insert(entry.name.as_str(), tensor);
    }

    let mut take = |layer: &str, name: &str| -> Result<Tensor> {
        tensors
            .remove(format!("{layer}.{name}").as_str())
            .ok_or_else(|| Error::Metadata(format!("tensor {layer}.{name} missing from table")))
    };
    let mut params = BTreeMap::new();
    for layer in &metadata.layers {
        let p = match &layer.kind {
            LayerKind::Conv { bias, .. } => Some(LayerParams::Conv {
                weight: take(&layer.id, "weight")?,
                bias: if *bias {
                    Some(take(&layer.id, "bias")?)
                } else {
                    None
                },
            }),
            LayerKind::Linear { bias, .. } => Some(LayerParams::Linear {
                weight: take(&layer.id, "weight")?,
                bias: if *bias {
                    Some(take(&layer.id, "bias")?)
                } else {
                    None
                },
            }),
            LayerKind::Batchnorm { .. } => Some(LayerParams::Batchnorm {
                gamma: take(&layer.id, "gamma")?,
                beta: take(&layer.id, "beta")?,
                running_mean: take(&layer.id, "running_mean")?,
                running_var: take(&layer.id, "running_var")?,
            }),
            _ => None,
        };
        if let Some(p) = p {
            params.insert(layer.id.clone(), p);
        }
    }

    ModelGraph::new(
        metadata.model_id,
        metadata.layers,
        params,
        metadata.num_classes,
        metadata.input_shape,
        metadata.dtype,
    )
}

pub fn save_model(model: &ModelGraph, path: &Path) -> Result<()> {
    fs::write(path, model_to_bytes(model)?)?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<ModelGraph> {
    model_from_bytes(&fs::read(path)?)
}

/// Serialize a dataset to `.lcd` bytes. Pixels are stored as f32.
pub fn dataset_to_bytes(dataset: &Dataset) -> Result<Vec<u8>> {
    let [c, h, w] = dataset.sample_shape();
    let n = dataset.len();
    for v in [n, c, h, w, dataset.num_classes] {
        if v > u32::MAX as usize {
            return Err(Error::param(format!("dimension {v} exceeds u32 range")));
        }
    }
    let pixels = dataset.images.cast(Dtype::F32);
    let mut out = Vec::with_capacity(24 + pixels.len() * 4 + n * 2);
    out.extend_from_slice(&DATASET_MAGIC);
    for v in [n, c, h, w, dataset.num_classes] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    out.extend_from_slice(&pixels.to_le_bytes());
    for &label in &dataset.labels {
        out.extend_from_slice(&label.to_le_bytes());
    }
    Ok(out)
}

/// Parse `.lcd` bytes back into a dataset.
pub fn dataset_from_bytes(bytes: &[u8]) -> Result<Dataset> {
    if bytes.len() < 24 {
        return Err(Error::Truncated("dataset shorter than its header".to_string()));
    }
    let magic: [u8; 4] = bytes[0..4].try_into().unwrap();
    if magic != DATASET_MAGIC {
        return Err(Error::BadMagic {
            expected: DATASET_MAGIC,
            found: magic,
        });
    }
    let mut fields = [0usize; 5];
    for (i, f) in fields.iter_mut().enumerate() {
        *f = u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize;
    }
    let [n, c, h, w, num_classes] = fields;
    let pixel_bytes = n
        .checked_mul(c)
        .and_then(|v| v.checked_mul(h))
        .and_then(|v| v.checked_mul(w))
        .and_then(|v| v.checked_mul(4))
        .ok_or_else(|| Error::Truncated("pixel count overflows".to_string()))?;
    let want = 24 + pixel_bytes + n * 2;
    if bytes.len() != want {
        return Err(Error::Truncated(format!(
            "file length {} does not match header arithmetic {want}",
            bytes.len()
        )));
    }
    if num_classes == 0 || num_classes > u16::MAX as usize + 1 {
        return Err(Error::Metadata(format!("invalid class count {num_classes}")));
    }
    let images = Tensor::from_le_bytes(&[n, c, h, w], Dtype::F32, &bytes[24..24 + pixel_bytes])?;
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let off = 24 + pixel_bytes + 2 * i;
        let label = u16::from_le_bytes([bytes[off], bytes[off + 1]]);
        if label as usize >= num_classes {
            return Err(Error::LabelOutOfRange {
                label: label as u32,
                num_classes: num_classes as u32,
            });
        }
        labels.push(label);
    }
    Dataset::new(images, labels, num_classes)
}

pub fn save_dataset(dataset: &Dataset, path: &Path) -> Result<()> {
    fs::write(path, dataset_to_bytes(dataset)?)?;
    Ok(())
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    dataset_from_bytes(&fs::read(path)?)
}

/// Serialize a profile as a JSON document with round-trip float precision.
pub fn profile_to_string(profile: &CriticalityProfile) -> Result<String> {
    serde_json::to_string_pretty(profile).map_err(|e| Error::Metadata(e.to_string()))
}

pub fn profile_from_str(text: &str) -> Result<CriticalityProfile> {
    serde_json::from_str(text).map_err(|e| Error::Metadata(e.to_string()))
}

pub fn save_profile(profile: &CriticalityProfile, path: &Path) -> Result<()> {
    fs::write(path, profile_to_string(profile)?)?;
    Ok(())
}

pub fn load_profile(path: &Path) -> Result<CriticalityProfile> {
    profile_from_str(&fs::read_to_string(path)?)
}

/// CSV export of one profile: layer_id,mean,std,stderr,trial_0..trial_k.
pub fn profile_to_csv(profile: &CriticalityProfile) -> String {
    let trials = profile
        .entries
        .first()
        .map(|e| e.per_trial.len())
        .unwrap_or(0);
    let mut out = String::from("layer_id,mean,std,stderr");
    for t in 0..trials {
        out.push_str(&format!(",trial_{t}"));
    }
    out.push('\n');
    for e in &profile.entries {
        out.push_str(&format!("{},{},{},{}", e.layer_id, e.mean, e.std, e.stderr));
        for v in &e.per_trial {
            out.push_str(&format!(",{v}"));
        }
        out.push('\n');
    }
    out
}

/// `n` distinct indices drawn uniformly without replacement from
/// `0..dataset_len` by a seeded partial Fisher-Yates shuffle.
pub fn subsample(dataset_len: usize, n: usize, seed: u64) -> Result<Vec<usize>> {
    if n > dataset_len {
        return Err(Error::param(format!(
            "cannot draw {n} samples from a dataset of {dataset_len}"
        )));
    }
    let mut rng = Rng::new(seed);
    let mut idx: Vec<usize> = (0..dataset_len).collect();
    for i in 0..n {
        let j = i + rng.next_below((dataset_len - i) as u64) as usize;
        idx.swap(i, j);
    }
    idx.truncate(n);
    Ok(idx)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_dataset, SynthConfig};
    use crate::model::{build_model, ArchConfig};

    #[test]
    fn model_round_trip_is_bit_exact() {
        let model = build_model(&ArchConfig::mini(4, [3, 16, 16]), 42).unwrap();
        let bytes = model_to_bytes(&model).unwrap();
        let back = model_from_bytes(&bytes).unwrap();
        assert_eq!(back.id, model.id);
        assert_eq!(back.layers, model.layers);
        assert_eq!(back.params, model.params);
        // Forward outputs bit-identical after the round trip.
        let mut rng = Rng::new(1);
        let batch = Tensor::rand_uniform(&[2, 3, 16, 16], 0.0, 1.0, &mut rng, Dtype::F32).unwrap();
        assert_eq!(back.forward(&batch).unwrap(), model.forward(&batch).unwrap());
        // Serialization itself is deterministic.
        assert_eq!(model_to_bytes(&back).unwrap(), bytes);
    }

    #[test]
    fn dataset_round_trip_is_bit_exact() {
        let data = synth_dataset(&SynthConfig::new(3, 30, 6), 9).unwrap();
        let bytes = dataset_to_bytes(&data).unwrap();
        let back = dataset_from_bytes(&bytes).unwrap();
        assert_eq!(back, data);
    }

    #[test]
    fn malformed_model_files_rejected_with_typed_errors() {
        let model = build_model(&ArchConfig::mini(2, [3, 8, 8]), 7).unwrap();
        let good = model_to_bytes(&model).unwrap();

        let mut bad_magic = good.clone();
        bad_magic[0..4].copy_from_slice(b"NOPE");
        assert!(matches!(
            model_from_bytes(&bad_magic),
            Err(Error::BadMagic { .. })
        ));

        let truncated = &good[..good.len() - 8];
        assert!(matches!(
            model_from_bytes(truncated),
            Err(Error::Truncated(_))
        ));

        let mut version_bump = good.clone();
        version_bump[4..8].copy_from_slice(&2u32.to_le_bytes());
        assert!(matches!(
            model_from_bytes(&version_bump),
            Err(Error::VersionMismatch { found: 2, .. })
        ));
    }

    #[test]
    fn misaligned_and_misshaped_blobs_rejected() {
        let model = build_model(&ArchConfig::mini(2, [3, 8, 8]), 7).unwrap();
        let good = model_to_bytes(&model).unwrap();
        let meta_len = u64::from_le_bytes(good[8..16].try_into().unwrap()) as usize;
        let meta: ModelMetadata = serde_json::from_slice(&good[16..16 + meta_len]).unwrap();

        // Rebuild with a nudged offset: alignment violation.
        let mut meta2: ModelMetadata = serde_json::from_slice(&good[16..16 + meta_len]).unwrap();
        meta2.tensors[0].offset += 4;
        assert!(matches!(
            model_from_bytes(&rebuild(&good, &meta2)),
            Err(Error::MisalignedBlob { .. })
        ));

        // Shape that no longer matches the blob length.
        let mut meta3: ModelMetadata = serde_json::from_slice(&good[16..16 + meta_len]).unwrap();
        meta3.tensors[0].shape[0] += 1;
        assert!(matches!(
            model_from_bytes(&rebuild(&good, &meta3)),
            Err(Error::Shape(_))
        ));

        // Keep the original parseable.
        assert!(model_from_bytes(&rebuild(&good, &meta)).is_ok());
    }

    fn rebuild(original: &[u8], meta: &ModelMetadata) -> Vec<u8> {
        // Re-serialize metadata, repad, keep the original blob region.
        let old_meta_len = u64::from_le_bytes(original[8..16].try_into().unwrap()) as usize;
        let old_blob_start = align_up(16 + old_meta_len);
        let meta_bytes = serde_json::to_vec(meta).unwrap();
        let blob_start = align_up(16 + meta_bytes.len());
        let mut out = Vec::new();
        out.extend_from_slice(&original[0..8]);
        out.extend_from_slice(&(meta_bytes.len() as u64).to_le_bytes());
        out.extend_from_slice(&meta_bytes);
        out.resize(blob_start, 0);
        out.extend_from_slice(&original[old_blob_start..]);
        out
    }

    #[test]
    fn oversized_label_rejected() {
        let data = synth_dataset(&SynthConfig::new(2, 4, 4), 3).unwrap();
        let mut bytes = dataset_to_bytes(&data).unwrap();
        let label_off = bytes.len() - 2 * data.len();
        bytes[label_off..label_off + 2].copy_from_slice(&9u16.to_le_bytes());
        assert!(matches!(
            dataset_from_bytes(&bytes),
            Err(Error::LabelOutOfRange { label: 9, .. })
        ));

        let mut short = dataset_to_bytes(&data).unwrap();
        short.pop();
        assert!(matches!(dataset_from_bytes(&short), Err(Error::Truncated(_))));

        let mut wrong_magic = dataset_to_bytes(&data).unwrap();
        wrong_magic[0] = b'X';
        assert!(matches!(
            dataset_from_bytes(&wrong_magic),
            Err(Error::BadMagic { .. })
        ));
    }

    #[test]
    fn subsample_contract() {
        // Full draw is a permutation.
        let mut all = subsample(10, 10, 1).unwrap();
        all.sort_unstable();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
        // Deterministic.
        assert_eq!(subsample(100, 7, 5).unwrap(), subsample(100, 7, 5).unwrap());
        // Distinct.
        let mut s = subsample(50, 25, 9).unwrap();
        s.sort_unstable();
        s.dedup();
        assert_eq!(s.len(), 25);
        // Too large.
        assert!(subsample(5, 6, 0).is_err());
    }

    #[test]
    fn subsample_single_draw_is_uniform() {
        let mut counts = [0u32; 10];
        for seed in 0..10_000u64 {
            counts[subsample(10, 1, seed).unwrap()[0]] += 1;
        }
        for &c in &counts {
            assert!((900..=1100).contains(&c), "counts {counts:?}");
        }
    }
}
