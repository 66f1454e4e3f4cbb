//! Weight container: a directory holding `manifest.json` and `weights.bin`.
//!
//! The blob is the concatenation of row-major little-endian `f32` arrays.
//! Each manifest entry records name, shape, dtype, byte offset, byte length
//! and the CRC32 of its bytes. Loading verifies every entry; any mismatch is
//! [`Error::Corrupt`].

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::network::{Model, ModelConfig};
use crate::tensor::Tensor;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const BLOB_FILE: &str = "weights.bin";
pub const DTYPE: &str = "float32";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArrayEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub byte_offset: u64,
    pub byte_length: u64,
    pub crc32: u32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub arrays: Vec<ArrayEntry>,
    #[serde(default)]
    pub metadata: BTreeMap<String, Value>,
}

/// Named `f32` arrays plus free-form metadata.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Container {
    pub arrays: Vec<(String, Tensor<f32>)>,
    pub metadata: BTreeMap<String, Value>,
}

fn corrupt<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Corrupt(msg.into()))
}

impl Container {
    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.arrays.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Manifest and blob bytes, without touching the filesystem.
    pub fn encode(&self) -> Result<(Manifest, Vec<u8>)> {
        let mut blob = Vec::new();
        let mut arrays = Vec::with_capacity(self.arrays.len());
        for (name, t) in &self.arrays {
            if arrays.iter().any(|e: &ArrayEntry| &e.name == name) {
                return Err(Error::Config(format!("duplicate array name {name}")));
            }
            let start = blob.len();
            for v in t.data() {
                blob.extend_from_slice(&v.to_le_bytes());
            }
            arrays.push(ArrayEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                dtype: DTYPE.into(),
                byte_offset: start as u64,
                byte_length: (blob.len() - start) as u64,
                crc32: crc32fast::hash(&blob[start..]),
            });
        }
        Ok((
            Manifest {
                arrays,
                metadata: self.metadata.clone(),
            },
            blob,
        ))
    }

    /// Verifies a manifest against its blob and rebuilds the arrays.
    pub fn decode(manifest: Manifest, blob: &[u8]) -> Result<Self> {
        let mut spans: Vec<(u64, u64, &str)> = Vec::new();
        let mut arrays = Vec::with_capacity(manifest.arrays.len());
        for e in &manifest.arrays {
            if e.dtype != DTYPE {
                return corrupt(format!("{}: unsupported dtype {}", e.name, e.dtype));
            }
            let numel = e.shape.iter().try_fold(1u64, |a, &d| a.checked_mul(d as u64));
            if numel.and_then(|n| n.checked_mul(4)) != Some(e.byte_length) {
                return corrupt(format!("{}: byte length {} does not match shape {:?}", e.name, e.byte_length, e.shape));
            }
            let end = match e.byte_offset.checked_add(e.byte_length) {
                Some(end) if end <= blob.len() as u64 => end,
                _ => return corrupt(format!("{}: span exceeds blob of {} bytes", e.name, blob.len())),
            };
            if let Some((_, _, other)) = spans.iter().find(|&&(s, t, _)| e.byte_offset < t && s < end) {
                return corrupt(format!("{} overlaps {other}", e.name));
            }
            spans.push((e.byte_offset, end, &e.name));
            let bytes = &blob[e.byte_offset as usize..end as usize];
            if crc32fast::hash(bytes) != e.crc32 {
                return corrupt(format!("{}: checksum mismatch", e.name));
            }
            let data = bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            let t = Tensor::new(e.shape.clone(), data).map_err(|err| Error::Corrupt(format!("{}: {err}", e.name)))?;
            arrays.push((e.name.clone(), t));
        }
        Ok(Self {
            arrays,
            metadata: manifest.metadata,
        })
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let (manifest, blob) = self.encode()?;
        fs::create_dir_all(dir)?;
        let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Data(e.to_string()))?;
        fs::write(dir.join(BLOB_FILE), blob)?;
        fs::write(dir.join(MANIFEST_FILE), text)?;
        Ok(())
    }

    /// Missing files are I/O errors; malformed or inconsistent content is
    /// [`Error::Corrupt`].
    pub fn load(dir: &Path) -> Result<Self> {
        let raw = fs::read(dir.join(MANIFEST_FILE))?;
        let blob = fs::read(dir.join(BLOB_FILE))?;
        let text = String::from_utf8(raw).map_err(|_| Error::Corrupt("manifest is not UTF-8".into()))?;
        let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::Corrupt(format!("manifest: {e}")))?;
        Self::decode(manifest, &blob)
    }
}

const CONFIG_KEY: &str = "model_config";

/// Every parameter and buffer of `model`, with its config in the metadata.
pub fn model_container(model: &Model<f32>) -> Result<Container> {
    let mut metadata = BTreeMap::new();
    let cfg = serde_json::to_value(model.config()).map_err(|e| Error::Data(e.to_string()))?;
    metadata.insert(CONFIG_KEY.into(), cfg);
    Ok(Container {
        arrays: model.params.iter().map(|(_, e)| (e.name.clone(), e.value.clone())).collect(),
        metadata,
    })
}

pub fn save_model(model: &Model<f32>, dir: &Path) -> Result<()> {
    model_container(model)?.save(dir)
}

/// Rebuilds the layout from the stored config and fills every entry.
pub fn model_from_container(c: &Container) -> Result<Model<f32>> {
    let cfg: ModelConfig = c
        .metadata
        .get(CONFIG_KEY)
        .cloned()
        .ok_or_else(|| Error::Corrupt("container has no model config".into()))
        .and_then(|v| serde_json::from_value(v).map_err(|e| Error::Corrupt(format!("model config: {e}"))))?;
    let mut model = Model::<f32>::new(&cfg, 0)?;
    if c.arrays.len() != model.params.len() {
        return corrupt(format!("expected {} arrays, found {}", model.params.len(), c.arrays.len()));
    }
    for (name, t) in &c.arrays {
        let id = model
            .params
            .id(name)
            .ok_or_else(|| Error::Corrupt(format!("unknown array {name}")))?;
        model
            .params
            .set(id, t.clone())
            .map_err(|e| Error::Corrupt(format!("{name}: {e}")))?;
    }
    Ok(model)
}

pub fn load_model(dir: &Path) -> Result<Model<f32>> {
    model_from_container(&Container::load(dir)?)
}

const LOGITS_KEY: &str = "logits";
const IDS_KEY: &str = "ids";

/// Precomputed teacher logits: row `i` belongs to item `ids[i]`.
#[derive(Clone, Debug, PartialEq)]
pub struct TeacherLogits {
    pub ids: Vec<String>,
    /// `N × n_classes`.
    pub logits: Tensor<f32>,
}

impl TeacherLogits {
    pub fn new(ids: Vec<String>, logits: Tensor<f32>) -> Result<Self> {
        let [n, _] = logits.dims2()?;
        if n != ids.len() {
            return Err(Error::Data(format!("{} ids for {n} logit rows", ids.len())));
        }
        Ok(Self { ids, logits })
    }

    pub fn n_classes(&self) -> usize {
        self.logits.shape()[1]
    }

    pub fn row(&self, id: &str) -> Option<&[f32]> {
        let c = self.n_classes();
        self.ids
            .iter()
            .position(|i| i == id)
            .map(|r| &self.logits.data()[r * c..(r + 1) * c])
    }

    pub fn to_container(&self) -> Container {
        let mut metadata = BTreeMap::new();
        metadata.insert(IDS_KEY.into(), Value::from(self.ids.clone()));
        Container {
            arrays: vec![(LOGITS_KEY.into(), self.logits.clone())],
            metadata,
        }
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let logits = c
            .get(LOGITS_KEY)
            .cloned()
            .ok_or_else(|| Error::Corrupt("teacher file has no logits array".into()))?;
        let ids: Vec<String> = c
            .metadata
            .get(IDS_KEY)
            .cloned()
            .ok_or_else(|| Error::Corrupt("teacher file has no id list".into()))
            .and_then(|v| serde_json::from_value(v).map_err(|e| Error::Corrupt(format!("id list: {e}"))))?;
        logits.dims2().map_err(|e| Error::Corrupt(e.to_string()))?;
        Self::new(ids, logits).map_err(|e| Error::Corrupt(e.to_string()))
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        self.to_container().save(dir)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        Self::from_container(&Container::load(dir)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Container {
        let mut c = Container::default();
        c.arrays.push(("a".into(), Tensor::new(vec![2, 3], vec![1.0, -0.0, f32::MIN_POSITIVE, 3.5, -7.25, 1e-30]).unwrap()));
        c.arrays.push(("b".into(), Tensor::new(vec![1], vec![f32::MAX]).unwrap()));
        c.metadata.insert("note".into(), Value::from("x"));
        c
    }

    #[test]
    fn encode_decode_is_bit_identical() {
        let c = sample();
        let (m, blob) = c.encode().unwrap();
        assert_eq!(m.arrays[1].byte_offset, 24);
        assert_eq!(blob.len(), 28);
        let back = Container::decode(m, &blob).unwrap();
        for ((_, x), (_, y)) in c.arrays.iter().zip(&back.arrays) {
            let bx: Vec<u32> = x.data().iter().map(|v| v.to_bits()).collect();
            let by: Vec<u32> = y.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(bx, by);
        }
        assert_eq!(back.metadata, c.metadata);
    }

    #[test]
    fn flipped_byte_fails_checksum() {
        let (m, mut blob) = sample().encode().unwrap();
        blob[5] ^= 0x10;
        assert!(matches!(Container::decode(m, &blob), Err(Error::Corrupt(_))));
    }

    #[test]
    fn inconsistent_manifests_are_corrupt() {
        let (m, blob) = sample().encode().unwrap();
        let mut bad = m.clone();
        bad.arrays[0].shape = vec![7];
        assert!(matches!(Container::decode(bad, &blob), Err(Error::Corrupt(_))));
        let mut bad = m.clone();
        bad.arrays[1].byte_offset = 20;
        assert!(matches!(Container::decode(bad, &blob), Err(Error::Corrupt(_))));
        let mut bad = m.clone();
        bad.arrays[1].dtype = "float64".into();
        assert!(matches!(Container::decode(bad, &blob), Err(Error::Corrupt(_))));
        assert!(matches!(Container::decode(m, &blob[..20]), Err(Error::Corrupt(_))));
    }

    #[test]
    fn teacher_rows_follow_ids() {
        let t = TeacherLogits::new(vec!["x".into(), "y".into()], Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap()).unwrap();
        let back = TeacherLogits::from_container(&t.to_container()).unwrap();
        assert_eq!(back.row("y").unwrap(), &[3.0, 4.0]);
        assert!(back.row("z").is_none());
        assert!(TeacherLogits::new(vec!["x".into()], t.logits.clone()).is_err());
    }
}
