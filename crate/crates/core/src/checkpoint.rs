//! Self-describing checkpoint container.
//!
//! Layout: the 8-byte magic `SYNTHCKP`, a little-endian `u64` header length,
//! the JSON header, then every tensor listed in the header as contiguous
//! little-endian values of the header's dtype.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufReader, Read, Write};
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use crate::dataset::ClassId;
use crate::diffusion::{PredictionType, ScheduleParams};
use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::scalar::{read_le, Dtype, Scalar};

pub const MAGIC: &[u8; 8] = b"SYNTHCKP";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckpointKind {
    Denoiser,
    ControlAdapter,
    Segmenter,
    FeatureExtractor,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorInfo {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub kind: CheckpointKind,
    pub dtype: Dtype,
    /// Kind-specific architecture descriptor.
    pub arch: serde_json::Value,
    #[serde(default)]
    pub prediction_type: Option<PredictionType>,
    #[serde(default)]
    pub schedule: Option<ScheduleParams>,
    #[serde(default)]
    pub class_id: Option<ClassId>,
    #[serde(default)]
    pub prompts: Vec<String>,
    #[serde(default)]
    pub training: serde_json::Value,
    pub seed: u64,
    #[serde(default)]
    pub extra: BTreeMap<String, serde_json::Value>,
    pub tensors: Vec<TensorInfo>,
}

impl CheckpointHeader {
    pub fn new(kind: CheckpointKind, dtype: Dtype, arch: serde_json::Value, seed: u64) -> Self {
        CheckpointHeader {
            format_version: FORMAT_VERSION,
            kind,
            dtype,
            arch,
            prediction_type: None,
            schedule: None,
            class_id: None,
            prompts: Vec::new(),
            training: serde_json::Value::Null,
            seed,
            extra: BTreeMap::new(),
            tensors: Vec::new(),
        }
    }
}

pub fn save<T: Scalar>(
    path: &Path,
    header: &CheckpointHeader,
    params: &ParamStore<T>,
) -> Result<()> {
    let mut header = header.clone();
    header.dtype = T::DTYPE;
    header.tensors = params
        .iter()
        .map(|(n, t)| TensorInfo {
            name: n.to_string(),
            shape: t.shape().to_vec(),
        })
        .collect();
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut buf = Vec::with_capacity(16 + json.len() + params.num_elements() * T::DTYPE.size());
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
    buf.extend_from_slice(&json);
    for t in params.tensors() {
        for &v in t.iter() {
            v.write_le(&mut buf);
        }
    }
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut f = File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

fn read_header_from(path: &Path, r: &mut impl Read) -> Result<CheckpointHeader> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(|e| Error::io(path, e))?;
    if &magic != MAGIC {
        return Err(Error::format(path, "not a checkpoint (bad magic)"));
    }
    let mut len = [0u8; 8];
    r.read_exact(&mut len).map_err(|e| Error::io(path, e))?;
    let len = u64::from_le_bytes(len) as usize;
    if len > 64 << 20 {
        return Err(Error::format(path, "implausible header length"));
    }
    let mut json = vec![0u8; len];
    r.read_exact(&mut json).map_err(|e| Error::io(path, e))?;
    let header: CheckpointHeader =
        serde_json::from_slice(&json).map_err(|e| Error::format(path, e.to_string()))?;
    if header.format_version != FORMAT_VERSION {
        return Err(Error::format(
            path,
            format!("unsupported format version {}", header.format_version),
        ));
    }
    Ok(header)
}

/// Reads only the header; the payload is never touched.
pub fn read_header(path: &Path) -> Result<CheckpointHeader> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    read_header_from(path, &mut BufReader::new(f))
}

/// Reads header and parameters, converting the payload to `T`.
pub fn load<T: Scalar>(path: &Path) -> Result<(CheckpointHeader, ParamStore<T>)> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(f);
    let header = read_header_from(path, &mut r)?;
    let mut payload = Vec::new();
    r.read_to_end(&mut payload)
        .map_err(|e| Error::io(path, e))?;
    let size = header.dtype.size();
    let total: usize = header
        .tensors
        .iter()
        .map(|t| t.shape.iter().product::<usize>())
        .sum();
    if payload.len() != total * size {
        return Err(Error::format(
            path,
            format!(
                "payload has {} bytes, header implies {}",
                payload.len(),
                total * size
            ),
        ));
    }
    let mut names = Vec::new();
    let mut tensors = Vec::new();
    let mut off = 0;
    for info in &header.tensors {
        let n: usize = info.shape.iter().product();
        let values: Vec<T> = (0..n)
            .map(|i| read_le(&payload[off + i * size..], header.dtype))
            .collect();
        off += n * size;
        names.push(info.name.clone());
        tensors.push(ArrayD::from_shape_vec(IxDyn(&info.shape), values).unwrap());
    }
    Ok((header, ParamStore::from_parts(names, tensors)))
}

/// Checks a loaded store against the shapes an architecture expects.
pub(crate) fn check_shapes<T: Scalar>(
    path: &Path,
    store: &ParamStore<T>,
    expected: &[(String, Vec<usize>)],
) -> Result<()> {
    if store.len() != expected.len() {
        return Err(Error::format(
            path,
            format!(
                "{} tensors stored, architecture has {}",
                store.len(),
                expected.len()
            ),
        ));
    }
    for ((name, t), (en, es)) in store.iter().zip(expected) {
        if name != en || t.shape() != es.as_slice() {
            return Err(Error::format(
                path,
                format!(
                    "tensor {name}{:?} does not match expected {en}{es:?}",
                    t.shape()
                ),
            ));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::init_uniform;
    use rand::SeedableRng;

    #[test]
    fn header_round_trips_without_payload() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::<f32>::new();
        store.insert("a", init_uniform(&[2, 3], 3, &mut rng));
        store.insert("b", init_uniform(&[4], 1, &mut rng));
        let mut header = CheckpointHeader::new(
            CheckpointKind::Denoiser,
            Dtype::F32,
            serde_json::json!({"k": 1}),
            9,
        );
        header.class_id = Some(2);
        header.prediction_type = Some(PredictionType::V);
        save(&path, &header, &store).unwrap();

        // Truncating the payload must not affect header reads.
        let bytes = fs::read(&path).unwrap();
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let trunc = dir.path().join("t.ckpt");
        fs::write(&trunc, &bytes[..16 + hlen]).unwrap();
        let h = read_header(&trunc).unwrap();
        assert_eq!(h.class_id, Some(2));
        assert_eq!(h.prediction_type, Some(PredictionType::V));
        assert_eq!(h.tensors.len(), 2);
        assert!(load::<f32>(&trunc).is_err());

        let (h2, loaded) = load::<f32>(&path).unwrap();
        assert_eq!(h2, h);
        assert_eq!(loaded, store);
        let (_, widened) = load::<f64>(&path).unwrap();
        assert_eq!(
            widened.get(crate::nn::ParamId(0))[[1, 2]],
            store.get(crate::nn::ParamId(0))[[1, 2]] as f64
        );
    }

    #[test]
    fn rejects_foreign_files() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x");
        fs::write(&path, b"hello world, not a checkpoint").unwrap();
        assert!(matches!(read_header(&path), Err(Error::Format { .. })));
        assert!(matches!(
            read_header(&dir.path().join("missing")),
            Err(Error::Io { .. })
        ));
    }
}
