//! Named-tensor container used for checkpoints, bundles and the latent cache.
//!
//! Layout: the magic `TGTS`, a `u32` format version, a `u64` header length,
//! a JSON header (metadata, tensor table, SHA-256 of the data section), then
//! the data section. Values are little-endian and row-major, `f32` unless a
//! tensor's entry says `f64`.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"TGTS";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }
}

pub type TensorMap = BTreeMap<String, Tensor>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    F64,
}

impl DType {
    fn width(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct Entry {
    name: String,
    dtype: DType,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    meta: BTreeMap<String, serde_json::Value>,
    tensors: Vec<Entry>,
    data_len: usize,
    data_sha256: String,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TensorFile {
    pub meta: BTreeMap<String, serde_json::Value>,
    pub tensors: TensorMap,
}

impl TensorFile {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_meta(mut self, key: &str, value: impl Serialize) -> Self {
        self.meta
            .insert(key.to_string(), serde_json::to_value(value).expect("serializable meta"));
        self
    }

    pub fn insert_all(&mut self, prefix: &str, tensors: TensorMap) {
        for (name, t) in tensors {
            self.tensors.insert(format!("{prefix}{name}"), t);
        }
    }

    /// Tensors whose name starts with `prefix`, with the prefix stripped.
    pub fn subset(&self, prefix: &str) -> TensorMap {
        self.tensors
            .iter()
            .filter_map(|(k, v)| k.strip_prefix(prefix).map(|s| (s.to_string(), v.clone())))
            .collect()
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Binding(format!("missing tensor `{name}`")))
    }

    pub fn meta_str(&self, key: &str) -> Option<&str> {
        self.meta.get(key).and_then(|v| v.as_str())
    }

    pub fn to_bytes(&self, dtype: DType) -> Vec<u8> {
        let mut data = Vec::new();
        let mut entries = Vec::new();
        for (name, t) in &self.tensors {
            entries.push(Entry {
                name: name.clone(),
                dtype,
                shape: t.shape.clone(),
                offset: data.len(),
            });
            match dtype {
                DType::F32 => t.data.iter().for_each(|v| data.extend_from_slice(&(*v as f32).to_le_bytes())),
                DType::F64 => t.data.iter().for_each(|v| data.extend_from_slice(&v.to_le_bytes())),
            }
        }
        let header = Header {
            meta: self.meta.clone(),
            tensors: entries,
            data_len: data.len(),
            data_sha256: crate::rng::hash_bytes(&data),
        };
        let header = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(16 + header.len() + data.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&data);
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let corrupt = |message: String| Error::Corrupt {
            path: path.to_path_buf(),
            message,
        };
        if bytes.len() < 16 || &bytes[..4] != MAGIC {
            return Err(corrupt("missing tensor-file magic".into()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(Error::Version {
                found: version.to_string(),
                expected: FORMAT_VERSION.to_string(),
            });
        }
        let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let header_end = 16usize
            .checked_add(header_len)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| corrupt("truncated header".into()))?;
        let header: Header = serde_json::from_slice(&bytes[16..header_end])
            .map_err(|e| corrupt(format!("bad header: {e}")))?;
        let data = &bytes[header_end..];
        if data.len() != header.data_len {
            return Err(corrupt(format!(
                "data section has {} bytes, header says {}",
                data.len(),
                header.data_len
            )));
        }
        if crate::rng::hash_bytes(data) != header.data_sha256 {
            return Err(corrupt("checksum mismatch".into()));
        }
        let mut tensors = TensorMap::new();
        for e in header.tensors {
            let n: usize = e.shape.iter().product();
            let w = e.dtype.width();
            let end = e
                .offset
                .checked_add(n * w)
                .filter(|&end| end <= data.len())
                .ok_or_else(|| corrupt(format!("tensor `{}` overruns data", e.name)))?;
            let raw = &data[e.offset..end];
            let values = match e.dtype {
                DType::F32 => raw
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                    .collect(),
                DType::F64 => raw
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            };
            tensors.insert(e.name, Tensor::new(e.shape, values));
        }
        Ok(Self {
            meta: header.meta,
            tensors,
        })
    }

    /// Writes through a temporary file and renames it into place.
    pub fn write(&self, path: &Path, dtype: DType) -> Result<()> {
        write_atomic(path, &self.to_bytes(dtype))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let tmp = path.with_extension(format!(
        "tmp{}",
        std::process::id()
    ));
    {
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}
