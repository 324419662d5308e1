//! Binary tensor container with a JSON header.
//!
//! Layout: magic `UVTC`, a little-endian `u32` header length, a JSON header
//! describing version, free-form metadata and the tensor directory
//! (name / shape / dtype, in file order), then the raw tensor payloads,
//! little-endian, in directory order. Dtypes: `f64`, `u32`.
//!
//! The same format backs morphable-model files, training checkpoints and
//! the on-disk artifact cache.

use crate::error::{Error, Result};
use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

const MAGIC: &[u8; 4] = b"UVTC";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    version: u32,
    #[serde(default)]
    meta: serde_json::Value,
    tensors: Vec<TensorInfo>,
    endianness: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TensorInfo {
    name: String,
    shape: Vec<usize>,
    dtype: String,
}

#[derive(Debug, Clone)]
pub enum Tensor {
    F64(ArrayD<f64>),
    U32(ArrayD<u32>),
}

impl Tensor {
    fn dtype(&self) -> &'static str {
        match self {
            Tensor::F64(_) => "f64",
            Tensor::U32(_) => "u32",
        }
    }

    fn shape(&self) -> Vec<usize> {
        match self {
            Tensor::F64(a) => a.shape().to_vec(),
            Tensor::U32(a) => a.shape().to_vec(),
        }
    }
}

/// An ordered set of named tensors plus free-form JSON metadata.
#[derive(Debug, Clone, Default)]
pub struct Container {
    pub meta: serde_json::Value,
    entries: Vec<(String, Tensor)>,
}

impl Container {
    pub fn new(meta: serde_json::Value) -> Self {
        Container {
            meta,
            entries: Vec::new(),
        }
    }

    pub fn push_f64(&mut self, name: impl Into<String>, array: ArrayD<f64>) {
        self.entries.push((name.into(), Tensor::F64(array)));
    }

    pub fn push_u32(&mut self, name: impl Into<String>, array: ArrayD<u32>) {
        self.entries.push((name.into(), Tensor::U32(array)));
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    fn get(&self, name: &str) -> Result<&Tensor> {
        self.entries
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::format(format!("container missing tensor '{name}'")))
    }

    pub fn get_f64(&self, name: &str) -> Result<&ArrayD<f64>> {
        match self.get(name)? {
            Tensor::F64(a) => Ok(a),
            Tensor::U32(_) => Err(Error::format(format!("tensor '{name}' is u32, expected f64"))),
        }
    }

    pub fn get_u32(&self, name: &str) -> Result<&ArrayD<u32>> {
        match self.get(name)? {
            Tensor::U32(a) => Ok(a),
            Tensor::F64(_) => Err(Error::format(format!("tensor '{name}' is f64, expected u32"))),
        }
    }

    pub fn iter_f64(&self) -> impl Iterator<Item = (&str, &ArrayD<f64>)> {
        self.entries.iter().filter_map(|(n, t)| match t {
            Tensor::F64(a) => Some((n.as_str(), a)),
            Tensor::U32(_) => None,
        })
    }

    pub fn write_to(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let header = Header {
            version: FORMAT_VERSION,
            meta: self.meta.clone(),
            tensors: self
                .entries
                .iter()
                .map(|(n, t)| TensorInfo {
                    name: n.clone(),
                    shape: t.shape(),
                    dtype: t.dtype().to_string(),
                })
                .collect(),
            endianness: "little".to_string(),
        };
        let header_bytes = serde_json::to_vec(&header)?;
        let mut file =
            fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        file.write_all(MAGIC)
            .and_then(|_| file.write_all(&(header_bytes.len() as u32).to_le_bytes()))
            .and_then(|_| file.write_all(&header_bytes))
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        for (_, tensor) in &self.entries {
            let mut buf: Vec<u8> = Vec::new();
            match tensor {
                Tensor::F64(a) => {
                    for v in a.iter() {
                        buf.extend_from_slice(&v.to_le_bytes());
                    }
                }
                Tensor::U32(a) => {
                    for v in a.iter() {
                        buf.extend_from_slice(&v.to_le_bytes());
                    }
                }
            }
            file.write_all(&buf)
                .map_err(|e| Error::io(path.display().to_string(), e))?;
        }
        Ok(())
    }

    pub fn read_from(path: impl AsRef<Path>) -> Result<Container> {
        let path = path.as_ref();
        let mut file = fs::File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        let mut bytes = Vec::new();
        file.read_to_end(&mut bytes)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Format(msg) => Error::format(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Container> {
        if bytes.len() < 8 || &bytes[..4] != MAGIC {
            return Err(Error::format("not a tensor container (bad magic)"));
        }
        let header_len = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        let header_end = 8 + header_len;
        if bytes.len() < header_end {
            return Err(Error::format("truncated container header"));
        }
        let header: Header = serde_json::from_slice(&bytes[8..header_end])?;
        if header.version != FORMAT_VERSION {
            return Err(Error::format(format!(
                "container version mismatch: file has {}, reader supports {}",
                header.version, FORMAT_VERSION
            )));
        }
        if header.endianness != "little" {
            return Err(Error::format(format!(
                "unsupported endianness '{}'",
                header.endianness
            )));
        }
        let mut offset = header_end;
        let mut entries = Vec::with_capacity(header.tensors.len());
        for info in &header.tensors {
            let count: usize = info.shape.iter().product();
            let width = match info.dtype.as_str() {
                "f64" => 8,
                "u32" => 4,
                other => return Err(Error::format(format!("unknown dtype '{other}'"))),
            };
            let end = offset + count * width;
            if bytes.len() < end {
                return Err(Error::format(format!(
                    "truncated payload for tensor '{}'",
                    info.name
                )));
            }
            let raw = &bytes[offset..end];
            let tensor = match info.dtype.as_str() {
                "f64" => {
                    let data: Vec<f64> = raw
                        .chunks_exact(8)
                        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                        .collect();
                    Tensor::F64(
                        ArrayD::from_shape_vec(IxDyn(&info.shape), data)
                            .map_err(|e| Error::format(e.to_string()))?,
                    )
                }
                _ => {
                    let data: Vec<u32> = raw
                        .chunks_exact(4)
                        .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
                        .collect();
                    Tensor::U32(
                        ArrayD::from_shape_vec(IxDyn(&info.shape), data)
                            .map_err(|e| Error::format(e.to_string()))?,
                    )
                }
            };
            entries.push((info.name.clone(), tensor));
            offset = end;
        }
        Ok(Container {
            meta: header.meta,
            entries,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr2;

    #[test]
    fn round_trip_preserves_tensors_and_meta() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.uvtc");
        let mut c = Container::new(serde_json::json!({"kind": "test", "n": 3}));
        c.push_f64("a", arr2(&[[1.0, 2.5], [-3.0, 4.0]]).into_dyn());
        c.push_u32("b", ndarray::arr1(&[7u32, 9]).into_dyn());
        c.write_to(&path).unwrap();
        let back = Container::read_from(&path).unwrap();
        assert_eq!(back.meta["kind"], "test");
        assert_eq!(back.get_f64("a").unwrap(), c.get_f64("a").unwrap());
        assert_eq!(back.get_u32("b").unwrap(), c.get_u32("b").unwrap());
        assert!(back.get_f64("missing").is_err());
    }

    #[test]
    fn truncated_file_reports_structured_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.uvtc");
        let mut c = Container::new(serde_json::json!({}));
        c.push_f64("a", ndarray::arr1(&[1.0, 2.0, 3.0]).into_dyn());
        c.write_to(&path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        let err = Container::from_bytes(&bytes[..bytes.len() - 4]).unwrap_err();
        assert!(err.to_string().contains("truncated"));
        let err = Container::from_bytes(&bytes[..3]).unwrap_err();
        assert!(err.to_string().contains("magic"));
    }
}
