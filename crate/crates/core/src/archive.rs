//! Binary container for named arrays plus a JSON manifest.
//!
//! Layout: 8-byte magic, `u64` little-endian manifest length, manifest JSON,
//! the raw little-endian array payloads in manifest order, and a trailing
//! SHA-256 over every preceding byte.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"BSNAS\x00\x01\x00";
const DIGEST_LEN: usize = 32;

#[derive(Clone, Debug, PartialEq)]
pub enum ArrayData {
    F32(Vec<f32>),
    U32(Vec<u32>),
}

impl ArrayData {
    fn dtype(&self) -> &'static str {
        match self {
            ArrayData::F32(_) => "f32",
            ArrayData::U32(_) => "u32",
        }
    }

    fn len(&self) -> usize {
        match self {
            ArrayData::F32(v) => v.len(),
            ArrayData::U32(v) => v.len(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Array {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: ArrayData,
}

#[derive(Serialize, Deserialize)]
struct ArrayEntry {
    name: String,
    dtype: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    kind: String,
    meta: serde_json::Value,
    arrays: Vec<ArrayEntry>,
}

/// An archive in memory. `kind` tags what the archive holds (checkpoint,
/// dataset, subnet) and is checked on load.
#[derive(Clone, Debug, PartialEq)]
pub struct Archive {
    pub kind: String,
    pub meta: serde_json::Value,
    pub arrays: Vec<Array>,
}

impl Archive {
    pub fn new(kind: impl Into<String>, meta: serde_json::Value) -> Self {
        Archive {
            kind: kind.into(),
            meta,
            arrays: Vec::new(),
        }
    }

    pub fn push_tensor(&mut self, name: impl Into<String>, t: &Tensor<f32>) {
        self.arrays.push(Array {
            name: name.into(),
            shape: t.shape().to_vec(),
            data: ArrayData::F32(t.data().to_vec()),
        });
    }

    pub fn push_u32(&mut self, name: impl Into<String>, data: Vec<u32>) {
        self.arrays.push(Array {
            name: name.into(),
            shape: vec![data.len()],
            data: ArrayData::U32(data),
        });
    }

    pub fn get(&self, name: &str) -> Result<&Array> {
        self.arrays
            .iter()
            .find(|a| a.name == name)
            .ok_or_else(|| Error::Checkpoint(format!("array `{name}` missing from {} archive", self.kind)))
    }

    pub fn tensor(&self, name: &str) -> Result<Tensor<f32>> {
        let a = self.get(name)?;
        match &a.data {
            ArrayData::F32(v) => Tensor::new(a.shape.clone(), v.clone()),
            ArrayData::U32(_) => Err(Error::Checkpoint(format!("array `{name}` is u32, expected f32"))),
        }
    }

    pub fn u32s(&self, name: &str) -> Result<&[u32]> {
        match &self.get(name)?.data {
            ArrayData::U32(v) => Ok(v),
            ArrayData::F32(_) => Err(Error::Checkpoint(format!("array `{name}` is f32, expected u32"))),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let manifest = Manifest {
            kind: self.kind.clone(),
            meta: self.meta.clone(),
            arrays: self
                .arrays
                .iter()
                .map(|a| ArrayEntry {
                    name: a.name.clone(),
                    dtype: a.data.dtype().into(),
                    shape: a.shape.clone(),
                })
                .collect(),
        };
        let json = serde_json::to_vec(&manifest)?;
        let payload: usize = self.arrays.iter().map(|a| 4 * a.data.len()).sum();
        let mut out = Vec::with_capacity(MAGIC.len() + 8 + json.len() + payload + DIGEST_LEN);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for a in &self.arrays {
            if a.shape.iter().product::<usize>() != a.data.len() {
                return Err(Error::Checkpoint(format!(
                    "array `{}` has {} values for shape {:?}",
                    a.name,
                    a.data.len(),
                    a.shape
                )));
            }
            match &a.data {
                ArrayData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                ArrayData::U32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], expected_kind: &str) -> Result<Self> {
        let bad = |m: String| Error::Checkpoint(m);
        if bytes.len() < MAGIC.len() + 8 + DIGEST_LEN {
            return Err(bad(format!("archive too short ({} bytes)", bytes.len())));
        }
        if &bytes[..MAGIC.len()] != MAGIC {
            return Err(bad("not an archive (bad magic bytes)".into()));
        }
        let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
        if Sha256::digest(body).as_slice() != digest {
            return Err(bad("checksum mismatch, archive is corrupt".into()));
        }
        let mut pos = MAGIC.len();
        let mlen = u64::from_le_bytes(body[pos..pos + 8].try_into().expect("8 bytes")) as usize;
        pos += 8;
        if body.len() < pos + mlen {
            return Err(bad(format!("manifest length {mlen} exceeds archive")));
        }
        let manifest: Manifest = serde_json::from_slice(&body[pos..pos + mlen])?;
        pos += mlen;
        if manifest.kind != expected_kind {
            return Err(bad(format!(
                "archive holds a {}, expected a {expected_kind}",
                manifest.kind
            )));
        }
        let mut arrays = Vec::with_capacity(manifest.arrays.len());
        for e in manifest.arrays {
            let n: usize = e.shape.iter().product();
            let end = pos + 4 * n;
            if end > body.len() {
                return Err(bad(format!("array `{}` runs past the end of the archive", e.name)));
            }
            let words = body[pos..end].chunks_exact(4).map(|c| [c[0], c[1], c[2], c[3]]);
            let data = match e.dtype.as_str() {
                "f32" => ArrayData::F32(words.map(f32::from_le_bytes).collect()),
                "u32" => ArrayData::U32(words.map(u32::from_le_bytes).collect()),
                other => return Err(bad(format!("array `{}` has unknown dtype {other}", e.name))),
            };
            pos = end;
            arrays.push(Array {
                name: e.name,
                shape: e.shape,
                data,
            });
        }
        if pos != body.len() {
            return Err(bad(format!("{} trailing bytes after the last array", body.len() - pos)));
        }
        Ok(Archive {
            kind: manifest.kind,
            meta: manifest.meta,
            arrays,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path, expected_kind: &str) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::from_bytes(&bytes, expected_kind)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Archive {
        let mut a = Archive::new("test", serde_json::json!({"x": 0.1, "n": 3}));
        a.push_tensor("w", &Tensor::new(vec![2, 2], vec![1.0, -0.0, f32::MIN_POSITIVE, 3.5]).unwrap());
        a.push_u32("labels", vec![0, 9, 4]);
        a
    }

    #[test]
    fn round_trip_is_byte_exact() {
        let a = sample();
        let bytes = a.to_bytes().unwrap();
        let b = Archive::from_bytes(&bytes, "test").unwrap();
        assert_eq!(a, b);
        assert_eq!(b.to_bytes().unwrap(), bytes);
        assert_eq!(b.u32s("labels").unwrap(), &[0, 9, 4]);
    }

    #[test]
    fn corruption_and_kind_detected() {
        let mut bytes = sample().to_bytes().unwrap();
        assert!(Archive::from_bytes(&bytes, "other").is_err());
        let mid = bytes.len() / 2;
        bytes[mid] ^= 1;
        let err = Archive::from_bytes(&bytes, "test").unwrap_err();
        assert!(err.to_string().contains("checksum"));
    }
}
