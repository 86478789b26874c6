//! Named-tensor checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "TRKPT" | version: u32
//! header_count: u32 | (key: str, value: str) * header_count
//! tensor_count: u32 | (name: str, rank: u32, dims: u64 * rank, data: f32 * prod(dims)) * tensor_count
//! ```
//!
//! where `str` is a `u32` byte length followed by UTF-8 bytes. The header
//! carries `d`, `layers`, `max_len`, and `num_items`; attribute tools add
//! `attribute_name`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::nn::{Mat, Scalar};

pub const MAGIC: &[u8; 5] = b"TRKPT";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u32),
    #[error("checkpoint truncated at byte {0}")]
    Truncated(usize),
    #[error("invalid UTF-8 in checkpoint string")]
    BadString,
    #[error("missing header field `{0}`")]
    MissingHeader(String),
    #[error("invalid header field `{key}`: `{value}`")]
    BadHeader { key: String, value: String },
    #[error("missing tensor `{0}`")]
    MissingTensor(String),
    #[error("tensor `{name}` has shape {found:?}, expected {expected:?}")]
    Shape { name: String, found: Vec<u64>, expected: Vec<u64> },
    #[error("tensor `{0}` contains non-finite values")]
    NonFinite(String),
    #[error("i/o error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub dims: Vec<u64>,
    pub data: Vec<f32>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Checkpoint {
    pub header: BTreeMap<String, String>,
    pub tensors: Vec<NamedTensor>,
}

impl Checkpoint {
    pub fn set(&mut self, key: &str, value: impl ToString) {
        self.header.insert(key.to_string(), value.to_string());
    }

    pub fn get(&self, key: &str) -> Result<&str, CheckpointError> {
        self.header
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| CheckpointError::MissingHeader(key.to_string()))
    }

    pub fn get_parsed<T: std::str::FromStr>(&self, key: &str) -> Result<T, CheckpointError> {
        let v = self.get(key)?;
        v.parse().map_err(|_| CheckpointError::BadHeader { key: key.into(), value: v.into() })
    }

    pub fn push_mat<F: Scalar>(&mut self, name: &str, m: &Mat<F>) {
        self.tensors.push(NamedTensor {
            name: name.to_string(),
            dims: vec![m.rows as u64, m.cols as u64],
            data: m.data.iter().map(|v| v.as_f64() as f32).collect(),
        });
    }

    pub fn tensor(&self, name: &str) -> Result<&NamedTensor, CheckpointError> {
        self.tensors
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| CheckpointError::MissingTensor(name.to_string()))
    }

    /// Copies tensor `name` into `dst`, checking the shape.
    pub fn load_into<F: Scalar>(&self, name: &str, dst: &mut Mat<F>) -> Result<(), CheckpointError> {
        let t = self.tensor(name)?;
        let expected = vec![dst.rows as u64, dst.cols as u64];
        if t.dims != expected {
            return Err(CheckpointError::Shape { name: name.into(), found: t.dims.clone(), expected });
        }
        if t.data.iter().any(|v| !v.is_finite()) {
            return Err(CheckpointError::NonFinite(name.into()));
        }
        for (d, &s) in dst.data.iter_mut().zip(&t.data) {
            *d = F::from_f64(s as f64);
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.header.len() as u32).to_le_bytes());
        for (k, v) in &self.header {
            put_str(&mut out, k);
            put_str(&mut out, v);
        }
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for t in &self.tensors {
            put_str(&mut out, &t.name);
            out.extend_from_slice(&(t.dims.len() as u32).to_le_bytes());
            for d in &t.dims {
                out.extend_from_slice(&d.to_le_bytes());
            }
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(MAGIC.len())? != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(CheckpointError::UnsupportedVersion(version));
        }
        let mut header = BTreeMap::new();
        for _ in 0..r.u32()? {
            let k = r.string()?;
            let v = r.string()?;
            header.insert(k, v);
        }
        let count = r.u32()?;
        let mut tensors = Vec::with_capacity(count as usize);
        for _ in 0..count {
            let name = r.string()?;
            let rank = r.u32()?;
            let dims = (0..rank).map(|_| r.u64()).collect::<Result<Vec<_>, _>>()?;
            let n: u64 = dims.iter().product();
            let raw = r.take(n as usize * 4)?;
            let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
            tensors.push(NamedTensor { name, dims, data });
        }
        Ok(Self { header, tensors })
    }

    pub fn write(&self, path: &Path) -> Result<(), CheckpointError> {
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                fs::create_dir_all(parent).map_err(|source| CheckpointError::Io { path: parent.into(), source })?;
            }
        }
        fs::write(path, self.to_bytes()).map_err(|source| CheckpointError::Io { path: path.into(), source })
    }

    pub fn read(path: &Path) -> Result<Self, CheckpointError> {
        let bytes = fs::read(path).map_err(|source| CheckpointError::Io { path: path.into(), source })?;
        Self::from_bytes(&bytes)
    }
}

/// Hex SHA-256 of a file's bytes; used for run manifests and freeze checks.
pub fn file_digest(path: &Path) -> std::io::Result<String> {
    Ok(hex::encode(Sha256::digest(fs::read(path)?)))
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or(CheckpointError::Truncated(self.pos))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        let b = self.take(8)?;
        let mut a = [0u8; 8];
        a.copy_from_slice(b);
        Ok(u64::from_le_bytes(a))
    }

    fn string(&mut self) -> Result<String, CheckpointError> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| CheckpointError::BadString)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn layout_starts_with_magic_and_version() {
        let mut c = Checkpoint::default();
        c.set("d", 4);
        let b = c.to_bytes();
        assert_eq!(&b[..5], b"TRKPT");
        assert_eq!(&b[5..9], &1u32.to_le_bytes());
    }

    #[test]
    fn rejects_garbage_and_truncation() {
        assert!(matches!(Checkpoint::from_bytes(b"NOPE!xxxx"), Err(CheckpointError::BadMagic)));
        let mut c = Checkpoint::default();
        c.push_mat("w", &Mat::<f32>::filled(2, 3, 1.5));
        let b = c.to_bytes();
        assert!(matches!(Checkpoint::from_bytes(&b[..b.len() - 1]), Err(CheckpointError::Truncated(_))));
    }

    #[test]
    fn load_into_checks_shape() {
        let mut c = Checkpoint::default();
        c.push_mat("w", &Mat::<f32>::filled(2, 3, 1.5));
        let mut m = Mat::<f32>::zeros(3, 2);
        assert!(matches!(c.load_into("w", &mut m), Err(CheckpointError::Shape { .. })));
    }

    proptest! {
        #[test]
        fn bytes_round_trip(
            header in proptest::collection::btree_map("[a-z_]{1,8}", ".{0,12}", 0..5),
            tensors in proptest::collection::vec(("[a-z.0-9]{1,10}", 1usize..4, 1usize..4), 0..4),
        ) {
            let mut c = Checkpoint { header, tensors: Vec::new() };
            for (i, (name, r, k)) in tensors.into_iter().enumerate() {
                let data = (0..r * k).map(|j| (i * 31 + j) as f32 * 0.25 - 1.0).collect();
                c.push_mat(&name, &Mat::from_vec(r, k, data));
            }
            let back = Checkpoint::from_bytes(&c.to_bytes()).unwrap();
            prop_assert_eq!(back, c);
        }
    }
}
