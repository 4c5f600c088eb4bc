//! Binary checkpoint container shared by every trained module.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "AVIT" | u32 version | u16 len, tag | u32 len, config JSON | u32 count
//! count × ( u16 len, name | u8 dtype | u32 rows | u32 cols | row-major data )
//! 32-byte SHA-256 of everything above
//! ```

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{format, Result};
use crate::scalar::{DType, Scalar};
use crate::tensor::Mat;
use crate::trainkit::ParamSet;

pub const MAGIC: &[u8; 4] = b"AVIT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
struct Tensor {
    name: String,
    dtype: DType,
    rows: usize,
    cols: usize,
    bytes: Vec<u8>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    tag: String,
    config: String,
    tensors: Vec<Tensor>,
}

impl Checkpoint {
    pub fn new(tag: &str, config: &impl Serialize) -> Result<Self> {
        Ok(Checkpoint { tag: tag.to_string(), config: serde_json::to_string(config)?, tensors: Vec::new() })
    }

    pub fn tag(&self) -> &str {
        &self.tag
    }

    pub fn config<C: DeserializeOwned>(&self) -> Result<C> {
        Ok(serde_json::from_str(&self.config)?)
    }

    pub fn config_json(&self) -> &str {
        &self.config
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.iter().map(|t| t.name.as_str())
    }

    pub fn put<T: Scalar>(&mut self, name: impl Into<String>, m: &Mat<T>) {
        let name = name.into();
        let mut bytes = Vec::with_capacity(m.len() * T::DTYPE.width());
        for &v in m.data() {
            v.write_le(&mut bytes);
        }
        let t = Tensor { name, dtype: T::DTYPE, rows: m.rows(), cols: m.cols(), bytes };
        match self.tensors.iter_mut().find(|x| x.name == t.name) {
            Some(slot) => *slot = t,
            None => self.tensors.push(t),
        }
    }

    /// Reads a tensor, converting to `T` when stored at another precision.
    pub fn get<T: Scalar>(&self, name: &str) -> Result<Mat<T>> {
        let Some(t) = self.tensors.iter().find(|t| t.name == name) else {
            return format(format!("checkpoint {} has no tensor {name}", self.tag));
        };
        let w = t.dtype.width();
        let data: Vec<T> = match t.dtype {
            DType::F32 => t.bytes.chunks_exact(w).map(|c| T::lit(f32::read_le(c) as f64)).collect(),
            DType::F64 => t.bytes.chunks_exact(w).map(|c| T::lit(f64::read_le(c))).collect(),
        };
        Mat::from_vec(t.rows, t.cols, data)
    }

    pub fn put_params<T: Scalar>(&mut self, prefix: &str, ps: &ParamSet<T>) {
        for (name, m) in ps.iter() {
            self.put(format!("{prefix}{name}"), m);
        }
    }

    /// Fills every parameter of `ps` from tensors named `prefix + name`.
    pub fn load_params<T: Scalar>(&self, prefix: &str, ps: &mut ParamSet<T>) -> Result<()> {
        let mut stored = ParamSet::new();
        for (name, _) in ps.iter() {
            stored.register(name.to_string(), self.get::<T>(&format!("{prefix}{name}"))?);
        }
        ps.load_from(&stored)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.tag.len() as u16).to_le_bytes());
        out.extend_from_slice(self.tag.as_bytes());
        out.extend_from_slice(&(self.config.len() as u32).to_le_bytes());
        out.extend_from_slice(self.config.as_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for t in &self.tensors {
            out.extend_from_slice(&(t.name.len() as u16).to_le_bytes());
            out.extend_from_slice(t.name.as_bytes());
            out.push(t.dtype.code());
            out.extend_from_slice(&(t.rows as u32).to_le_bytes());
            out.extend_from_slice(&(t.cols as u32).to_le_bytes());
            out.extend_from_slice(&t.bytes);
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    /// Hex SHA-256 of the serialized body, as stored in the trailer.
    pub fn hash(&self) -> String {
        let b = self.to_bytes();
        hex::encode(&b[b.len() - 32..])
    }

    /// Parses and verifies a container; `expected_tag` guards against wiring the wrong module.
    pub fn from_bytes(bytes: &[u8], expected_tag: &str) -> Result<Self> {
        if bytes.len() < MAGIC.len() + 32 || &bytes[..4] != MAGIC {
            return format("not an AVIT checkpoint");
        }
        let (body, trailer) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != trailer {
            return format("checkpoint hash mismatch");
        }
        let mut r = Reader { b: body, at: 4 };
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return format(format!("checkpoint format {version} unsupported"));
        }
        let n = r.u16()? as usize;
        let tag = r.string(n)?;
        if tag != expected_tag {
            return format(format!("checkpoint holds module {tag:?}, expected {expected_tag:?}"));
        }
        let n = r.u32()? as usize;
        let config = r.string(n)?;
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count);
        for _ in 0..count {
            let n = r.u16()? as usize;
            let name = r.string(n)?;
            let Some(dtype) = DType::from_code(r.take(1)?[0]) else {
                return format(format!("tensor {name} has unknown dtype"));
            };
            let rows = r.u32()? as usize;
            let cols = r.u32()? as usize;
            let bytes = r.take(rows * cols * dtype.width())?.to_vec();
            tensors.push(Tensor { name, dtype, rows, cols, bytes });
        }
        if r.at != body.len() {
            return format("trailing bytes in checkpoint");
        }
        Ok(Checkpoint { tag, config, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<String> {
        let b = self.to_bytes();
        std::fs::write(path, &b)?;
        Ok(hex::encode(&b[b.len() - 32..]))
    }

    pub fn load(path: &Path, expected_tag: &str) -> Result<Self> {
        Checkpoint::from_bytes(&std::fs::read(path)?, expected_tag)
    }
}

struct Reader<'a> {
    b: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.at + n > self.b.len() {
            return format("truncated checkpoint");
        }
        let s = &self.b[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn string(&mut self, n: usize) -> Result<String> {
        String::from_utf8(self.take(n)?.to_vec()).or_else(|_| format("invalid utf-8 in checkpoint"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut c = Checkpoint::new("bridge", &serde_json::json!({"d_s": 16})).unwrap();
        c.put("a", &Mat::from_fn(2, 3, |r, k| (r * 3 + k) as f32 * 0.1));
        c.put("b", &Mat::from_fn(1, 2, |_, k| k as f64 - 0.5));
        c
    }

    #[test]
    fn round_trip_is_byte_stable() {
        let c = sample();
        let bytes = c.to_bytes();
        let back = Checkpoint::from_bytes(&bytes, "bridge").unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_bytes(), bytes);
        assert_eq!(back.get::<f32>("a").unwrap(), Mat::from_fn(2, 3, |r, k| (r * 3 + k) as f32 * 0.1));
        assert_eq!(back.get::<f64>("b").unwrap().data(), &[-0.5, 0.5]);
    }

    #[test]
    fn corruption_and_wrong_tag_are_format_errors() {
        let mut bytes = sample().to_bytes();
        assert!(matches!(Checkpoint::from_bytes(&bytes, "motion_prior"), Err(crate::Error::Format(_))));
        bytes[20] ^= 1;
        assert!(matches!(Checkpoint::from_bytes(&bytes, "bridge"), Err(crate::Error::Format(_))));
        assert!(Checkpoint::from_bytes(b"nope", "bridge").is_err());
    }

    #[test]
    fn params_load_by_name() {
        let mut ps = ParamSet::<f32>::new();
        ps.register("w", Mat::filled(2, 2, 1.5));
        let mut c = Checkpoint::new("x", &()).unwrap();
        c.put_params("m.", &ps);
        let mut fresh = ParamSet::<f32>::new();
        fresh.register("w", Mat::zeros(2, 2));
        c.load_params("m.", &mut fresh).unwrap();
        assert_eq!(fresh, ps);
        let mut wrong = ParamSet::<f32>::new();
        wrong.register("w", Mat::zeros(3, 2));
        assert!(c.load_params("m.", &mut wrong).is_err());
    }
}
