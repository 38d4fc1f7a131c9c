//! Versioned binary container used for backbone checkpoints, feature caches,
//! prompt stores and framework checkpoints.
//!
//! Layout: the magic line (`<header>\n`), a little-endian `u32` length and
//! that many bytes of JSON metadata, a `u32` tensor count, then per tensor a
//! `u16` name length and UTF-8 name, a `u8` rank, `u64` dimensions and
//! row-major `f64` values.

use std::io::{Read, Write};
use std::path::Path;

use ndarray::IxDyn;
use serde_json::Value;

use crate::autograd::Tensor;
use crate::error::{Error, Result};
use crate::nn::ParamStore;

pub const BACKBONE_HEADER: &str = "DIFSCIL-BB-v1";
pub const FEATURE_CACHE_HEADER: &str = "DIFSCIL-FC-v1";
pub const PROMPT_HEADER: &str = "DIFSCIL-PE-v1";
pub const CHECKPOINT_HEADER: &str = "DIFSCIL-CK-v1";

#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub meta: Value,
    pub tensors: Vec<(String, Tensor)>,
}

impl Container {
    pub fn new(meta: Value) -> Self {
        Self {
            meta,
            tensors: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.push((name.into(), t));
    }

    /// Adds every tensor of `store` under `prefix/`.
    pub fn push_store(&mut self, prefix: &str, store: &ParamStore) {
        for (name, t) in store.iter() {
            self.push(format!("{prefix}/{name}"), t.clone());
        }
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::Format(format!("missing tensor {name}")))
    }

    /// Overwrites the parameters of `store` from entries under `prefix/`.
    pub fn load_store(&self, prefix: &str, store: &mut ParamStore) -> Result<()> {
        for i in 0..store.len() {
            let name = format!("{prefix}/{}", store.name(i));
            let t = self.get(&name)?;
            if t.shape() != store.get(i).shape() {
                return Err(Error::Format(format!(
                    "{name}: stored shape {:?}, expected {:?}",
                    t.shape(),
                    store.get(i).shape()
                )));
            }
            *store.get_mut(i) = t.clone();
        }
        Ok(())
    }

    pub fn to_bytes(&self, header: &str) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(header.as_bytes());
        out.push(b'\n');
        let meta = serde_json::to_vec(&self.meta).expect("json values serialize");
        out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        out.extend_from_slice(&meta);
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(t.ndim() as u8);
            for d in t.shape() {
                out.extend_from_slice(&(*d as u64).to_le_bytes());
            }
            for v in t.iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], header: &str) -> Result<Self> {
        let mut r = bytes;
        let mut magic = vec![0u8; header.len() + 1];
        read_exact(&mut r, &mut magic)?;
        if &magic[..header.len()] != header.as_bytes() || magic[header.len()] != b'\n' {
            return Err(Error::Format(format!(
                "expected header {header}, found {:?}",
                String::from_utf8_lossy(&magic)
            )));
        }
        let meta_len = read_u32(&mut r)? as usize;
        let mut meta = vec![0u8; meta_len];
        read_exact(&mut r, &mut meta)?;
        let meta: Value = serde_json::from_slice(&meta)?;
        let count = read_u32(&mut r)? as usize;
        let mut tensors = Vec::with_capacity(count);
        for _ in 0..count {
            let mut b2 = [0u8; 2];
            read_exact(&mut r, &mut b2)?;
            let mut name = vec![0u8; u16::from_le_bytes(b2) as usize];
            read_exact(&mut r, &mut name)?;
            let name = String::from_utf8(name).map_err(|e| Error::Format(e.to_string()))?;
            let mut b1 = [0u8; 1];
            read_exact(&mut r, &mut b1)?;
            let mut shape = Vec::with_capacity(b1[0] as usize);
            for _ in 0..b1[0] {
                let mut b8 = [0u8; 8];
                read_exact(&mut r, &mut b8)?;
                shape.push(u64::from_le_bytes(b8) as usize);
            }
            let n: usize = shape.iter().product();
            if r.len() < n * 8 {
                return Err(Error::Format(format!("tensor {name} truncated")));
            }
            let data = r[..n * 8]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            r = &r[n * 8..];
            let t = Tensor::from_shape_vec(IxDyn(&shape), data)
                .map_err(|e| Error::Format(e.to_string()))?;
            tensors.push((name, t));
        }
        if !r.is_empty() {
            return Err(Error::Format(format!("{} trailing bytes", r.len())));
        }
        Ok(Self { meta, tensors })
    }

    pub fn write(&self, path: &Path, header: &str) -> Result<()> {
        if let Some(dir) = path.parent() {
            if !dir.as_os_str().is_empty() {
                std::fs::create_dir_all(dir)?;
            }
        }
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes(header))?;
        Ok(())
    }

    pub fn read(path: &Path, header: &str) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes, header)
    }
}

fn read_exact(r: &mut &[u8], buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf)
        .map_err(|_| Error::Format("unexpected end of container".into()))
}

fn read_u32(r: &mut &[u8]) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn round_trip_and_header_check() {
        let mut c = Container::new(json!({"a": 1, "b": [1.5, 2.0]}));
        c.push(
            "x",
            Tensor::from_shape_vec(IxDyn(&[2, 3]), (0..6).map(f64::from).collect()).unwrap(),
        );
        c.push("s", Tensor::from_elem(IxDyn(&[]), -0.25));
        let bytes = c.to_bytes(PROMPT_HEADER);
        assert_eq!(Container::from_bytes(&bytes, PROMPT_HEADER).unwrap(), c);
        assert!(Container::from_bytes(&bytes, CHECKPOINT_HEADER).is_err());
        assert!(Container::from_bytes(&bytes[..bytes.len() - 3], PROMPT_HEADER).is_err());
    }
}
