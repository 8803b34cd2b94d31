//! Tensor container file: a text header followed by a little-endian blob.
//!
//! ```text
//! BIDLAB-CKPT 1
//! dtype f32
//! meta <key> <value>
//! tensor <name> <d0>x<d1>... <byte offset> <byte length>
//! end
//! <raw bytes>
//! ```
//!
//! Offsets are relative to the first byte after the `end` line.

use std::collections::BTreeMap;
use std::path::Path;

use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

const MAGIC: &str = "BIDLAB-CKPT 1";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    fn name(self) -> &'static str {
        match self {
            Dtype::F32 => f32::DTYPE,
            Dtype::F64 => f64::DTYPE,
        }
    }

    fn width(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub dtype: Dtype,
    pub meta: BTreeMap<String, String>,
    tensors: Vec<(String, Tensor<f64>)>,
}

impl Default for Checkpoint {
    fn default() -> Self {
        Self::new(Dtype::F32)
    }
}

fn valid_token(s: &str) -> bool {
    !s.is_empty() && !s.chars().any(|c| c.is_whitespace())
}

impl Checkpoint {
    pub fn new(dtype: Dtype) -> Self {
        Self { dtype, meta: BTreeMap::new(), tensors: Vec::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<f64>) {
        let name = name.into();
        if let Some(slot) = self.tensors.iter_mut().find(|(n, _)| *n == name) {
            slot.1 = t;
        } else {
            self.tensors.push((name, t));
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<f64>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor<f64>> {
        self.get(name).ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.iter().map(|(n, _)| n.as_str())
    }

    pub fn set_meta(&mut self, key: &str, value: impl ToString) {
        self.meta.insert(key.to_string(), value.to_string());
    }

    pub fn meta(&self, key: &str) -> Option<&str> {
        self.meta.get(key).map(|s| s.as_str())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut header = String::new();
        header.push_str(MAGIC);
        header.push('\n');
        header.push_str(&format!("dtype {}\n", self.dtype.name()));
        for (k, v) in &self.meta {
            if !valid_token(k) || v.contains('\n') {
                return Err(Error::Checkpoint(format!("invalid meta entry {k:?}")));
            }
            header.push_str(&format!("meta {k} {v}\n"));
        }
        let mut blob = Vec::new();
        for (name, t) in &self.tensors {
            if !valid_token(name) {
                return Err(Error::Checkpoint(format!("invalid tensor name {name:?}")));
            }
            let dims: Vec<String> = t.shape().iter().map(|d| d.to_string()).collect();
            let offset = blob.len();
            for &x in t.data() {
                match self.dtype {
                    Dtype::F32 => (x as f32).write_le(&mut blob),
                    Dtype::F64 => x.write_le(&mut blob),
                }
            }
            header.push_str(&format!(
                "tensor {name} {} {offset} {}\n",
                dims.join("x"),
                blob.len() - offset
            ));
        }
        header.push_str("end\n");
        let mut out = header.into_bytes();
        out.extend_from_slice(&blob);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        let mut pos = 0;
        let mut lines = Vec::new();
        loop {
            let nl = bytes[pos..].iter().position(|&b| b == b'\n').ok_or_else(|| bad("truncated header"))?;
            let line = std::str::from_utf8(&bytes[pos..pos + nl]).map_err(|_| bad("header is not utf-8"))?;
            pos += nl + 1;
            if line == "end" {
                break;
            }
            lines.push(line.to_string());
        }
        let blob = &bytes[pos..];
        let mut it = lines.into_iter();
        if it.next().as_deref() != Some(MAGIC) {
            return Err(bad("bad magic"));
        }
        let dtype = match it.next().as_deref() {
            Some("dtype f32") => Dtype::F32,
            Some("dtype f64") => Dtype::F64,
            other => return Err(Error::Checkpoint(format!("bad dtype line {other:?}"))),
        };
        let mut ck = Checkpoint::new(dtype);
        for line in it {
            let mut parts = line.splitn(3, ' ');
            match parts.next() {
                Some("meta") => {
                    let k = parts.next().ok_or_else(|| bad("meta without key"))?;
                    let v = parts.next().unwrap_or("");
                    ck.meta.insert(k.to_string(), v.to_string());
                }
                Some("tensor") => {
                    let fields: Vec<&str> = line.split(' ').collect();
                    if fields.len() != 5 {
                        return Err(Error::Checkpoint(format!("bad tensor line {line:?}")));
                    }
                    let shape: Vec<usize> = fields[2]
                        .split('x')
                        .map(|d| d.parse().map_err(|_| bad("bad dimension")))
                        .collect::<Result<_>>()?;
                    let offset: usize = fields[3].parse().map_err(|_| bad("bad offset"))?;
                    let len: usize = fields[4].parse().map_err(|_| bad("bad length"))?;
                    let n: usize = shape.iter().product();
                    if len != n * dtype.width() || offset + len > blob.len() {
                        return Err(Error::Checkpoint(format!("tensor {} out of bounds", fields[1])));
                    }
                    let raw = &blob[offset..offset + len];
                    let data: Vec<f64> = raw
                        .chunks_exact(dtype.width())
                        .map(|c| match dtype {
                            Dtype::F32 => f32::read_le(c) as f64,
                            Dtype::F64 => f64::read_le(c),
                        })
                        .collect();
                    ck.tensors.push((fields[1].to_string(), Tensor::new(&shape, data)?));
                }
                _ => return Err(Error::Checkpoint(format!("unknown header line {line:?}"))),
            }
        }
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)
            .map_err(|e| Error::MissingArtifact(format!("{}: {e}", path.display())))?;
        Self::from_bytes(&bytes)
    }
}
