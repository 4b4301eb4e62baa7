//! On-disk formats: FMAP tensor files and parameter bundles.
//!
//! FMAP layout (all integers little-endian):
//!
//! | offset | size       | field                                   |
//! |--------|------------|-----------------------------------------|
//! | 0      | 4          | magic `b"FMAP"`                         |
//! | 4      | 1          | version, always 1                       |
//! | 5      | 1          | dtype: 0=f32, 1=f64, 2=u16, 3=u32       |
//! | 6      | 2          | ndim (u16)                              |
//! | 8      | 4·ndim     | dims (u32 each)                         |
//! | 8+4·ndim | numel·size | row-major payload                     |
//!
//! A parameter bundle is a directory holding `manifest.json` plus one FMAP
//! file per tensor. The manifest has three keys: `params` (name → relative
//! path), `scalars` (name → number) and `meta` (free-form).

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{DType, Tensor};

pub const FMAP_MAGIC: &[u8; 4] = b"FMAP";
pub const FMAP_VERSION: u8 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";

pub fn encode_fmap(t: &Tensor) -> Result<Vec<u8>> {
    let ndim = u16::try_from(t.ndim()).map_err(|_| Error::input("too many dimensions for FMAP"))?;
    let mut out = Vec::with_capacity(8 + 4 * t.ndim() + t.numel() * t.dtype().size());
    out.extend_from_slice(FMAP_MAGIC);
    out.push(FMAP_VERSION);
    out.push(t.dtype().code());
    out.extend_from_slice(&ndim.to_le_bytes());
    for &d in t.shape() {
        let d = u32::try_from(d).map_err(|_| Error::input(format!("dimension {d} exceeds u32")))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    match t.dtype() {
        DType::Float32 => t.data().iter().for_each(|&v| out.extend_from_slice(&(v as f32).to_le_bytes())),
        DType::Float64 => t.data().iter().for_each(|&v| out.extend_from_slice(&v.to_le_bytes())),
        DType::Uint16 => t.data().iter().for_each(|&v| out.extend_from_slice(&(v as u16).to_le_bytes())),
        DType::Uint32 => t.data().iter().for_each(|&v| out.extend_from_slice(&(v as u32).to_le_bytes())),
    }
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Format {
                offset: self.bytes.len() as u64,
                message: format!("truncated while reading {what} (need {n} bytes at {})", self.pos),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
}

fn format_err(offset: usize, message: impl Into<String>) -> Error {
    Error::Format {
        offset: offset as u64,
        message: message.into(),
    }
}

pub fn decode_fmap(bytes: &[u8]) -> Result<Tensor> {
    let mut c = Cursor { bytes, pos: 0 };
    if c.take(4, "magic")? != FMAP_MAGIC {
        return Err(format_err(0, "bad magic, expected \"FMAP\""));
    }
    let version = c.take(1, "version")?[0];
    if version != FMAP_VERSION {
        return Err(format_err(4, format!("unsupported version {version}")));
    }
    let code = c.take(1, "dtype")?[0];
    let dtype = DType::from_code(code).ok_or_else(|| format_err(5, format!("unknown dtype code {code}")))?;
    let ndim = u16::from_le_bytes(c.take(2, "ndim")?.try_into().unwrap()) as usize;
    if ndim == 0 {
        return Err(format_err(6, "ndim must be at least 1"));
    }
    let mut shape = Vec::with_capacity(ndim);
    for i in 0..ndim {
        let at = c.pos;
        let d = u32::from_le_bytes(c.take(4, &format!("dim {i}"))?.try_into().unwrap()) as usize;
        if d == 0 {
            return Err(format_err(at, format!("dim {i} is zero")));
        }
        shape.push(d);
    }
    let numel = shape
        .iter()
        .try_fold(1usize, |a, &d| a.checked_mul(d))
        .ok_or_else(|| format_err(8, "dimension product overflows"))?;
    let payload_len = numel
        .checked_mul(dtype.size())
        .ok_or_else(|| format_err(8, "payload size overflows"))?;
    let payload = c.take(payload_len, "payload")?;
    if c.pos != bytes.len() {
        return Err(format_err(c.pos, format!("{} trailing bytes after payload", bytes.len() - c.pos)));
    }
    let data: Vec<f64> = match dtype {
        DType::Float32 => payload
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
            .collect(),
        DType::Float64 => payload
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
            .collect(),
        DType::Uint16 => payload
            .chunks_exact(2)
            .map(|b| u16::from_le_bytes(b.try_into().unwrap()) as f64)
            .collect(),
        DType::Uint32 => payload
            .chunks_exact(4)
            .map(|b| u32::from_le_bytes(b.try_into().unwrap()) as f64)
            .collect(),
    };
    Tensor::with_dtype(shape, dtype, data)
}

pub fn write_fmap(t: &Tensor, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_fmap(t)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_fmap(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_fmap(&bytes).map_err(|e| match e {
        Error::Format { offset, message } => Error::Format {
            offset,
            message: format!("{}: {message}", path.display()),
        },
        other => other,
    })
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: impl AsRef<Path>) -> Result<T> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })
}

/// Pretty JSON with a trailing newline.
pub fn write_json<T: Serialize>(value: &T, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut text = serde_json::to_string_pretty(value).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
struct Manifest {
    params: BTreeMap<String, String>,
    #[serde(default)]
    scalars: BTreeMap<String, f64>,
    #[serde(default)]
    meta: serde_json::Value,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamBundle {
    pub params: BTreeMap<String, Tensor>,
    pub scalars: BTreeMap<String, f64>,
    pub meta: serde_json::Value,
}

impl ParamBundle {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert_tensor(&mut self, name: impl Into<String>, t: Tensor) {
        self.params.insert(name.into(), t);
    }

    pub fn insert_scalar(&mut self, name: impl Into<String>, v: f64) {
        self.scalars.insert(name.into(), v);
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .ok_or_else(|| Error::input(format!("parameter bundle has no tensor \"{name}\"")))
    }

    /// Fetches a tensor and checks its shape.
    pub fn tensor_shaped(&self, name: &str, shape: &[usize]) -> Result<Tensor> {
        let t = self.tensor(name)?;
        if t.shape() != shape {
            return Err(Error::shape(format!(
                "parameter \"{name}\" has shape {:?}, expected {shape:?}",
                t.shape()
            )));
        }
        Ok(t.to_f64())
    }

    pub fn scalar(&self, name: &str) -> Result<f64> {
        self.scalars
            .get(name)
            .copied()
            .ok_or_else(|| Error::input(format!("parameter bundle has no scalar \"{name}\"")))
    }

    /// Writes `manifest.json` and one `<name>.fmap` per tensor into `dir`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut manifest = Manifest {
            scalars: self.scalars.clone(),
            meta: self.meta.clone(),
            ..Default::default()
        };
        for (name, t) in &self.params {
            let file = format!("{name}.fmap");
            write_fmap(t, dir.join(&file))?;
            manifest.params.insert(name.clone(), file);
        }
        write_json(&manifest, dir.join(MANIFEST_FILE))
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let manifest: Manifest = read_json(dir.join(MANIFEST_FILE))?;
        let mut params = BTreeMap::new();
        for (name, rel) in &manifest.params {
            let path: PathBuf = dir.join(rel);
            params.insert(name.clone(), read_fmap(&path)?);
        }
        Ok(Self {
            params,
            scalars: manifest.scalars,
            meta: manifest.meta,
        })
    }
}
