//! Binary artifact formats, all little-endian.
//!
//! - `HSS1` dataset: magic, u32 version, u32 N, u16 D_θ, u16 H, u16 W, u16 C,
//!   then the `N·D_θ` θ block and the `N·H·W·C` field block as f32.
//! - `HSSM` checkpoint: magic, u16 version, u32 descriptor length, TOML
//!   descriptor, u32 tensor count, then per tensor u16 ndim, u32 dims, f32 data.
//! - `HSSS` summary cache: magic, u32 version, u32 N, u16 width, 32-byte
//!   dataset hash, 32-byte scheme hash, then `N·width` f32.

use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
    #[error("{0}: not a {1} file")]
    BadMagic(String, &'static str),
    #[error("{0}: unsupported version {1}")]
    Version(String, u32),
    #[error("{0}: truncated or malformed ({1})")]
    Malformed(String, String),
    #[error("{0}: cache keyed by a different dataset or binning")]
    StaleCache(String),
}

pub type Result<T> = std::result::Result<T, IoError>;

const DATASET_MAGIC: &[u8; 4] = b"HSS1";
const DATASET_VERSION: u32 = 1;
const MODEL_MAGIC: &[u8; 4] = b"HSSM";
const MODEL_VERSION: u16 = 1;
const SUMMARY_MAGIC: &[u8; 4] = b"HSSS";
const SUMMARY_VERSION: u32 = 1;

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> IoError + '_ {
    move |source| IoError::Io {
        path: path.display().to_string(),
        source,
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn file_hash(path: &Path) -> Result<String> {
    Ok(sha256_hex(&fs::read(path).map_err(io_err(path))?))
}

/// Writes through a temporary sibling and renames, so readers never see a
/// half-written artifact.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    let tmp = path.with_extension("partial");
    let mut f = fs::File::create(&tmp).map_err(io_err(&tmp))?;
    f.write_all(bytes).map_err(io_err(&tmp))?;
    f.sync_all().map_err(io_err(&tmp))?;
    fs::rename(&tmp, path).map_err(io_err(path))
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: String,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(IoError::Malformed(
                self.path.clone(),
                format!("needed {n} bytes at offset {}", self.pos),
            ));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        Ok(self
            .take(n * 4)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(IoError::Malformed(
                self.path.clone(),
                format!("{} trailing bytes", self.buf.len() - self.pos),
            ));
        }
        Ok(())
    }
}

fn push_f32s(out: &mut Vec<u8>, xs: &[f32]) {
    out.reserve(xs.len() * 4);
    for x in xs {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

fn checked_u16(v: usize, what: &str) -> u16 {
    u16::try_from(v).unwrap_or_else(|_| panic!("{what} = {v} does not fit in u16"))
}

/// θ and field blocks of a simulated dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub n: usize,
    pub d_theta: usize,
    pub size: usize,
    pub channels: usize,
    pub thetas: Vec<f32>,
    pub fields: Vec<f32>,
}

impl Dataset {
    pub fn field_len(&self) -> usize {
        self.size * self.size * self.channels
    }

    pub fn theta(&self, i: usize) -> Vec<f64> {
        self.thetas[i * self.d_theta..(i + 1) * self.d_theta]
            .iter()
            .map(|&x| x as f64)
            .collect()
    }

    pub fn field(&self, i: usize) -> &[f32] {
        let l = self.field_len();
        &self.fields[i * l..(i + 1) * l]
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(20 + 4 * (self.thetas.len() + self.fields.len()));
        out.extend_from_slice(DATASET_MAGIC);
        out.extend_from_slice(&DATASET_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.n as u32).to_le_bytes());
        for (v, what) in [
            (self.d_theta, "d_theta"),
            (self.size, "H"),
            (self.size, "W"),
            (self.channels, "C"),
        ] {
            out.extend_from_slice(&checked_u16(v, what).to_le_bytes());
        }
        push_f32s(&mut out, &self.thetas);
        push_f32s(&mut out, &self.fields);
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &str) -> Result<Self> {
        let mut r = Reader {
            buf: bytes,
            pos: 0,
            path: path.to_string(),
        };
        if r.take(4)? != DATASET_MAGIC {
            return Err(IoError::BadMagic(path.into(), "HSS1 dataset"));
        }
        let version = r.u32()?;
        if version != DATASET_VERSION {
            return Err(IoError::Version(path.into(), version));
        }
        let n = r.u32()? as usize;
        let d_theta = r.u16()? as usize;
        let h = r.u16()? as usize;
        let w = r.u16()? as usize;
        let channels = r.u16()? as usize;
        if h != w {
            return Err(IoError::Malformed(path.into(), format!("non-square {h}×{w}")));
        }
        let thetas = r.f32s(n * d_theta)?;
        let fields = r.f32s(n * h * w * channels)?;
        r.finish()?;
        Ok(Self {
            n,
            d_theta,
            size: h,
            channels,
            thetas,
            fields,
        })
    }

    pub fn write(&self, path: &Path) -> Result<String> {
        let bytes = self.to_bytes();
        write_atomic(path, &bytes)?;
        Ok(sha256_hex(&bytes))
    }

    /// Reads the dataset and returns it with the hash of its bytes.
    pub fn read(path: &Path) -> Result<(Self, String)> {
        let bytes = fs::read(path).map_err(io_err(path))?;
        let ds = Self::from_bytes(&bytes, &path.display().to_string())?;
        Ok((ds, sha256_hex(&bytes)))
    }
}

/// A model checkpoint: structured-text descriptor plus parameter tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub descriptor: String,
    pub tensors: Vec<Tensor<f32>>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MODEL_MAGIC);
        out.extend_from_slice(&MODEL_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.descriptor.len() as u32).to_le_bytes());
        out.extend_from_slice(self.descriptor.as_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for t in &self.tensors {
            out.extend_from_slice(&checked_u16(t.ndim(), "ndim").to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            push_f32s(&mut out, t.data());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &str) -> Result<Self> {
        let mut r = Reader {
            buf: bytes,
            pos: 0,
            path: path.to_string(),
        };
        if r.take(4)? != MODEL_MAGIC {
            return Err(IoError::BadMagic(path.into(), "HSSM checkpoint"));
        }
        let version = r.u16()?;
        if version != MODEL_VERSION {
            return Err(IoError::Version(path.into(), version as u32));
        }
        let len = r.u32()? as usize;
        let descriptor = String::from_utf8(r.take(len)?.to_vec())
            .map_err(|e| IoError::Malformed(path.into(), e.to_string()))?;
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count);
        for _ in 0..count {
            let ndim = r.u16()? as usize;
            let shape = (0..ndim)
                .map(|_| r.u32().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let data = r.f32s(shape.iter().product())?;
            tensors.push(
                Tensor::new(shape, data).map_err(|e| IoError::Malformed(path.into(), e.to_string()))?,
            );
        }
        r.finish()?;
        Ok(Self {
            descriptor,
            tensors,
        })
    }

    pub fn write(&self, path: &Path) -> Result<String> {
        let bytes = self.to_bytes();
        write_atomic(path, &bytes)?;
        Ok(sha256_hex(&bytes))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(io_err(path))?;
        Self::from_bytes(&bytes, &path.display().to_string())
    }
}

/// Cached summary rows keyed by the dataset and binning-scheme hashes.
#[derive(Debug, Clone, PartialEq)]
pub struct SummaryCache {
    pub dataset_hash: [u8; 32],
    pub scheme_hash: [u8; 32],
    pub width: usize,
    pub rows: Vec<f32>,
}

impl SummaryCache {
    pub fn n(&self) -> usize {
        self.rows.len().checked_div(self.width).unwrap_or(0)
    }

    pub fn row(&self, i: usize) -> Vec<f64> {
        self.rows[i * self.width..(i + 1) * self.width]
            .iter()
            .map(|&x| x as f64)
            .collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(SUMMARY_MAGIC);
        out.extend_from_slice(&SUMMARY_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.n() as u32).to_le_bytes());
        out.extend_from_slice(&checked_u16(self.width, "summary width").to_le_bytes());
        out.extend_from_slice(&self.dataset_hash);
        out.extend_from_slice(&self.scheme_hash);
        push_f32s(&mut out, &self.rows);
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &str) -> Result<Self> {
        let mut r = Reader {
            buf: bytes,
            pos: 0,
            path: path.to_string(),
        };
        if r.take(4)? != SUMMARY_MAGIC {
            return Err(IoError::BadMagic(path.into(), "HSSS summary cache"));
        }
        let version = r.u32()?;
        if version != SUMMARY_VERSION {
            return Err(IoError::Version(path.into(), version));
        }
        let n = r.u32()? as usize;
        let width = r.u16()? as usize;
        let dataset_hash = r.take(32)?.try_into().unwrap();
        let scheme_hash = r.take(32)?.try_into().unwrap();
        let rows = r.f32s(n * width)?;
        r.finish()?;
        Ok(Self {
            dataset_hash,
            scheme_hash,
            width,
            rows,
        })
    }

    /// Loads a cache only if it was built from the given dataset and scheme.
    pub fn load_matching(path: &Path, dataset_hash: &[u8; 32], scheme_hash: &[u8; 32]) -> Result<Option<Self>> {
        let bytes = match fs::read(path) {
            Ok(b) => b,
            Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(None),
            Err(e) => return Err(io_err(path)(e)),
        };
        let c = Self::from_bytes(&bytes, &path.display().to_string())?;
        if &c.dataset_hash != dataset_hash || &c.scheme_hash != scheme_hash {
            return Ok(None);
        }
        Ok(Some(c))
    }
}

/// Decodes a 64-character hex digest.
pub fn hash_bytes(hex_digest: &str) -> [u8; 32] {
    let mut out = [0u8; 32];
    if let Ok(v) = hex::decode(hex_digest) {
        if v.len() == 32 {
            out.copy_from_slice(&v);
        }
    }
    out
}
