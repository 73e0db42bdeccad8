//! Versioned binary model container, shared by the classifier and the flow.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic      4 bytes  "CFLW"
//! version    u32      (currently 1)
//! kind       u8       1 = classifier, 2 = flow
//! config     u32 length + UTF-8 JSON
//! params     u32 count, then per parameter:
//!              u16 name length + UTF-8 name
//!              u8 rank, rank x u32 extents
//!              extents product x f64 values
//! ```
//!
//! Malformed input yields a format error carrying the byte offset.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MODEL_MAGIC: [u8; 4] = *b"CFLW";
pub const MODEL_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    Classifier,
    Flow,
}

impl ModelKind {
    fn to_byte(self) -> u8 {
        match self {
            ModelKind::Classifier => 1,
            ModelKind::Flow => 2,
        }
    }

    fn from_byte(b: u8, offset: u64) -> Result<Self> {
        match b {
            1 => Ok(ModelKind::Classifier),
            2 => Ok(ModelKind::Flow),
            other => Err(Error::Format {
                offset,
                message: format!("unknown model kind {other}"),
            }),
        }
    }
}

/// One named parameter tensor inside the container.
#[derive(Debug, Clone)]
pub struct ParamBlock {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl ParamBlock {
    pub fn from_tensor(name: &str, t: &Tensor) -> Self {
        ParamBlock {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            data: t.data().to_vec(),
        }
    }
}

/// Deserialized "CFLW" file: kind + config JSON + parameter blocks.
#[derive(Debug, Clone)]
pub struct ModelContainer {
    pub kind: ModelKind,
    pub config_json: String,
    pub params: Vec<ParamBlock>,
}

impl ModelContainer {
    pub fn new(kind: ModelKind, config_json: String, params: Vec<ParamBlock>) -> Self {
        ModelContainer { kind, config_json, params }
    }

    /// Serialize to bytes; byte-identical for identical content.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(&MODEL_MAGIC);
        out.extend_from_slice(&MODEL_FORMAT_VERSION.to_le_bytes());
        out.push(self.kind.to_byte());
        let cfg = self.config_json.as_bytes();
        out.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
        out.extend_from_slice(cfg);
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for p in &self.params {
            let name = p.name.as_bytes();
            if name.len() > u16::MAX as usize {
                return Err(Error::contract(format!("parameter name too long: {}", p.name)));
            }
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name);
            if p.shape.len() > u8::MAX as usize {
                return Err(Error::contract("parameter rank exceeds 255"));
            }
            out.push(p.shape.len() as u8);
            for &e in &p.shape {
                out.extend_from_slice(&(e as u32).to_le_bytes());
            }
            let expect: usize = p.shape.iter().product();
            if expect != p.data.len() {
                return Err(Error::dimension(format!(
                    "parameter {}: shape {:?} vs {} values",
                    p.name,
                    p.shape,
                    p.data.len()
                )));
            }
            for v in &p.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Cursor { bytes, offset: 0 };
        let magic = r.take::<4>("magic")?;
        if magic != MODEL_MAGIC {
            return Err(Error::Format {
                offset: 0,
                message: format!("bad magic {magic:?}, expected \"CFLW\""),
            });
        }
        let version = u32::from_le_bytes(r.take::<4>("version")?);
        if version != MODEL_FORMAT_VERSION {
            return Err(Error::Format {
                offset: 4,
                message: format!("unsupported version {version}"),
            });
        }
        let kind_off = r.offset;
        let kind = ModelKind::from_byte(r.take::<1>("kind")?[0], kind_off)?;
        let cfg_len = u32::from_le_bytes(r.take::<4>("config length")?) as usize;
        let cfg_bytes = r.take_slice(cfg_len, "config JSON")?;
        let config_json = String::from_utf8(cfg_bytes.to_vec()).map_err(|e| Error::Format {
            offset: kind_off + 5,
            message: format!("config is not UTF-8: {e}"),
        })?;
        let count = u32::from_le_bytes(r.take::<4>("parameter count")?) as usize;
        let mut params = Vec::with_capacity(count);
        for i in 0..count {
            let name_len = u16::from_le_bytes(r.take::<2>("parameter name length")?) as usize;
            let name_off = r.offset;
            let name_bytes = r.take_slice(name_len, "parameter name")?;
            let name = String::from_utf8(name_bytes.to_vec()).map_err(|e| Error::Format {
                offset: name_off,
                message: format!("parameter {i} name is not UTF-8: {e}"),
            })?;
            let rank = r.take::<1>("parameter rank")?[0] as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(u32::from_le_bytes(r.take::<4>("parameter extent")?) as usize);
            }
            let n: usize = shape.iter().product();
            let data_bytes = r.take_slice(n * 8, "parameter data")?;
            let mut data = Vec::with_capacity(n);
            for c in data_bytes.chunks_exact(8) {
                data.push(f64::from_le_bytes(c.try_into().unwrap()));
            }
            params.push(ParamBlock { name, shape, data });
        }
        if r.offset as usize != bytes.len() {
            return Err(Error::Format {
                offset: r.offset,
                message: format!("{} trailing bytes", bytes.len() as u64 - r.offset),
            });
        }
        Ok(ModelContainer { kind, config_json, params })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(&self.to_bytes()?)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        BufReader::new(File::open(path)?).read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }

    /// Parameter block by name.
    pub fn param(&self, name: &str) -> Result<&ParamBlock> {
        self.params
            .iter()
            .find(|p| p.name == name)
            .ok_or_else(|| Error::Format {
                offset: 0,
                message: format!("missing parameter block {name}"),
            })
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    offset: u64,
}

impl<'a> Cursor<'a> {
    fn take<const N: usize>(&mut self, what: &str) -> Result<[u8; N]> {
        let s = self.take_slice(N, what)?;
        Ok(s.try_into().unwrap())
    }

    fn take_slice(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let start = self.offset as usize;
        if start + n > self.bytes.len() {
            return Err(Error::Format {
                offset: self.offset,
                message: format!(
                    "truncated while reading {what}: need {n} bytes, {} left",
                    self.bytes.len() - start
                ),
            });
        }
        self.offset += n as u64;
        Ok(&self.bytes[start..start + n])
    }
}
