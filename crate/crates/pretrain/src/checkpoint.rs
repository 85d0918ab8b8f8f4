//! The `RTDP` container shared by training checkpoints and exported models.
//!
//! Layout, all integers little-endian:
//! magic `RTDP`, format version `u32`, `u64` length + key-sorted `key=value`
//! text block, `u64` tensor count, then per tensor `u16` name length, UTF-8
//! name, `u8` rank, `u64` per dimension, raw `f32` data; finally a `u64`
//! FNV-1a checksum over every preceding byte.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::hash::Hasher;
use std::io::Write;
use std::path::{Path, PathBuf};

use fnv::FnvHasher;
use rtd_core::model::ModelConfig;
use rtd_core::Tensor;

use crate::error::{io_err, Error, Result};

pub const MAGIC: &[u8; 4] = b"RTDP";
pub const FORMAT_VERSION: u32 = 1;

const MODEL_PREFIX: &str = "model.";

/// Decoded container contents.
#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    /// Text block entries, sorted by key.
    pub meta: BTreeMap<String, String>,
    /// Tensors in stored order.
    pub tensors: Vec<(String, Tensor<f32>)>,
}

impl Container {
    pub fn new(config: &ModelConfig) -> Self {
        let meta = config
            .entries()
            .iter()
            .map(|(k, v)| (format!("{MODEL_PREFIX}{k}"), v.to_string()))
            .collect();
        Self {
            meta,
            tensors: Vec::new(),
        }
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        let get = |k: &str| -> Result<usize> {
            let key = format!("{MODEL_PREFIX}{k}");
            self.meta
                .get(&key)
                .ok_or_else(|| Error::Integrity(format!("missing `{key}`")))?
                .parse()
                .map_err(|_| Error::Integrity(format!("`{key}` is not an integer")))
        };
        let c = ModelConfig {
            n_layers: get("n_layers")?,
            n_heads: get("n_heads")?,
            hidden: get("hidden")?,
            vocab_size: get("vocab_size")?,
            max_rel_distance: get("max_rel_distance")?,
            generator_hidden: get("generator_hidden")?,
            generator_layers: get("generator_layers")?,
            conv_kernel: get("conv_kernel")?,
        };
        c.validate()?;
        Ok(c)
    }

    /// Errors unless the stored model configuration equals `expected`.
    pub fn check_config(&self, expected: &ModelConfig) -> Result<()> {
        let found = self.model_config()?;
        let diffs: Vec<String> = found
            .entries()
            .iter()
            .zip(expected.entries())
            .filter(|(a, b)| a.1 != b.1)
            .map(|(a, b)| format!("{} = {} (configured {})", a.0, a.1, b.1))
            .collect();
        if diffs.is_empty() {
            Ok(())
        } else {
            Err(Error::ConfigMismatch(diffs.join(", ")))
        }
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor<f32>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        let mut text = String::new();
        for (k, v) in &self.meta {
            if k.contains(['=', '\n']) || v.contains('\n') {
                return Err(Error::Integrity(format!("unencodable entry `{k}`")));
            }
            text.push_str(k);
            text.push('=');
            text.push_str(v);
            text.push('\n');
        }
        out.extend_from_slice(&(text.len() as u64).to_le_bytes());
        out.extend_from_slice(text.as_bytes());
        out.extend_from_slice(&(self.tensors.len() as u64).to_le_bytes());
        for (name, t) in &self.tensors {
            let len = u16::try_from(name.len())
                .map_err(|_| Error::Integrity(format!("tensor name too long: {name}")))?;
            out.extend_from_slice(&len.to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(t.rank() as u8);
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for x in t.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        let sum = checksum(&out);
        out.extend_from_slice(&sum.to_le_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 || &bytes[..4] != MAGIC {
            return Err(Error::Integrity("missing RTDP header".into()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(Error::Version {
                found: version,
                expected: FORMAT_VERSION,
            });
        }
        if bytes.len() < 8 + 8 + 8 + 8 {
            return Err(Error::Integrity(format!("file truncated at {} bytes", bytes.len())));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 8);
        let stored = u64::from_le_bytes(tail.try_into().expect("8 bytes"));
        let actual = checksum(body);
        if stored != actual {
            return Err(Error::Integrity(format!(
                "checksum mismatch (stored {stored:016x}, computed {actual:016x})"
            )));
        }
        let mut r = Reader { buf: body, pos: 8 };
        let text_len = r.u64()? as usize;
        let text = std::str::from_utf8(r.take(text_len)?)
            .map_err(|_| Error::Integrity("text block is not UTF-8".into()))?;
        let mut meta = BTreeMap::new();
        for line in text.lines() {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Integrity(format!("bad text line {line:?}")))?;
            meta.insert(k.to_string(), v.to_string());
        }
        let count = r.u64()?;
        let mut tensors = Vec::new();
        for _ in 0..count {
            let name_len = u16::from_le_bytes(r.take(2)?.try_into().expect("2 bytes")) as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| Error::Integrity("tensor name is not UTF-8".into()))?
                .to_string();
            let rank = r.take(1)?[0] as usize;
            let shape: Vec<usize> = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<_>>()?;
            let n = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| Error::Integrity(format!("`{name}` shape overflows")))?;
            let raw = r.take(n.checked_mul(4).ok_or_else(|| Error::Integrity("size overflow".into()))?)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            let t = Tensor::new(&shape, data).map_err(|e| Error::Integrity(format!("`{name}`: {e}")))?;
            tensors.push((name, t));
        }
        if r.pos != body.len() {
            return Err(Error::Integrity(format!("{} trailing bytes", body.len() - r.pos)));
        }
        Ok(Self { meta, tensors })
    }

    /// Writes to a sibling temporary file, syncs, then renames over `path`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = temp_path(path);
        {
            let mut f = File::create(&tmp).map_err(io_err(&tmp))?;
            f.write_all(&bytes).map_err(io_err(&tmp))?;
            f.sync_all().map_err(io_err(&tmp))?;
        }
        fs::rename(&tmp, path).map_err(io_err(path))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(io_err(path))?;
        Self::from_bytes(&bytes)
    }
}

fn temp_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".tmp");
    path.with_file_name(name)
}

pub fn checksum(bytes: &[u8]) -> u64 {
    let mut h = FnvHasher::default();
    h.write(bytes);
    h.finish()
}

struct Reader<'b> {
    buf: &'b [u8],
    pos: usize,
}

impl<'b> Reader<'b> {
    fn take(&mut self, n: usize) -> Result<&'b [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Integrity(format!("unexpected end of data at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}
