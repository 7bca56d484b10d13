//! Parameter checkpoint files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic    4 bytes  "GSCK"
//! version  u32      CHECKPOINT_VERSION
//! kind     u32      scalar width in bytes (4 = f32, 8 = f64)
//! n_meta   u32      then n_meta × { u32 key_len, key, u32 val_len, val }
//! n_entry  u32      then n_entry × { u32 name_len, name, u32 ndim, ndim × u64 extent }
//! payload           each entry's scalars, row-major, in manifest order
//! ```
//!
//! Strings are UTF-8 without terminator.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

use super::{Real, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"GSCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<T> {
    /// Free-form string metadata (e.g. `setpool.strategy`).
    pub meta: Vec<(String, String)>,
    /// Named tensors in manifest order.
    pub tensors: Vec<(String, Tensor<T>)>,
}

impl<T: Real> Checkpoint<T> {
    pub fn meta_value(&self, key: &str) -> Option<&str> {
        self.meta.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&T::KIND.to_le_bytes());
        let put_str = |out: &mut Vec<u8>, s: &str| {
            out.extend_from_slice(&(s.len() as u32).to_le_bytes());
            out.extend_from_slice(s.as_bytes());
        };
        out.extend_from_slice(&(self.meta.len() as u32).to_le_bytes());
        for (k, v) in &self.meta {
            put_str(&mut out, k);
            put_str(&mut out, v);
        }
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            put_str(&mut out, name);
            out.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
            for &e in t.shape() {
                out.extend_from_slice(&(e as u64).to_le_bytes());
            }
        }
        for (_, t) in &self.tensors {
            for &v in t.data() {
                v.to_le(&mut out);
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0, path };
        if r.take(4)? != CHECKPOINT_MAGIC {
            return Err(Error::format(path, "not a checkpoint (bad magic)"));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::format(path, format!("unsupported checkpoint version {version}")));
        }
        let kind = r.u32()?;
        if kind != T::KIND {
            return Err(Error::format(path, format!("scalar width {kind} does not match {}", T::NAME)));
        }
        let n_meta = r.u32()?;
        let mut meta = Vec::with_capacity(n_meta as usize);
        for _ in 0..n_meta {
            meta.push((r.string()?, r.string()?));
        }
        let n_entry = r.u32()?;
        let mut manifest = Vec::with_capacity(n_entry as usize);
        for _ in 0..n_entry {
            let name = r.string()?;
            let ndim = r.u32()? as usize;
            let shape = (0..ndim).map(|_| r.u64().map(|e| e as usize)).collect::<Result<Vec<_>>>()?;
            manifest.push((name, shape));
        }
        let width = std::mem::size_of::<T>();
        let mut tensors = Vec::with_capacity(manifest.len());
        for (name, shape) in manifest {
            let numel: usize = shape.iter().product();
            let raw = r.take(numel * width)?;
            let data = raw.chunks_exact(width).map(T::from_le).collect();
            let t = Tensor::new(shape, data).map_err(|e| Error::format(path, format!("{name}: {e}")))?;
            tensors.push((name, t));
        }
        if r.pos != bytes.len() {
            return Err(Error::format(path, "trailing bytes after payload"));
        }
        Ok(Self { meta, tensors })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::format(self.path, "truncated file"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        let raw = self.take(n)?;
        String::from_utf8(raw.to_vec()).map_err(|_| Error::format(self.path, "invalid UTF-8 string"))
    }
}

pub fn write_checkpoint<T: Real>(path: &Path, ckpt: &Checkpoint<T>) -> Result<()> {
    fs::write(path, ckpt.to_bytes()).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint<T: Real>(path: &Path) -> Result<Checkpoint<T>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes, path)
}
