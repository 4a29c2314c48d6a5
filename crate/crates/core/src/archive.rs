//! Versioned binary array archive.
//!
//! One container format serves checkpoints (weights + architecture
//! descriptor + schedule id in the meta block) and persisted
//! trajectory/feature caches (entries keyed by step/layer/tensor-name).
//! Values are stored as little-endian `f64` regardless of the in-memory
//! scalar type, so checkpoints are portable between `f32` and `f64` builds.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tape::Tensor;

const MAGIC: &[u8; 4] = b"LARC";
const VERSION: u32 = 1;

#[derive(Debug, Clone, Default)]
pub struct Archive {
    /// Free-form descriptor (JSON by convention).
    pub meta: String,
    entries: Vec<Entry>,
}

#[derive(Debug, Clone)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Archive {
    pub fn new(meta: impl Into<String>) -> Self {
        Archive {
            meta: meta.into(),
            entries: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.name.as_str())
    }

    pub fn push<T: Scalar>(&mut self, name: impl Into<String>, shape: &[usize], data: &[T]) {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.entries.push(Entry {
            name: name.into(),
            shape: shape.to_vec(),
            data: data.iter().map(|v| v.to_f64_lossy()).collect(),
        });
    }

    pub fn push_tensor<T: Scalar>(&mut self, name: impl Into<String>, t: &Tensor<T>) {
        self.push(name, t.shape(), &t.data());
    }

    pub fn get(&self, name: &str) -> Option<(&[usize], &[f64])> {
        self.entries
            .iter()
            .find(|e| e.name == name)
            .map(|e| (e.shape.as_slice(), e.data.as_slice()))
    }

    pub fn get_as<T: Scalar>(&self, name: &str) -> Result<(Vec<usize>, Vec<T>)> {
        let (shape, data) = self
            .get(name)
            .ok_or_else(|| Error::Archive(format!("missing entry '{name}'")))?;
        Ok((
            shape.to_vec(),
            data.iter().map(|v| T::from_f64_lossy(*v)).collect(),
        ))
    }

    /// Load an entry into an existing leaf tensor (shape must match).
    pub fn load_into<T: Scalar>(&self, name: &str, target: &Tensor<T>) -> Result<()> {
        let (shape, data) = self.get_as::<T>(name)?;
        if shape != target.shape() {
            return Err(Error::shape(target.shape(), &shape, name));
        }
        target.update_data(|d| d.copy_from_slice(&data));
        Ok(())
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut buf: Vec<u8> = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        let meta = self.meta.as_bytes();
        buf.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        buf.extend_from_slice(meta);
        buf.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for e in &self.entries {
            let name = e.name.as_bytes();
            buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
            buf.extend_from_slice(name);
            buf.push(e.shape.len() as u8);
            for d in &e.shape {
                buf.extend_from_slice(&(*d as u32).to_le_bytes());
            }
            for v in &e.data {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        // Atomic write: temp file in the same directory, then rename.
        let tmp = path.with_extension("tmp-archive");
        {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(&buf)?;
            f.sync_all()?;
        }
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Archive> {
        let mut bytes = Vec::new();
        fs::File::open(path)?.read_to_end(&mut bytes)?;
        let mut cur = Cursor { bytes: &bytes, pos: 0 };
        if cur.take(4)? != MAGIC {
            return Err(Error::Archive("bad magic".into()));
        }
        let version = cur.u32()?;
        if version != VERSION {
            return Err(Error::Archive(format!("unsupported version {version}")));
        }
        let meta_len = cur.u32()? as usize;
        let meta = String::from_utf8(cur.take(meta_len)?.to_vec())
            .map_err(|_| Error::Archive("meta is not utf-8".into()))?;
        let n = cur.u32()? as usize;
        let mut entries = Vec::with_capacity(n);
        for _ in 0..n {
            let name_len = cur.u16()? as usize;
            let name = String::from_utf8(cur.take(name_len)?.to_vec())
                .map_err(|_| Error::Archive("entry name is not utf-8".into()))?;
            let ndim = cur.take(1)?[0] as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(cur.u32()? as usize);
            }
            let numel: usize = shape.iter().product();
            let mut data = Vec::with_capacity(numel);
            for _ in 0..numel {
                let raw = cur.take(8)?;
                data.push(f64::from_le_bytes(raw.try_into().unwrap()));
            }
            entries.push(Entry { name, shape, data });
        }
        Ok(Archive { meta, entries })
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Archive("truncated archive".into()));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }
}
