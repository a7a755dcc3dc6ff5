//! Binary container of named `f64` tensors with shape headers.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic   b"NRTA"
//! version u32            (currently 1)
//! kind    u32 len + utf8 (what the archive holds, e.g. "denoiser")
//! count   u32
//! count × { name: u32 len + utf8, ndim: u32, dims: ndim × u64, data: prod(dims) × f64 }
//! ```
//!
//! Names are unique and stored in sorted order, so encoding is canonical.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use ndarray::{ArrayD, IxDyn};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"NRTA";
pub const FORMAT_VERSION: u32 = 1;
const MAX_NDIM: usize = 8;

#[derive(Clone, Debug, PartialEq)]
pub struct TensorArchive {
    kind: String,
    tensors: BTreeMap<String, ArrayD<f64>>,
}

impl TensorArchive {
    pub fn new(kind: impl Into<String>) -> Self {
        Self {
            kind: kind.into(),
            tensors: BTreeMap::new(),
        }
    }

    pub fn kind(&self) -> &str {
        &self.kind
    }

    pub fn insert(&mut self, name: impl Into<String>, value: ArrayD<f64>) {
        self.tensors.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<&ArrayD<f64>> {
        self.tensors.get(name)
    }

    pub fn require(&self, name: &str) -> Result<&ArrayD<f64>> {
        self.get(name)
            .ok_or_else(|| Error::Data(format!("archive '{}' has no tensor '{name}'", self.kind)))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        put_str(&mut out, &self.kind);
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            put_str(&mut out, name);
            out.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &x in t.as_standard_layout().iter() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> std::result::Result<Self, String> {
        let mut r = Reader { buf: bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err("bad magic".into());
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(format!("unsupported format version {version}"));
        }
        let kind = r.string()?;
        let count = r.u32()? as usize;
        let mut tensors = BTreeMap::new();
        for _ in 0..count {
            let name = r.string()?;
            let ndim = r.u32()? as usize;
            if ndim > MAX_NDIM {
                return Err(format!("tensor {name}: {ndim} dimensions"));
            }
            let mut dims = Vec::with_capacity(ndim);
            let mut len: usize = 1;
            for _ in 0..ndim {
                let d = usize::try_from(r.u64()?).map_err(|_| "dimension overflow".to_string())?;
                len = len.checked_mul(d).ok_or("element count overflow")?;
                dims.push(d);
            }
            let bytes_needed = len.checked_mul(8).ok_or("byte count overflow")?;
            let raw = r.take(bytes_needed)?;
            let data: Vec<f64> = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let t = ArrayD::from_shape_vec(IxDyn(&dims), data).map_err(|e| e.to_string())?;
            if tensors.insert(name.clone(), t).is_some() {
                return Err(format!("duplicate tensor name {name}"));
            }
        }
        if r.pos != bytes.len() {
            return Err(format!("{} trailing bytes", bytes.len() - r.pos));
        }
        Ok(Self { kind, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|reason| Error::Format {
            path: path.to_path_buf(),
            reason,
        })
    }

    /// Loads and checks the archive kind.
    pub fn load_kind(path: &Path, kind: &str) -> Result<Self> {
        let a = Self::load(path)?;
        if a.kind != kind {
            return Err(Error::Format {
                path: path.to_path_buf(),
                reason: format!("expected a '{kind}' archive, found '{}'", a.kind),
            });
        }
        Ok(a)
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        let end = self.pos.checked_add(n).ok_or("length overflow")?;
        if end > self.buf.len() {
            return Err(format!("truncated: need {n} bytes at offset {}", self.pos));
        }
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> std::result::Result<u64, String> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> std::result::Result<String, String> {
        let n = self.u32()? as usize;
        let raw = self.take(n)?;
        String::from_utf8(raw.to_vec()).map_err(|_| "invalid utf-8 in name".to_string())
    }
}

/// Writes through a sibling temporary file and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    let mut tmp = PathBuf::from(path);
    let file_name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    tmp.set_file_name(format!(".{file_name}.tmp"));
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}
