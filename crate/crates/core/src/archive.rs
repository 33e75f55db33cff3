//! Named-array archive used for checkpoints and exported models.
//!
//! Layout (little-endian):
//!
//! ```text
//! magic   8 bytes  "SRARCH01"
//! count   u32
//! entry*  u16 name_len | name (utf-8) | u8 kind
//!         kind 0: u8 ndim | u64 dim * ndim | f64 * prod(dims)
//!         kind 1: u64 len | utf-8 bytes
//! ```
//!
//! Entries are written in name order, so equal contents give equal bytes.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"SRARCH01";
const MAX_NAME: usize = 1024;
const MAX_NDIM: usize = 8;

#[derive(Debug, Clone, PartialEq)]
pub enum Entry {
    Array { shape: Vec<usize>, data: Vec<f64> },
    Text(String),
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Archive {
    entries: BTreeMap<String, Entry>,
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Format(format!(
                "truncated archive: need {n} bytes at offset {}",
                self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

impl Archive {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn insert_array(&mut self, name: impl Into<String>, shape: &[usize], data: &[f64]) {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.entries.insert(
            name.into(),
            Entry::Array {
                shape: shape.to_vec(),
                data: data.to_vec(),
            },
        );
    }

    pub fn insert_text(&mut self, name: impl Into<String>, text: impl Into<String>) {
        self.entries.insert(name.into(), Entry::Text(text.into()));
    }

    pub fn array(&self, name: &str) -> Result<(&[usize], &[f64])> {
        match self.entries.get(name) {
            Some(Entry::Array { shape, data }) => Ok((shape, data)),
            Some(Entry::Text(_)) => Err(Error::Format(format!("entry {name:?} is text, expected array"))),
            None => Err(Error::Format(format!("archive has no entry {name:?}"))),
        }
    }

    pub fn text(&self, name: &str) -> Result<&str> {
        match self.entries.get(name) {
            Some(Entry::Text(t)) => Ok(t),
            Some(Entry::Array { .. }) => Err(Error::Format(format!("entry {name:?} is an array, expected text"))),
            None => Err(Error::Format(format!("archive has no entry {name:?}"))),
        }
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    /// Copies every entry of `other` in under `prefix`.
    pub fn insert_prefixed(&mut self, prefix: &str, other: &Archive) {
        for (k, v) in &other.entries {
            self.entries.insert(format!("{prefix}{k}"), v.clone());
        }
    }

    /// Entries whose names start with `prefix`, with the prefix removed.
    pub fn extract_prefixed(&self, prefix: &str) -> Archive {
        let entries = self
            .entries
            .iter()
            .filter_map(|(k, v)| k.strip_prefix(prefix).map(|s| (s.to_string(), v.clone())))
            .filter(|(k, _)| !k.is_empty())
            .collect();
        Archive { entries }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, entry) in &self.entries {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            match entry {
                Entry::Array { shape, data } => {
                    out.push(0);
                    out.push(shape.len() as u8);
                    for &d in shape {
                        out.extend_from_slice(&(d as u64).to_le_bytes());
                    }
                    for v in data {
                        out.extend_from_slice(&v.to_le_bytes());
                    }
                }
                Entry::Text(t) => {
                    out.push(1);
                    out.extend_from_slice(&(t.len() as u64).to_le_bytes());
                    out.extend_from_slice(t.as_bytes());
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { buf: bytes, pos: 0 };
        if r.take(MAGIC.len())? != MAGIC {
            return Err(Error::Format("not an archive (bad magic)".into()));
        }
        let count = r.u32()? as usize;
        let mut entries = BTreeMap::new();
        for _ in 0..count {
            let name_len = r.u16()? as usize;
            if name_len == 0 || name_len > MAX_NAME {
                return Err(Error::Format(format!("entry name length {name_len} out of range")));
            }
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| Error::Format("entry name is not utf-8".into()))?
                .to_string();
            let entry = match r.u8()? {
                0 => {
                    let ndim = r.u8()? as usize;
                    if ndim > MAX_NDIM {
                        return Err(Error::Format(format!("entry {name:?} has {ndim} dimensions")));
                    }
                    let mut shape = Vec::with_capacity(ndim);
                    let mut n: usize = 1;
                    for _ in 0..ndim {
                        let d = usize::try_from(r.u64()?)
                            .map_err(|_| Error::Format(format!("entry {name:?} dimension overflows")))?;
                        n = n
                            .checked_mul(d)
                            .ok_or_else(|| Error::Format(format!("entry {name:?} size overflows")))?;
                        shape.push(d);
                    }
                    if n.checked_mul(8).is_none_or(|b| b > r.remaining()) {
                        return Err(Error::Format(format!("entry {name:?} data truncated")));
                    }
                    let data = r
                        .take(n * 8)?
                        .chunks_exact(8)
                        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                        .collect();
                    Entry::Array { shape, data }
                }
                1 => {
                    let len = usize::try_from(r.u64()?)
                        .map_err(|_| Error::Format(format!("entry {name:?} text length overflows")))?;
                    let text = std::str::from_utf8(r.take(len)?)
                        .map_err(|_| Error::Format(format!("entry {name:?} text is not utf-8")))?;
                    Entry::Text(text.to_string())
                }
                k => return Err(Error::Format(format!("entry {name:?} has unknown kind {k}"))),
            };
            if entries.insert(name.clone(), entry).is_some() {
                return Err(Error::Format(format!("duplicate entry {name:?}")));
            }
        }
        if r.remaining() != 0 {
            return Err(Error::Format(format!("{} trailing bytes after archive", r.remaining())));
        }
        Ok(Archive { entries })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Archive::from_bytes(&bytes).map_err(|e| match e {
            Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
            other => other,
        })
    }
}
