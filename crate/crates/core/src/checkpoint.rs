//! Binary parameter files.
//!
//! Layout (little-endian): `"CIN1"`, version `u32`, entry count `u32`, then per
//! entry a `u16` name length, the UTF-8 name, a `u8` rank, the dims as `u32`s
//! and the values as `f32`s.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{Cinet, ModelConfig};
use crate::params::ParamStore;
use crate::tensor::{Scalar, Tensor};

pub const MAGIC: &[u8; 4] = b"CIN1";
pub const VERSION: u32 = 1;

/// One named tensor as stored on disk.
#[derive(Clone, Debug, PartialEq)]
pub struct Entry {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl Entry {
    pub fn from_tensor<T: Scalar>(name: &str, t: &Tensor<T>) -> Self {
        Entry {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            data: t.data().iter().map(|v| v.as_f64() as f32).collect(),
        }
    }

    pub fn to_tensor<T: Scalar>(&self) -> Result<Tensor<T>> {
        Tensor::new(self.shape.clone(), self.data.iter().map(|&v| T::of(v as f64)).collect())
            .map_err(|e| Error::Checkpoint(format!("entry {}: {e}", self.name)))
    }
}

pub fn encode(entries: &[Entry]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let count = u32::try_from(entries.len()).map_err(|_| Error::Checkpoint("too many entries".into()))?;
    out.extend_from_slice(&count.to_le_bytes());
    for e in entries {
        let name = e.name.as_bytes();
        let len = u16::try_from(name.len())
            .map_err(|_| Error::Checkpoint(format!("name too long: {}", e.name)))?;
        let rank = u8::try_from(e.shape.len())
            .map_err(|_| Error::Checkpoint(format!("rank too large: {}", e.name)))?;
        if e.shape.iter().product::<usize>() != e.data.len() {
            return Err(Error::Checkpoint(format!("entry {} has inconsistent length", e.name)));
        }
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(name);
        out.push(rank);
        for &d in &e.shape {
            let d = u32::try_from(d).map_err(|_| Error::Checkpoint(format!("dim too large: {}", e.name)))?;
            out.extend_from_slice(&d.to_le_bytes());
        }
        for v in &e.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
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
}

pub fn decode(bytes: &[u8]) -> Result<Vec<Entry>> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4).ok() != Some(&MAGIC[..]) {
        return Err(Error::Checkpoint("bad magic; not a checkpoint file".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let count = r.u32()? as usize;
    let mut entries = Vec::with_capacity(count.min(4096));
    for _ in 0..count {
        let len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::Checkpoint("entry name is not UTF-8".into()))?
            .to_string();
        let rank = r.u8()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32()? as usize);
        }
        let numel = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::Checkpoint(format!("entry {name} is too large")))?;
        let raw = r.take(numel.checked_mul(4).ok_or_else(|| Error::Checkpoint("overflow".into()))?)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        entries.push(Entry { name, shape, data });
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(entries)
}

pub fn write_file(path: impl AsRef<Path>, entries: &[Entry]) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode(entries)?).map_err(|e| Error::io(path, e))
}

pub fn read_file(path: impl AsRef<Path>) -> Result<Vec<Entry>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

/// Every parameter of a store, in registration order.
pub fn entries_from_store<T: Scalar>(store: &ParamStore<T>) -> Vec<Entry> {
    store.iter().map(|p| Entry::from_tensor(&p.name, &p.value)).collect()
}

fn assign<T: Scalar>(store: &mut ParamStore<T>, entry: &Entry) -> Result<()> {
    let id = store
        .find(&entry.name)
        .ok_or_else(|| Error::Checkpoint(format!("unexpected entry {}", entry.name)))?;
    let expected = store.value(id).shape();
    if expected != entry.shape.as_slice() {
        return Err(Error::Checkpoint(format!(
            "entry {} has shape {:?}, model expects {:?}",
            entry.name, entry.shape, expected
        )));
    }
    store.set(id, entry.to_tensor()?)
}

/// Replace every parameter. The entries must name exactly the store's
/// parameters with matching shapes.
pub fn load_into_store<T: Scalar>(store: &mut ParamStore<T>, entries: &[Entry]) -> Result<()> {
    if entries.len() != store.len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint has {} entries, model has {} parameters",
            entries.len(),
            store.len()
        )));
    }
    for e in entries {
        assign(store, e)?;
    }
    Ok(())
}

/// Load the entries whose name starts with `prefix`; returns how many were
/// loaded. Every store parameter under `prefix` must be covered.
pub fn load_matching<T: Scalar>(store: &mut ParamStore<T>, entries: &[Entry], prefix: &str) -> Result<usize> {
    let mut loaded = 0;
    for e in entries.iter().filter(|e| e.name.starts_with(prefix)) {
        assign(store, e)?;
        loaded += 1;
    }
    let wanted = store.iter().filter(|p| p.name.starts_with(prefix)).count();
    if loaded != wanted {
        return Err(Error::Checkpoint(format!(
            "expected {wanted} {prefix}* entries, found {loaded}"
        )));
    }
    Ok(loaded)
}

pub fn save_model<T: Scalar>(model: &Cinet<T>, path: impl AsRef<Path>) -> Result<()> {
    write_file(path, &entries_from_store(model.params()))
}

/// Build a model for `config` and fill it from `path`.
pub fn load_model<T: Scalar>(config: ModelConfig, path: impl AsRef<Path>) -> Result<Cinet<T>> {
    let entries = read_file(path)?;
    let mut model = Cinet::new(config)?;
    load_into_store(model.params_mut(), &entries)?;
    Ok(model)
}
