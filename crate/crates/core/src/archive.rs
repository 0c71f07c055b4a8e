//! Tensor archive files, used for checkpoints, clips and fixtures.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic      8 bytes  "STCTARCH"
//! version    u32      = 1
//! count      u64
//! per entry:
//!   name_len u32, name (UTF-8)
//!   rank     u32, extents (u64 × rank)
//!   dtype    u8   (0 f64, 1 f32, 2 i32, 3 i64, 4 u8)
//!   data     raw little-endian values, product(extents) of them
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: [u8; 8] = *b"STCTARCH";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum ArchiveData {
    F64(Vec<f64>),
    F32(Vec<f32>),
    I32(Vec<i32>),
    I64(Vec<i64>),
    U8(Vec<u8>),
}

impl ArchiveData {
    fn tag(&self) -> u8 {
        match self {
            ArchiveData::F64(_) => 0,
            ArchiveData::F32(_) => 1,
            ArchiveData::I32(_) => 2,
            ArchiveData::I64(_) => 3,
            ArchiveData::U8(_) => 4,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            ArchiveData::F64(v) => v.len(),
            ArchiveData::F32(v) => v.len(),
            ArchiveData::I32(v) => v.len(),
            ArchiveData::I64(v) => v.len(),
            ArchiveData::U8(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ArchiveEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: ArchiveData,
}

impl ArchiveEntry {
    pub fn from_tensor(name: impl Into<String>, t: &Tensor) -> Self {
        ArchiveEntry {
            name: name.into(),
            shape: t.shape().to_vec(),
            data: ArchiveData::F64(t.to_vec()),
        }
    }

    pub fn text(name: impl Into<String>, text: &str) -> Self {
        let bytes = text.as_bytes().to_vec();
        ArchiveEntry {
            name: name.into(),
            shape: vec![bytes.len()],
            data: ArchiveData::U8(bytes),
        }
    }

    pub fn to_tensor(&self) -> Result<Tensor> {
        let data = match &self.data {
            ArchiveData::F64(v) => v.clone(),
            ArchiveData::F32(v) => v.iter().map(|&x| x as f64).collect(),
            _ => {
                return Err(Error::Format(format!(
                    "entry {} is not floating point",
                    self.name
                )))
            }
        };
        Tensor::new(&self.shape, data)
    }

    pub fn as_text(&self) -> Result<&str> {
        match &self.data {
            ArchiveData::U8(b) => std::str::from_utf8(b)
                .map_err(|e| Error::Format(format!("entry {}: {e}", self.name))),
            _ => Err(Error::Format(format!("entry {} is not text", self.name))),
        }
    }
}

pub fn write_to(mut w: impl Write, entries: &[ArchiveEntry]) -> Result<()> {
    w.write_all(&MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    w.write_all(&(entries.len() as u64).to_le_bytes())?;
    for e in entries {
        let expected: usize = e.shape.iter().product();
        if expected != e.data.len() {
            return Err(Error::Format(format!(
                "entry {}: shape {:?} holds {expected} values, data has {}",
                e.name,
                e.shape,
                e.data.len()
            )));
        }
        let name = e.name.as_bytes();
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name)?;
        w.write_all(&(e.shape.len() as u32).to_le_bytes())?;
        for &d in &e.shape {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        w.write_all(&[e.data.tag()])?;
        match &e.data {
            ArchiveData::F64(v) => v.iter().try_for_each(|x| w.write_all(&x.to_le_bytes()))?,
            ArchiveData::F32(v) => v.iter().try_for_each(|x| w.write_all(&x.to_le_bytes()))?,
            ArchiveData::I32(v) => v.iter().try_for_each(|x| w.write_all(&x.to_le_bytes()))?,
            ArchiveData::I64(v) => v.iter().try_for_each(|x| w.write_all(&x.to_le_bytes()))?,
            ArchiveData::U8(v) => w.write_all(v)?,
        }
    }
    w.flush()?;
    Ok(())
}

fn read_array<const N: usize>(r: &mut impl Read) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf)?;
    Ok(buf)
}

fn read_values<T, const N: usize>(
    r: &mut impl Read,
    n: usize,
    conv: fn([u8; N]) -> T,
) -> Result<Vec<T>> {
    let mut raw = vec![0u8; n * N];
    r.read_exact(&mut raw)?;
    Ok(raw
        .chunks_exact(N)
        .map(|c| conv(c.try_into().expect("chunk width")))
        .collect())
}

pub fn read_from(mut r: impl Read) -> Result<Vec<ArchiveEntry>> {
    if read_array::<8>(&mut r)? != MAGIC {
        return Err(Error::Format("bad magic bytes".into()));
    }
    let version = u32::from_le_bytes(read_array(&mut r)?);
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!("unsupported archive version {version}")));
    }
    let count = u64::from_le_bytes(read_array(&mut r)?);
    let mut entries = Vec::new();
    for _ in 0..count {
        let name_len = u32::from_le_bytes(read_array(&mut r)?) as usize;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name)?;
        let name =
            String::from_utf8(name).map_err(|e| Error::Format(format!("entry name: {e}")))?;
        let rank = u32::from_le_bytes(read_array(&mut r)?) as usize;
        let shape = (0..rank)
            .map(|_| Ok(u64::from_le_bytes(read_array(&mut r)?) as usize))
            .collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let [tag] = read_array::<1>(&mut r)?;
        let data = match tag {
            0 => ArchiveData::F64(read_values(&mut r, n, f64::from_le_bytes)?),
            1 => ArchiveData::F32(read_values(&mut r, n, f32::from_le_bytes)?),
            2 => ArchiveData::I32(read_values(&mut r, n, i32::from_le_bytes)?),
            3 => ArchiveData::I64(read_values(&mut r, n, i64::from_le_bytes)?),
            4 => ArchiveData::U8(read_values(&mut r, n, |b: [u8; 1]| b[0])?),
            other => return Err(Error::Format(format!("unknown dtype tag {other}"))),
        };
        entries.push(ArchiveEntry { name, shape, data });
    }
    Ok(entries)
}

pub fn write_archive(path: impl AsRef<Path>, entries: &[ArchiveEntry]) -> Result<()> {
    write_to(BufWriter::new(File::create(path)?), entries)
}

pub fn read_archive(path: impl AsRef<Path>) -> Result<Vec<ArchiveEntry>> {
    read_from(BufReader::new(File::open(path)?))
}

pub fn find<'a>(entries: &'a [ArchiveEntry], name: &str) -> Result<&'a ArchiveEntry> {
    entries
        .iter()
        .find(|e| e.name == name)
        .ok_or_else(|| Error::Format(format!("archive has no entry named {name}")))
}
