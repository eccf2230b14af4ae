//! Binary tensor snapshot format shared by checkpoints, packed datasets and
//! embedding exports.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic   4 bytes  "FSTS"
//! version u32      1
//! count   u64      number of entries
//! entry*  name_len u32, name (UTF-8), rank u32, dims u64 * rank,
//!         data f32 * product(dims)
//! ```

use std::io::{self, Read, Write};

pub const MAGIC: [u8; 4] = *b"FSTS";
pub const VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum SnapshotError {
    #[error("io: {0}")]
    Io(#[from] io::Error),
    #[error("bad magic bytes {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported snapshot version {0}")]
    Version(u32),
    #[error("entry name is not valid UTF-8")]
    Utf8,
    #[error("entry `{name}`: {len} values for dims {dims:?}")]
    Length {
        name: String,
        len: usize,
        dims: Vec<usize>,
    },
    #[error("duplicate entry `{0}`")]
    Duplicate(String),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Entry {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

impl Entry {
    pub fn new(name: impl Into<String>, dims: Vec<usize>, data: Vec<f32>) -> Self {
        Self {
            name: name.into(),
            dims,
            data,
        }
    }
}

pub fn write_entries<W: Write>(mut w: W, entries: &[Entry]) -> Result<(), SnapshotError> {
    let mut seen = std::collections::HashSet::new();
    w.write_all(&MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(entries.len() as u64).to_le_bytes())?;
    for e in entries {
        if !seen.insert(e.name.as_str()) {
            return Err(SnapshotError::Duplicate(e.name.clone()));
        }
        if e.dims.iter().product::<usize>() != e.data.len() {
            return Err(SnapshotError::Length {
                name: e.name.clone(),
                len: e.data.len(),
                dims: e.dims.clone(),
            });
        }
        w.write_all(&(e.name.len() as u32).to_le_bytes())?;
        w.write_all(e.name.as_bytes())?;
        w.write_all(&(e.dims.len() as u32).to_le_bytes())?;
        for &d in &e.dims {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(e.data.len() * 4);
        for v in &e.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    w.flush()?;
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> io::Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

pub fn read_entries<R: Read>(mut r: R) -> Result<Vec<Entry>, SnapshotError> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if magic != MAGIC {
        return Err(SnapshotError::BadMagic(magic));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(SnapshotError::Version(version));
    }
    let count = read_u64(&mut r)?;
    let mut entries = Vec::new();
    let mut seen = std::collections::HashSet::new();
    for _ in 0..count {
        let name_len = read_u32(&mut r)? as usize;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|_| SnapshotError::Utf8)?;
        if !seen.insert(name.clone()) {
            return Err(SnapshotError::Duplicate(name));
        }
        let rank = read_u32(&mut r)? as usize;
        let dims = (0..rank)
            .map(|_| read_u64(&mut r).map(|d| d as usize))
            .collect::<io::Result<Vec<_>>>()?;
        let n: usize = dims.iter().product();
        let mut raw = vec![0u8; n * 4];
        r.read_exact(&mut raw)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        entries.push(Entry { name, dims, data });
    }
    Ok(entries)
}

pub fn save(path: impl AsRef<std::path::Path>, entries: &[Entry]) -> Result<(), SnapshotError> {
    let f = std::fs::File::create(path)?;
    write_entries(io::BufWriter::new(f), entries)
}

pub fn load(path: impl AsRef<std::path::Path>) -> Result<Vec<Entry>, SnapshotError> {
    let f = std::fs::File::open(path)?;
    read_entries(io::BufReader::new(f))
}
