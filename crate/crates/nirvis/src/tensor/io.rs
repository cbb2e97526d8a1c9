//! Binary tensor container: a flat list of named f32 tensors.
//!
//! Layout (all integers little-endian):
//! ```text
//! magic  b"NVTC"
//! version u32 (currently 1)
//! count   u32
//! entry*: name_len u32, name bytes (utf-8),
//!         ndim u32, dims u32 * ndim,
//!         data f32 * prod(dims)
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub const MAGIC: [u8; 4] = *b"NVTC";
pub const VERSION: u32 = 1;

/// One named tensor in a container file.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

/// Write entries to `path`, replacing any existing file.
pub fn save(path: &Path, entries: &[TensorEntry]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let werr = |e: std::io::Error| Error::io(path, e);

    w.write_all(&MAGIC).map_err(werr)?;
    w.write_all(&VERSION.to_le_bytes()).map_err(werr)?;
    w.write_all(&(entries.len() as u32).to_le_bytes()).map_err(werr)?;
    for e in entries {
        let numel: usize = e.shape.iter().product();
        assert!(
            e.data.len() == numel,
            "tensor `{}` has {} values for shape {:?}",
            e.name,
            e.data.len(),
            e.shape
        );
        let name = e.name.as_bytes();
        w.write_all(&(name.len() as u32).to_le_bytes()).map_err(werr)?;
        w.write_all(name).map_err(werr)?;
        w.write_all(&(e.shape.len() as u32).to_le_bytes()).map_err(werr)?;
        for d in &e.shape {
            w.write_all(&(*d as u32).to_le_bytes()).map_err(werr)?;
        }
        for v in &e.data {
            w.write_all(&v.to_le_bytes()).map_err(werr)?;
        }
    }
    w.flush().map_err(werr)
}

fn read_u32(r: &mut impl Read, path: &Path, what: &str) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)
        .map_err(|_| Error::format(path, format!("truncated while reading {what}")))?;
    Ok(u32::from_le_bytes(buf))
}

/// Read every entry from `path`. Rejects wrong magic bytes, unsupported
/// versions and truncated files with a descriptive error.
pub fn load(path: &Path) -> Result<Vec<TensorEntry>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);

    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|_| Error::format(path, "file too short for magic bytes"))?;
    if magic != MAGIC {
        return Err(Error::format(
            path,
            format!("bad magic {magic:?}, expected {MAGIC:?} — not a tensor container"),
        ));
    }
    let version = read_u32(&mut r, path, "version")?;
    if version != VERSION {
        return Err(Error::format(
            path,
            format!("container version {version} unsupported (this build reads {VERSION})"),
        ));
    }
    let count = read_u32(&mut r, path, "entry count")?;
    let mut entries = Vec::with_capacity(count as usize);
    for i in 0..count {
        let name_len = read_u32(&mut r, path, "name length")? as usize;
        if name_len > 4096 {
            return Err(Error::format(path, format!("entry {i}: name length {name_len} is implausible")));
        }
        let mut name_buf = vec![0u8; name_len];
        r.read_exact(&mut name_buf)
            .map_err(|_| Error::format(path, format!("entry {i}: truncated name")))?;
        let name = String::from_utf8(name_buf)
            .map_err(|_| Error::format(path, format!("entry {i}: name is not utf-8")))?;
        let ndim = read_u32(&mut r, path, "ndim")? as usize;
        if ndim == 0 || ndim > 8 {
            return Err(Error::format(path, format!("entry `{name}`: ndim {ndim} out of range")));
        }
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(read_u32(&mut r, path, "dim")? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = vec![0f32; numel];
        let mut byte_buf = vec![0u8; numel * 4];
        r.read_exact(&mut byte_buf)
            .map_err(|_| Error::format(path, format!("entry `{name}`: truncated data")))?;
        for (v, chunk) in data.iter_mut().zip(byte_buf.chunks_exact(4)) {
            *v = f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]);
        }
        entries.push(TensorEntry { name, shape, data });
    }
    Ok(entries)
}

/// Convert container entries to the name -> (shape, data) map used by layer
/// import, rejecting duplicate names.
pub(crate) fn entry_map(
    entries: Vec<TensorEntry>,
    path: &Path,
) -> Result<super::StateMap> {
    let mut map = super::StateMap::new();
    for e in entries {
        if map.insert(e.name.clone(), (e.shape, e.data)).is_some() {
            return Err(Error::format(path, format!("duplicate tensor `{}`", e.name)));
        }
    }
    Ok(map)
}
