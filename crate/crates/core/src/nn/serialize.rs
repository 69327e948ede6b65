//! Flat binary container for parameter blocks.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic    8 bytes  "SNPARAMS"
//! version  u32
//! n_meta   u32      then n_meta (key, value) length-prefixed UTF-8 strings
//! n_blocks u32      then per block: name, ndim u32, dims u64*, offset u64,
//!                   count u64 (offset/count in f64 elements of the payload)
//! payload  u64 element count, then count * 8 bytes of f64 little-endian
//! ```
//!
//! Doubles round-trip bit-exactly through `to_le_bytes`, so a written file
//! reloads to identical parameters.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

const MAGIC: &[u8; 8] = b"SNPARAMS";
pub const FORMAT_VERSION: u32 = 1;

/// Named tensors plus free-form metadata, the on-disk unit for model and
/// margin-classifier files.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamFile {
    pub meta: Vec<(String, String)>,
    pub blocks: Vec<(String, Tensor)>,
}

impl ParamFile {
    pub fn meta_value(&self, key: &str) -> Option<&str> {
        self.meta
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn block(&self, name: &str) -> Option<&Tensor> {
        self.blocks
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
    }
}

pub fn write_param_file(path: &Path, file: &ParamFile) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    w.write_all(&(file.meta.len() as u32).to_le_bytes())?;
    for (k, v) in &file.meta {
        write_str(&mut w, k)?;
        write_str(&mut w, v)?;
    }
    w.write_all(&(file.blocks.len() as u32).to_le_bytes())?;
    let mut offset = 0u64;
    for (name, tensor) in &file.blocks {
        write_str(&mut w, name)?;
        w.write_all(&(tensor.ndim() as u32).to_le_bytes())?;
        for &d in tensor.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        w.write_all(&offset.to_le_bytes())?;
        w.write_all(&(tensor.len() as u64).to_le_bytes())?;
        offset += tensor.len() as u64;
    }
    w.write_all(&offset.to_le_bytes())?;
    for (_, tensor) in &file.blocks {
        for &v in tensor.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_param_file(path: &Path) -> Result<ParamFile> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)
        .map_err(|_| Error::Parse("file too short for header".into()))?;
    if &magic != MAGIC {
        return Err(Error::UnsupportedFormat(format!(
            "bad magic {magic:?}, expected {MAGIC:?}"
        )));
    }
    let version = read_u32(&mut r)?;
    if version != FORMAT_VERSION {
        return Err(Error::UnsupportedFormat(format!(
            "format version {version}, this build reads {FORMAT_VERSION}"
        )));
    }
    let n_meta = read_u32(&mut r)? as usize;
    let mut meta = Vec::with_capacity(n_meta);
    for _ in 0..n_meta {
        let k = read_str(&mut r)?;
        let v = read_str(&mut r)?;
        meta.push((k, v));
    }
    let n_blocks = read_u32(&mut r)? as usize;
    let mut headers = Vec::with_capacity(n_blocks);
    for _ in 0..n_blocks {
        let name = read_str(&mut r)?;
        let ndim = read_u32(&mut r)? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(read_u64(&mut r)? as usize);
        }
        let offset = read_u64(&mut r)?;
        let count = read_u64(&mut r)?;
        if shape.iter().product::<usize>() as u64 != count {
            return Err(Error::Parse(format!(
                "block {name}: shape {shape:?} disagrees with count {count}"
            )));
        }
        headers.push((name, shape, offset, count));
    }
    let payload_len = read_u64(&mut r)?;
    let mut payload = vec![0.0f64; payload_len as usize];
    let mut buf = [0u8; 8];
    for v in payload.iter_mut() {
        r.read_exact(&mut buf)
            .map_err(|_| Error::Parse("payload truncated".into()))?;
        *v = f64::from_le_bytes(buf);
    }
    let mut blocks = Vec::with_capacity(n_blocks);
    for (name, shape, offset, count) in headers {
        let end = offset
            .checked_add(count)
            .filter(|&e| e <= payload_len)
            .ok_or_else(|| Error::Parse(format!("block {name} overruns the payload")))?;
        let data = payload[offset as usize..end as usize].to_vec();
        blocks.push((name, Tensor::new(shape, data)?));
    }
    Ok(ParamFile { meta, blocks })
}

fn write_str<W: Write>(w: &mut W, s: &str) -> Result<()> {
    w.write_all(&(s.len() as u32).to_le_bytes())?;
    w.write_all(s.as_bytes())?;
    Ok(())
}

fn read_str<R: Read>(r: &mut R) -> Result<String> {
    let len = read_u32(r)? as usize;
    if len > 1 << 20 {
        return Err(Error::Parse(format!("string length {len} is implausible")));
    }
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)
        .map_err(|_| Error::Parse("string truncated".into()))?;
    String::from_utf8(buf).map_err(|_| Error::Parse("string is not UTF-8".into()))
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)
        .map_err(|_| Error::Parse("header truncated".into()))?;
    Ok(u32::from_le_bytes(buf))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)
        .map_err(|_| Error::Parse("header truncated".into()))?;
    Ok(u64::from_le_bytes(buf))
}
