//! Binary checkpoints.
//!
//! Layout (little-endian): magic `MMPOICKP`, `u32` version, `u32` length of the
//! JSON-encoded [`ModelConfig`], the JSON bytes, `u32` tensor count, then per
//! tensor a `u64` element count and that many `f32` values, in declaration
//! order. A trailing `u32` CRC-32 covers every preceding byte.

use std::io::{Read, Write};
use std::path::Path;

use super::{ModelConfig, ModelParams};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"MMPOICKP";
const VERSION: u32 = 1;

pub fn to_bytes(params: &ModelParams) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    let config = serde_json::to_vec(&params.config)?;
    buf.extend_from_slice(&(config.len() as u32).to_le_bytes());
    buf.extend_from_slice(&config);
    let tensors = params.named_tensors();
    buf.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (_, t) in tensors {
        buf.extend_from_slice(&(t.len() as u64).to_le_bytes());
        for &v in t {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&buf);
    buf.extend_from_slice(&crc.to_le_bytes());
    Ok(buf)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| format!("truncated at byte {}", self.pos))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> std::result::Result<u64, String> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

/// Splits off and verifies the CRC trailer shared by checkpoint and index files.
pub(crate) fn verify_crc(bytes: &[u8]) -> std::result::Result<&[u8], String> {
    if bytes.len() < 4 {
        return Err("file too short".into());
    }
    let (body, trailer) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(trailer.try_into().expect("4 bytes"));
    let actual = crc32fast::hash(body);
    if stored != actual {
        return Err(format!("checksum mismatch: stored {stored:08x}, computed {actual:08x}"));
    }
    Ok(body)
}

fn parse(bytes: &[u8]) -> std::result::Result<ModelParams, String> {
    let body = verify_crc(bytes)?;
    let mut cur = Cursor { bytes: body, pos: 0 };
    if cur.take(8)? != MAGIC {
        return Err("bad magic".into());
    }
    let version = cur.u32()?;
    if version != VERSION {
        return Err(format!("unsupported version {version}"));
    }
    let len = cur.u32()? as usize;
    let config: ModelConfig =
        serde_json::from_slice(cur.take(len)?).map_err(|e| format!("config: {e}"))?;
    let mut params = ModelParams::init(config).map_err(|e| e.to_string())?;
    let names: Vec<String> = params.named_tensors().into_iter().map(|(n, _)| n).collect();
    let count = cur.u32()? as usize;
    if count != names.len() {
        return Err(format!("expected {} tensors, found {count}", names.len()));
    }
    for (name, t) in names.iter().zip(params.tensors_mut()) {
        let n = cur.u64()? as usize;
        if n != t.len() {
            return Err(format!("tensor {name}: expected {} values, found {n}", t.len()));
        }
        let raw = cur.take(n.checked_mul(4).ok_or("tensor size overflow")?)?;
        for (dst, chunk) in t.iter_mut().zip(raw.chunks_exact(4)) {
            *dst = f32::from_le_bytes(chunk.try_into().expect("4 bytes")) as f64;
        }
    }
    if cur.pos != body.len() {
        return Err(format!("{} trailing bytes", body.len() - cur.pos));
    }
    Ok(params)
}

pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<ModelParams> {
    parse(bytes).map_err(|reason| Error::Corrupt {
        path: origin.to_path_buf(),
        reason,
    })
}

pub fn write_to<W: Write>(params: &ModelParams, mut w: W) -> Result<()> {
    w.write_all(&to_bytes(params)?)?;
    Ok(())
}

pub fn read_from<R: Read>(mut r: R, origin: &Path) -> Result<ModelParams> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    from_bytes(&bytes, origin)
}

pub fn save(params: &ModelParams, path: &Path) -> Result<()> {
    std::fs::write(path, to_bytes(params)?).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<ModelParams> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes, path)
}

/// Rounds every parameter to `f32`, the precision checkpoints store.
pub fn round_to_stored(params: &mut ModelParams) {
    params.visit_mut(&mut |_, t| t.iter_mut().for_each(|v| *v = *v as f32 as f64));
}
