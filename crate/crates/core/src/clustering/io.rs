//! Codebook files: magic `UMKM`, version `u16`, `K` and `D` as `u64`, the
//! centroids as `K * D` f32 values, then the source tag (`u32` length +
//! UTF-8), the fit inertia (`f64`) and iteration count (`u64`).
//! Everything is little-endian.

use std::fs;
use std::path::Path;

use super::{Codebook, CodebookSource, FitStats};
use crate::error::{Error, Result};
use crate::numcore::Tensor;

const MAGIC: &[u8; 4] = b"UMKM";
const VERSION: u16 = 1;

pub fn write_codebook(path: &Path, codebook: &Codebook) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(codebook.k() as u64).to_le_bytes());
    buf.extend_from_slice(&(codebook.dim() as u64).to_le_bytes());
    for v in codebook.centroids.data() {
        buf.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    let tag = codebook.source.tag().as_bytes();
    buf.extend_from_slice(&(tag.len() as u32).to_le_bytes());
    buf.extend_from_slice(tag);
    buf.extend_from_slice(&codebook.stats.inertia.to_le_bytes());
    buf.extend_from_slice(&(codebook.stats.iterations as u64).to_le_bytes());
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn read_codebook(path: &Path) -> Result<Codebook> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |m: String| Error::format(path, m);
    let mut pos = 0;
    let mut take = |n: usize| -> Result<&[u8]> {
        let s = bytes.get(pos..pos + n).ok_or_else(|| bad("truncated codebook".into()))?;
        pos += n;
        Ok(s)
    };
    if take(4)? != MAGIC {
        return Err(bad("missing UMKM magic".into()));
    }
    let version = u16::from_le_bytes(take(2)?.try_into().expect("2 bytes"));
    if version != VERSION {
        return Err(bad(format!("unsupported codebook version {version}")));
    }
    let k = u64::from_le_bytes(take(8)?.try_into().expect("8 bytes")) as usize;
    let d = u64::from_le_bytes(take(8)?.try_into().expect("8 bytes")) as usize;
    let raw = take(k.checked_mul(d).and_then(|n| n.checked_mul(4)).ok_or_else(|| bad("bad extents".into()))?)?;
    let data: Vec<f64> = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64).collect();
    let tag_len = u32::from_le_bytes(take(4)?.try_into().expect("4 bytes")) as usize;
    let tag = std::str::from_utf8(take(tag_len)?).map_err(|e| bad(e.to_string()))?.to_string();
    let source = CodebookSource::from_tag(&tag).ok_or_else(|| bad(format!("unknown source tag `{tag}`")))?;
    let inertia = f64::from_le_bytes(take(8)?.try_into().expect("8 bytes"));
    let iterations = u64::from_le_bytes(take(8)?.try_into().expect("8 bytes")) as usize;
    if pos != bytes.len() {
        return Err(bad("trailing bytes after codebook".into()));
    }
    let mut codebook = Codebook::new(Tensor::matrix(k, d, data)?, source).map_err(|e| bad(e.to_string()))?;
    codebook.stats = FitStats { inertia, iterations, history: Vec::new() };
    Ok(codebook)
}
