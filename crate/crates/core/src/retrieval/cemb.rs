//! CEMB layout (little-endian): `"CEMB"`, version u32, dim u32, count u64,
//! count × dim f32 row-major, then per id a u16 byte length and UTF-8 bytes.

use std::path::Path;

use super::{EmbeddingIndex, Result, RetrievalError};

const MAGIC: &[u8; 4] = b"CEMB";
const VERSION: u32 = 1;

pub fn encode_index(index: &EmbeddingIndex) -> Vec<u8> {
    let mut out = Vec::with_capacity(20 + index.matrix().len() * 4 + index.len() * 16);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(index.dim() as u32).to_le_bytes());
    out.extend_from_slice(&(index.len() as u64).to_le_bytes());
    for v in index.matrix() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for id in index.ids() {
        out.extend_from_slice(&(id.len() as u16).to_le_bytes());
        out.extend_from_slice(id.as_bytes());
    }
    out
}

pub fn decode_index(bytes: &[u8], path: &str) -> Result<EmbeddingIndex> {
    let fail = |offset: usize, reason: &str| RetrievalError::Format {
        path: path.to_string(),
        offset,
        reason: reason.to_string(),
    };
    let need = |at: usize, n: usize, what: &str| {
        if bytes.len() < at + n {
            Err(fail(bytes.len(), &format!("truncated {what}")))
        } else {
            Ok(&bytes[at..at + n])
        }
    };
    if need(0, 4, "magic")? != MAGIC {
        return Err(fail(0, "bad magic (expected CEMB)"));
    }
    let version = u32::from_le_bytes(need(4, 4, "version")?.try_into().unwrap());
    if version != VERSION {
        return Err(fail(4, &format!("unsupported version {version}")));
    }
    let dim = u32::from_le_bytes(need(8, 4, "dim")?.try_into().unwrap()) as usize;
    let count = u64::from_le_bytes(need(12, 8, "count")?.try_into().unwrap());
    let count = usize::try_from(count).map_err(|_| fail(12, "count too large"))?;
    if dim == 0 && count > 0 {
        return Err(fail(8, "zero dimension"));
    }
    let matrix_bytes = count
        .checked_mul(dim)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| fail(12, "count × dim overflows"))?;
    let matrix: Vec<f32> = need(20, matrix_bytes, "matrix")?
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let mut pos = 20 + matrix_bytes;
    let mut ids = Vec::with_capacity(count);
    for _ in 0..count {
        let len = u16::from_le_bytes(need(pos, 2, "id length")?.try_into().unwrap()) as usize;
        let raw = need(pos + 2, len, "id")?;
        let id = std::str::from_utf8(raw).map_err(|_| fail(pos + 2, "id is not UTF-8"))?;
        ids.push(id.to_string());
        pos += 2 + len;
    }
    if pos != bytes.len() {
        return Err(fail(pos, "trailing bytes"));
    }
    EmbeddingIndex::from_parts(dim, ids, matrix).map_err(|e| match e {
        RetrievalError::Build { entry, reason } => fail(20, &format!("entry {entry:?}: {reason}")),
        other => other,
    })
}

pub fn save_index(index: &EmbeddingIndex, path: &Path) -> Result<()> {
    std::fs::write(path, encode_index(index)).map_err(|source| RetrievalError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn load_index(path: &Path) -> Result<EmbeddingIndex> {
    let bytes = std::fs::read(path).map_err(|source| RetrievalError::Io {
        path: path.display().to_string(),
        source,
    })?;
    decode_index(&bytes, &path.display().to_string())
}
