//! Checkpoint layout (all integers little-endian):
//!
//! ```text
//! "CASE" | version u32 | record_len u32 | record JSON (config, vocab, init)
//! | n_blocks u32 | per block: name_len u32, name UTF-8, rank u32, dims u32…, f32 payload
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{CaseModel, InitMeta, ModelConfig, ModelError, ParamBlock, Parameters, Result, Tokenizer};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"CASE";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Record {
    config: ModelConfig,
    vocab: Vec<String>,
    init: InitMeta,
}

pub fn encode_checkpoint(model: &CaseModel) -> Vec<u8> {
    let record = Record {
        config: model.config.clone(),
        vocab: model.tokenizer.vocab().to_vec(),
        init: model.params.init.clone(),
    };
    let json = serde_json::to_vec(&record).expect("record serializes");
    let mut out = Vec::with_capacity(64 + json.len() + model.params.numel() * 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&(model.params.len() as u32).to_le_bytes());
    for block in model.params.blocks() {
        out.extend_from_slice(&(block.name.len() as u32).to_le_bytes());
        out.extend_from_slice(block.name.as_bytes());
        out.extend_from_slice(&(block.tensor.shape.len() as u32).to_le_bytes());
        for &d in &block.tensor.shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in &block.tensor.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    path: &'a str,
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn fail(&self, offset: usize, reason: impl Into<String>) -> ModelError {
        ModelError::Checkpoint {
            path: self.path.to_string(),
            offset,
            reason: reason.into(),
        }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.fail(self.pos, format!("truncated {what}")));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

/// `path` only labels errors.
pub fn decode_checkpoint(bytes: &[u8], path: &str) -> Result<CaseModel> {
    let mut r = Reader { path, bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(r.fail(0, "bad magic (expected CASE)"));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(r.fail(4, format!("unsupported version {version}")));
    }
    let len = r.u32("config length")? as usize;
    let at = r.pos;
    let record: Record = serde_json::from_slice(r.take(len, "config record")?)
        .map_err(|e| r.fail(at, format!("config record: {e}")))?;
    let tokenizer = Tokenizer::from_vocab(record.vocab)
        .ok_or_else(|| r.fail(at, "vocabulary lacks the special tokens"))?;
    if tokenizer.len() != record.config.vocab_size {
        return Err(r.fail(at, "vocab_size disagrees with stored vocabulary"));
    }
    record
        .config
        .validate()
        .map_err(|e| r.fail(at, e.to_string()))?;
    let expected = Parameters::init(&record.config);

    let at = r.pos;
    let n = r.u32("block count")? as usize;
    if n != expected.len() {
        return Err(r.fail(at, format!("expected {} blocks, found {n}", expected.len())));
    }
    let mut blocks = Vec::with_capacity(n);
    for want in expected.blocks() {
        let at = r.pos;
        let name_len = r.u32("block name length")? as usize;
        let name = std::str::from_utf8(r.take(name_len, "block name")?)
            .map_err(|_| r.fail(at + 4, "block name is not UTF-8"))?
            .to_string();
        if name != want.name {
            return Err(r.fail(at, format!("expected block {}, found {name}", want.name)));
        }
        let rank = r.u32("rank")? as usize;
        let shape = (0..rank)
            .map(|_| r.u32("dims").map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        if shape != want.tensor.shape {
            return Err(r.fail(at, format!("block {name}: shape {shape:?}, expected {:?}", want.tensor.shape)));
        }
        let numel: usize = shape.iter().product();
        let data = r
            .take(numel * 4, "payload")?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        blocks.push(ParamBlock {
            name,
            tensor: Tensor::new(shape, data)?,
        });
    }
    if r.pos != bytes.len() {
        return Err(r.fail(r.pos, "trailing bytes"));
    }
    Ok(CaseModel {
        config: record.config,
        tokenizer,
        params: Parameters::from_blocks(blocks, record.init),
    })
}

pub fn save_checkpoint(path: &Path, model: &CaseModel) -> Result<()> {
    std::fs::write(path, encode_checkpoint(model)).map_err(|source| ModelError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn load_checkpoint(path: &Path) -> Result<CaseModel> {
    let bytes = std::fs::read(path).map_err(|source| ModelError::Io {
        path: path.display().to_string(),
        source,
    })?;
    decode_checkpoint(&bytes, &path.display().to_string())
}
