//! Versioned binary checkpoints.
//!
//! Layout (all integers little-endian):
//! magic `DSD1` | version u32 | vocabulary (count u64, then per word
//! len u64 + UTF-8) | config snapshot (len u64 + canonical JSON) | tensor
//! count u64 | per tensor: name (len u64 + UTF-8), rank u64, extents
//! u64 each, dtype tag u32 (1 = f64), row-major f64 payload | SHA-256 of
//! every preceding byte.
//!
//! Tuned prompt parameters ride along under the `prompt.` name prefix;
//! backbone tensors carry their module-namespaced registry names.

use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use crate::adapt::PromptParams;
use crate::data::Vocab;
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::numerics::Tensor;
use crate::report::canonical_json;

const MAGIC: &[u8; 4] = b"DSD1";
const VERSION: u32 = 1;
const DTYPE_F64: u32 = 1;

/// Parsed checkpoint file, before model reconstruction.
#[derive(Debug, Clone)]
pub struct CheckpointData {
    pub version: u32,
    pub vocab: Vec<String>,
    pub config: ModelConfig,
    pub tensors: Vec<(String, Tensor)>,
}

pub fn save_checkpoint(
    path: &Path,
    model: &Model,
    prompts: Option<&PromptParams>,
) -> Result<()> {
    let mut body: Vec<u8> = Vec::new();
    body.extend_from_slice(MAGIC);
    body.extend_from_slice(&VERSION.to_le_bytes());

    let words = model.vocab.words();
    body.extend_from_slice(&(words.len() as u64).to_le_bytes());
    for w in words {
        body.extend_from_slice(&(w.len() as u64).to_le_bytes());
        body.extend_from_slice(w.as_bytes());
    }

    let config_json = canonical_json(&serde_json::to_value(&model.config)?);
    body.extend_from_slice(&(config_json.len() as u64).to_le_bytes());
    body.extend_from_slice(config_json.as_bytes());

    let mut tensors: Vec<(String, &Tensor)> = model.params();
    if let Some(p) = prompts {
        tensors.extend(p.params());
    }
    body.extend_from_slice(&(tensors.len() as u64).to_le_bytes());
    for (name, t) in tensors {
        body.extend_from_slice(&(name.len() as u64).to_le_bytes());
        body.extend_from_slice(name.as_bytes());
        body.extend_from_slice(&(t.shape().len() as u64).to_le_bytes());
        for &e in t.shape() {
            body.extend_from_slice(&(e as u64).to_le_bytes());
        }
        body.extend_from_slice(&DTYPE_F64.to_le_bytes());
        for &v in t.data() {
            body.extend_from_slice(&v.to_le_bytes());
        }
    }

    let digest = Sha256::digest(&body);
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    file.write_all(&body)?;
    file.write_all(&digest)?;
    file.flush()?;
    Ok(())
}

struct Reader {
    bytes: Vec<u8>,
    offset: usize,
}

impl Reader {
    fn take(&mut self, n: usize, what: &str) -> Result<&[u8]> {
        if self.offset + n > self.bytes.len() {
            return Err(Error::Format(format!(
                "truncated checkpoint: wanted {n} bytes for {what} at offset {}",
                self.offset
            )));
        }
        let out = &self.bytes[self.offset..self.offset + n];
        self.offset += n;
        Ok(out)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        let b = self.take(8, what)?;
        Ok(u64::from_le_bytes(b.try_into().expect("8 bytes")))
    }

    fn string(&mut self, what: &str) -> Result<String> {
        let len = self.u64(what)? as usize;
        let at = self.offset;
        let b = self.take(len, what)?;
        String::from_utf8(b.to_vec())
            .map_err(|_| Error::Format(format!("invalid UTF-8 in {what} at offset {at}")))
    }
}

/// Parse and checksum-verify a checkpoint file.
pub fn load_checkpoint(path: &Path) -> Result<CheckpointData> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < 32 + 8 {
        return Err(Error::Format(format!(
            "checkpoint too short: {} bytes",
            bytes.len()
        )));
    }
    let (body, stored_digest) = bytes.split_at(bytes.len() - 32);
    let digest = Sha256::digest(body);
    if digest.as_slice() != stored_digest {
        return Err(Error::Format(format!(
            "checksum mismatch over {} body bytes: checkpoint is corrupt",
            body.len()
        )));
    }

    let mut r = Reader {
        bytes: body.to_vec(),
        offset: 0,
    };
    let magic = r.take(4, "magic")?;
    if magic != MAGIC {
        return Err(Error::Format(format!(
            "bad magic {magic:?} at offset 0, expected {MAGIC:?}"
        )));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::Format(format!(
            "unsupported checkpoint version {version}, expected {VERSION}"
        )));
    }

    let word_count = r.u64("vocabulary count")? as usize;
    let mut vocab = Vec::with_capacity(word_count);
    for i in 0..word_count {
        vocab.push(r.string(&format!("vocabulary word {i}"))?);
    }

    let config_json = r.string("config snapshot")?;
    let config: ModelConfig = serde_json::from_str(&config_json)
        .map_err(|e| Error::Format(format!("bad config snapshot: {e}")))?;

    let tensor_count = r.u64("tensor count")? as usize;
    let mut tensors = Vec::with_capacity(tensor_count);
    for i in 0..tensor_count {
        let name = r.string(&format!("tensor {i} name"))?;
        let rank = r.u64("tensor rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u64("tensor extent")? as usize);
        }
        let at = r.offset;
        let dtype = r.u32("dtype tag")?;
        if dtype != DTYPE_F64 {
            return Err(Error::Format(format!(
                "unknown dtype tag {dtype} for tensor '{name}' at offset {at}"
            )));
        }
        let numel: usize = shape.iter().product();
        let raw = r.take(numel * 8, &format!("tensor '{name}' payload"))?;
        let data: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Format(format!(
                "non-finite value in tensor '{name}'"
            )));
        }
        tensors.push((name, Tensor::new(shape, data)?));
    }
    if r.offset != r.bytes.len() {
        return Err(Error::Format(format!(
            "{} trailing bytes after tensors at offset {}",
            r.bytes.len() - r.offset,
            r.offset
        )));
    }
    Ok(CheckpointData {
        version,
        vocab,
        config,
        tensors,
    })
}

/// Rebuild a model (and tuned prompts if the file carries any) from parsed
/// checkpoint data. Every backbone tensor must be present with its
/// registered shape.
pub fn build_model(data: &CheckpointData) -> Result<(Model, Option<PromptParams>)> {
    data.config.validate()?;
    let mut by_name: BTreeMap<&str, &Tensor> = BTreeMap::new();
    for (name, t) in &data.tensors {
        if by_name.insert(name.as_str(), t).is_some() {
            return Err(Error::Format(format!("duplicate tensor '{name}'")));
        }
    }

    let mut model = Model::init(data.config.clone(), 0)?;
    model.vocab = Vocab::from_words(data.vocab.clone());
    if model.vocab.len() != data.config.vocab_size {
        return Err(Error::Format(format!(
            "vocabulary has {} words but config says {}",
            model.vocab.len(),
            data.config.vocab_size
        )));
    }
    for (name, slot) in model.params_mut() {
        let found = by_name.remove(name.as_str()).ok_or_else(|| {
            Error::Format(format!("checkpoint is missing tensor '{name}'"))
        })?;
        if found.shape() != slot.shape() {
            return Err(Error::Format(format!(
                "tensor '{name}' has shape {:?}, expected {:?}",
                found.shape(),
                slot.shape()
            )));
        }
        *slot = found.clone();
    }

    let has_prompts = by_name.keys().any(|n| n.starts_with("prompt."));
    let prompts = if has_prompts {
        let mut p = PromptParams::zeros(&data.config);
        for (name, slot) in p.params_mut() {
            let found = by_name.remove(name.as_str()).ok_or_else(|| {
                Error::Format(format!("checkpoint is missing prompt tensor '{name}'"))
            })?;
            if found.shape() != slot.shape() {
                return Err(Error::Format(format!(
                    "tensor '{name}' has shape {:?}, expected {:?}",
                    found.shape(),
                    slot.shape()
                )));
            }
            *slot = found.clone();
        }
        Some(p)
    } else {
        None
    };
    if let Some(stray) = by_name.keys().next() {
        return Err(Error::Format(format!("unknown tensor '{stray}'")));
    }
    Ok((model, prompts))
}
