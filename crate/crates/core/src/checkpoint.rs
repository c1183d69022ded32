//! Binary checkpoint format.
//!
//! ```text
//! magic   b"CWVAECKP"
//! version u32
//! header  u32 length, JSON {model, vocab}
//! digest  32 bytes, SHA-256 of the header JSON
//! count   u64
//! record  u32 name length, name, u32 rank, u64 × rank extents, f64 × numel
//! ```
//!
//! All integers and floats are little-endian.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::{hex_digest, Vocab};
use crate::error::{Error, Result};
use crate::models::{Model, ModelConfig};

pub const MAGIC: &[u8; 8] = b"CWVAECKP";
pub const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    model: ModelConfig,
    vocab: Vec<String>,
}

/// Hex SHA-256 of the encoded header; identifies (config, vocabulary).
pub fn config_digest(config: &ModelConfig, vocab: &Vocab) -> Result<String> {
    let json = header_json(config, vocab)?;
    Ok(hex_digest(&Sha256::digest(&json)))
}

fn header_json(config: &ModelConfig, vocab: &Vocab) -> Result<Vec<u8>> {
    Ok(serde_json::to_vec(&Header { model: config.clone(), vocab: vocab.tokens().to_vec() })?)
}

pub fn write(w: &mut impl Write, model: &Model, vocab: &Vocab) -> Result<()> {
    if vocab.len() != model.config().vocab_size {
        return Err(Error::Checkpoint(format!(
            "vocabulary has {} tokens, model expects {}",
            vocab.len(),
            model.config().vocab_size
        )));
    }
    let json = header_json(model.config(), vocab)?;
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(json.len() as u32).to_le_bytes())?;
    w.write_all(&json)?;
    w.write_all(&Sha256::digest(&json))?;
    w.write_all(&(model.params().len() as u64).to_le_bytes())?;
    for (name, t) in model.params().iter() {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
        for &d in t.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for x in t.data() {
            w.write_all(&x.to_le_bytes())?;
        }
    }
    Ok(())
}

fn take<const N: usize>(r: &mut impl Read) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf).map_err(|e| Error::Checkpoint(format!("truncated checkpoint: {e}")))?;
    Ok(buf)
}

fn take_vec(r: &mut impl Read, len: usize) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    r.take(len as u64).read_to_end(&mut buf)?;
    if buf.len() != len {
        return Err(Error::Checkpoint("truncated checkpoint".into()));
    }
    Ok(buf)
}

/// Reads a checkpoint, rebuilding the model from its embedded configuration.
pub fn read(r: &mut impl Read) -> Result<(Model, Vocab)> {
    if &take::<8>(r)? != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint file".into()));
    }
    let version = u32::from_le_bytes(take(r)?);
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported checkpoint version {version}")));
    }
    let len = u32::from_le_bytes(take(r)?) as usize;
    let json = take_vec(r, len)?;
    let stored: [u8; 32] = take(r)?;
    let actual = Sha256::digest(&json);
    if actual.as_slice() != stored {
        return Err(Error::Digest { expected: hex_digest(&stored), found: hex_digest(&actual) });
    }
    let header: Header = serde_json::from_slice(&json)?;
    let vocab = Vocab::from_tokens(header.vocab)?;
    if vocab.len() != header.model.vocab_size {
        return Err(Error::Checkpoint("header vocabulary does not match vocab_size".into()));
    }
    let mut model = Model::new(header.model)?;
    let count = u64::from_le_bytes(take(r)?) as usize;
    if count != model.params().len() {
        return Err(Error::Checkpoint(format!("{count} records, model has {} tensors", model.params().len())));
    }
    for _ in 0..count {
        let name_len = u32::from_le_bytes(take(r)?) as usize;
        let name = String::from_utf8(take_vec(r, name_len)?).map_err(|_| Error::Checkpoint("non-UTF-8 tensor name".into()))?;
        let rank = u32::from_le_bytes(take(r)?) as usize;
        let shape = (0..rank).map(|_| Ok(u64::from_le_bytes(take(r)?) as usize)).collect::<Result<Vec<_>>>()?;
        let expected = model
            .params()
            .by_name(&name)
            .ok_or_else(|| Error::Checkpoint(format!("unknown tensor {name}")))?
            .shape()
            .to_vec();
        if shape != expected {
            return Err(Error::Checkpoint(format!("tensor {name} has shape {shape:?}, expected {expected:?}")));
        }
        let numel: usize = shape.iter().product();
        let bytes = take_vec(r, numel * 8)?;
        let data: Vec<f64> = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        model.params_mut().set(&name, &data)?;
    }
    Ok((model, vocab))
}

pub fn save(path: impl AsRef<Path>, model: &Model, vocab: &Vocab) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write(&mut w, model, vocab)?;
    w.flush()?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<(Model, Vocab)> {
    read(&mut BufReader::new(File::open(path)?))
}

/// SHA-256 of a checkpoint file's bytes.
pub fn file_digest(path: impl AsRef<Path>) -> Result<String> {
    let bytes = std::fs::read(path)?;
    Ok(hex_digest(&Sha256::digest(&bytes)))
}
