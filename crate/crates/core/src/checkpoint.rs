//! Binary model checkpoints.
//!
//! Layout: the 8-byte magic `WEANCKPT`, a little-endian `u32` format
//! version, a little-endian `u64` header length, the JSON header, then every
//! parameter tensor as raw little-endian `f64` in header order. Values
//! round-trip bit for bit.

use std::fs;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::Vocabulary;
use crate::error::{Error, Result};
use crate::model::{CandidateSet, ModelConfig, Seq2SeqModel};

const MAGIC: &[u8; 8] = b"WEANCKPT";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    tokens: Vec<String>,
    counts: Vec<u64>,
    candidates: Vec<usize>,
    tensors: Vec<TensorEntry>,
}

pub fn save(model: &Seq2SeqModel, path: &Path) -> Result<()> {
    let header = Header {
        config: model.config.clone(),
        tokens: model.vocab.tokens().to_vec(),
        counts: model.vocab.counts().to_vec(),
        candidates: model.candidates.word_ids().to_vec(),
        tensors: model
            .params
            .iter()
            .map(|(_, p)| TensorEntry {
                name: p.name.clone(),
                shape: p.value.shape().to_vec(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let ctx = || format!("writing checkpoint {}", path.display());
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(ctx(), e))?;
    }
    // write to a sibling file first so a crash never leaves a torn checkpoint
    let tmp = path.with_extension("tmp");
    let file = fs::File::create(&tmp).map_err(|e| Error::io(ctx(), e))?;
    let mut out = BufWriter::new(file);
    let mut write = |bytes: &[u8]| out.write_all(bytes).map_err(|e| Error::io(ctx(), e));
    write(MAGIC)?;
    write(&VERSION.to_le_bytes())?;
    write(&(json.len() as u64).to_le_bytes())?;
    write(&json)?;
    for (_, p) in model.params.iter() {
        for v in p.value.data() {
            write(&v.to_le_bytes())?;
        }
    }
    out.into_inner()
        .map_err(|e| Error::io(ctx(), e.into_error()))?
        .sync_all()
        .map_err(|e| Error::io(ctx(), e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(ctx(), e))
}

pub fn load(path: &Path) -> Result<Seq2SeqModel> {
    let bytes = fs::read(path)
        .map_err(|e| Error::io(format!("reading checkpoint {}", path.display()), e))?;
    from_bytes(&bytes)
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

fn from_bytes(bytes: &[u8]) -> Result<Seq2SeqModel> {
    let mut r = bytes;
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)
        .map_err(|_| bad("file too short"))?;
    if &magic != MAGIC {
        return Err(bad("not a checkpoint file"));
    }
    let mut word = [0u8; 4];
    r.read_exact(&mut word).map_err(|_| bad("file too short"))?;
    let version = u32::from_le_bytes(word);
    if version != VERSION {
        return Err(bad(format!("unsupported format version {version}")));
    }
    let mut len = [0u8; 8];
    r.read_exact(&mut len).map_err(|_| bad("file too short"))?;
    let len = u64::from_le_bytes(len) as usize;
    if len > r.len() {
        return Err(bad("truncated header"));
    }
    let (json, mut r) = r.split_at(len);
    let header: Header =
        serde_json::from_slice(json).map_err(|e| bad(format!("bad header: {e}")))?;

    let vocab =
        Vocabulary::from_tokens(header.tokens, header.counts).map_err(|e| bad(e.to_string()))?;
    let candidates =
        CandidateSet::from_ids(header.candidates, vocab.len()).map_err(|e| bad(e.to_string()))?;
    let mut model =
        Seq2SeqModel::new(header.config, vocab, candidates, 0).map_err(|e| bad(e.to_string()))?;
    if header.tensors.len() != model.params.len() {
        return Err(bad(format!(
            "{} tensors stored, model has {}",
            header.tensors.len(),
            model.params.len()
        )));
    }
    for (entry, param) in header.tensors.iter().zip(model.params.iter_mut()) {
        if entry.name != param.name || entry.shape != param.value.shape() {
            return Err(bad(format!(
                "tensor {} {:?} does not match model tensor {} {:?}",
                entry.name,
                entry.shape,
                param.name,
                param.value.shape()
            )));
        }
        let n = param.value.len();
        if r.len() < n * 8 {
            return Err(bad(format!("truncated data for tensor {}", entry.name)));
        }
        for (slot, chunk) in param
            .value
            .data_mut()
            .iter_mut()
            .zip(r[..n * 8].chunks_exact(8))
        {
            *slot = f64::from_le_bytes(chunk.try_into().expect("8-byte chunk"));
        }
        r = &r[n * 8..];
    }
    if !r.is_empty() {
        return Err(bad(format!("{} trailing bytes", r.len())));
    }
    Ok(model)
}
