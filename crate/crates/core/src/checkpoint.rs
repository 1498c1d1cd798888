//! Binary checkpoint files.
//!
//! Layout: magic bytes `USS1`, then one record per tensor — name length
//! (u32 LE), name bytes, rank (u32 LE), one u64 LE per dimension, and the
//! payload as little-endian f64 — and a trailing u64 LE record count.
//!
//! The config snapshot, vocabulary, topic vocabulary, step, and validation
//! score ride along as reserved records (`__config__`, `__vocab__`,
//! `__topic_vocab__`, `__step__`, `__val_score__`) whose payloads encode
//! text as one byte value per f64, so the whole checkpoint round-trips
//! bit-exactly through a single file.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::blocks::ParamStore;
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"USS1";
const RESERVED: [&str; 5] = [
    "__config__",
    "__vocab__",
    "__topic_vocab__",
    "__step__",
    "__val_score__",
];

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("bad magic bytes")]
    BadMagic,
    #[error("truncated checkpoint")]
    Truncated,
    #[error("record count mismatch: header says {expected}, read {actual}")]
    CountMismatch { expected: u64, actual: u64 },
    #[error("invalid record name")]
    BadName,
    #[error("missing reserved record {0}")]
    MissingReserved(&'static str),
    #[error("parameter {name}: shape mismatch across checkpoints")]
    ShapeMismatch { name: String },
    #[error("cannot average an empty checkpoint list")]
    Empty,
}

/// A complete training snapshot.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub params: ParamStore,
    pub config_text: String,
    pub vocab_tokens: Vec<String>,
    pub topic_words: Vec<String>,
    pub step: u64,
    pub val_score: f64,
}

fn text_record(text: &str) -> Tensor {
    Tensor::vector(text.bytes().map(|b| b as f64).collect())
}

fn record_text(t: &Tensor) -> Result<String, CheckpointError> {
    let bytes: Vec<u8> = t.data().iter().map(|&v| v as u8).collect();
    String::from_utf8(bytes).map_err(|_| CheckpointError::BadName)
}

pub fn save(path: &Path, ckpt: &Checkpoint) -> Result<(), CheckpointError> {
    let io_err = |source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    };
    let file = fs::File::create(path).map_err(io_err)?;
    let mut w = BufWriter::new(file);
    w.write_all(MAGIC).map_err(io_err)?;

    let mut records: Vec<(String, Tensor)> = ckpt
        .params
        .iter()
        .map(|(name, t)| (name.clone(), t.clone()))
        .collect();
    records.push(("__config__".into(), text_record(&ckpt.config_text)));
    records.push(("__vocab__".into(), text_record(&ckpt.vocab_tokens.join("\n"))));
    records.push((
        "__topic_vocab__".into(),
        text_record(&ckpt.topic_words.join("\n")),
    ));
    records.push(("__step__".into(), Tensor::vector(vec![ckpt.step as f64])));
    records.push(("__val_score__".into(), Tensor::vector(vec![ckpt.val_score])));

    for (name, tensor) in &records {
        let name_bytes = name.as_bytes();
        w.write_all(&(name_bytes.len() as u32).to_le_bytes()).map_err(io_err)?;
        w.write_all(name_bytes).map_err(io_err)?;
        w.write_all(&(tensor.rank() as u32).to_le_bytes()).map_err(io_err)?;
        for &d in tensor.shape() {
            w.write_all(&(d as u64).to_le_bytes()).map_err(io_err)?;
        }
        for &v in tensor.data() {
            w.write_all(&v.to_le_bytes()).map_err(io_err)?;
        }
    }
    w.write_all(&(records.len() as u64).to_le_bytes()).map_err(io_err)?;
    w.flush().map_err(io_err)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Checkpoint, CheckpointError> {
    let io_err = |source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    };
    let mut bytes = Vec::new();
    fs::File::open(path)
        .map_err(io_err)?
        .read_to_end(&mut bytes)
        .map_err(io_err)?;
    if bytes.len() < 12 || &bytes[0..4] != MAGIC {
        return Err(if bytes.len() >= 4 && &bytes[0..4] != MAGIC {
            CheckpointError::BadMagic
        } else {
            CheckpointError::Truncated
        });
    }
    let trailer_at = bytes.len() - 8;
    let expected = u64::from_le_bytes(bytes[trailer_at..].try_into().unwrap());

    let mut pos = 4usize;
    let body_end = trailer_at;
    let take = |pos: &mut usize, n: usize| -> Result<&[u8], CheckpointError> {
        if *pos + n > body_end {
            return Err(CheckpointError::Truncated);
        }
        let s = &bytes[*pos..*pos + n];
        *pos += n;
        Ok(s)
    };

    let mut tensors: BTreeMap<String, Tensor> = BTreeMap::new();
    let mut count = 0u64;
    while pos < body_end {
        let name_len = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
        let name = std::str::from_utf8(take(&mut pos, name_len)?)
            .map_err(|_| CheckpointError::BadName)?
            .to_string();
        let rank = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(u64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap()) as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        for _ in 0..numel {
            data.push(f64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap()));
        }
        tensors.insert(name, Tensor::new(shape, data));
        count += 1;
    }
    if count != expected {
        return Err(CheckpointError::CountMismatch {
            expected,
            actual: count,
        });
    }

    let mut grab = |name: &'static str| -> Result<Tensor, CheckpointError> {
        tensors
            .remove(name)
            .ok_or(CheckpointError::MissingReserved(name))
    };
    let config_text = record_text(&grab("__config__")?)?;
    let vocab_text = record_text(&grab("__vocab__")?)?;
    let topic_text = record_text(&grab("__topic_vocab__")?)?;
    let step = grab("__step__")?.item() as u64;
    let val_score = grab("__val_score__")?.item();

    let mut params = ParamStore::new();
    for (name, tensor) in tensors {
        params.insert(&name, tensor);
    }
    let split = |text: &str| -> Vec<String> {
        if text.is_empty() {
            Vec::new()
        } else {
            text.split('\n').map(|s| s.to_string()).collect()
        }
    };
    Ok(Checkpoint {
        params,
        config_text,
        vocab_tokens: split(&vocab_text),
        topic_words: split(&topic_text),
        step,
        val_score,
    })
}

/// Elementwise arithmetic mean of parameter stores with identical names and
/// shapes.
pub fn average_params(stores: &[&ParamStore]) -> Result<ParamStore, CheckpointError> {
    let first = *stores.first().ok_or(CheckpointError::Empty)?;
    let mut out = ParamStore::new();
    let scale = 1.0 / stores.len() as f64;
    for (name, tensor) in first.iter() {
        let mut acc = tensor.clone();
        for other in &stores[1..] {
            if !other.contains(name) || other.get(name).shape() != tensor.shape() {
                return Err(CheckpointError::ShapeMismatch { name: name.clone() });
            }
            acc.add_in_place(other.get(name));
        }
        acc.scale_in_place(scale);
        out.insert(name, acc);
    }
    for other in &stores[1..] {
        if other.len() != first.len() {
            return Err(CheckpointError::ShapeMismatch {
                name: "(parameter set)".into(),
            });
        }
    }
    Ok(out)
}

/// Reserved record names that never name parameters.
pub fn is_reserved(name: &str) -> bool {
    RESERVED.contains(&name)
}
