//! Denoiser checkpoints: a JSON header (model config, training config, source
//! hash, tensor table) followed by little-endian f32 tensor data.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::denoiser::{Denoiser, DenoiserConfig};
use crate::error::{Error, Result};
use crate::io::to_u8;
use crate::rng::seeded_rng;
use crate::training::TrainConfig;
use crate::video::VideoTensor;

const MAGIC: &[u8; 8] = b"PRTGCKPT";
const VERSION: u32 = 1;

/// Hex SHA-256 of the clip's shape and 8-bit quantized samples, so a clip and
/// its saved-and-reloaded frames hash identically.
pub fn source_hash(video: &VideoTensor) -> String {
    let mut h = Sha256::new();
    for d in video.shape() {
        h.update((d as u64).to_le_bytes());
    }
    let bytes: Vec<u8> = video.data().iter().map(|&v| to_u8(v)).collect();
    h.update(&bytes);
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: [usize; 4],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub version: u32,
    pub model: DenoiserConfig,
    pub training: Option<TrainConfig>,
    pub source_hash: String,
    tensors: Vec<TensorEntry>,
}

/// A loaded checkpoint.
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub model: Denoiser,
}

impl Checkpoint {
    /// Wraps an in-memory model as if it had been saved and reloaded.
    pub fn new(model: Denoiser, training: Option<TrainConfig>, source_hash: &str) -> Self {
        let header = CheckpointHeader {
            version: VERSION,
            model: model.config().clone(),
            training,
            source_hash: source_hash.to_string(),
            tensors: tensor_table(&model),
        };
        Self { header, model }
    }

    /// Refuses clips other than the one the model was fine-tuned on.
    pub fn ensure_source(&self, video: &VideoTensor) -> Result<()> {
        let actual = source_hash(video);
        if actual != self.header.source_hash {
            return Err(Error::SourceMismatch {
                expected: self.header.source_hash.clone(),
                actual,
            });
        }
        Ok(())
    }
}

fn tensor_table(model: &Denoiser) -> Vec<TensorEntry> {
    model
        .params()
        .iter()
        .map(|(name, t)| TensorEntry {
            name: name.to_string(),
            shape: t.shape,
        })
        .collect()
}

pub fn encode(model: &Denoiser, training: Option<&TrainConfig>, source_hash: &str) -> Result<Vec<u8>> {
    let header = CheckpointHeader {
        version: VERSION,
        model: model.config().clone(),
        training: training.cloned(),
        source_hash: source_hash.to_string(),
        tensors: tensor_table(model),
    };
    let json = serde_json::to_vec(&header).map_err(|e| Error::Invalid(format!("checkpoint header: {e}")))?;
    let mut out = Vec::with_capacity(20 + json.len() + 4 * model.num_parameters());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, t) in model.params().iter() {
        for v in &t.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    let bad = |m: &str| Error::Invalid(format!("malformed checkpoint: {m}"));
    let mut r = bytes;
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(|_| bad("truncated magic"))?;
    if &magic != MAGIC {
        return Err(bad("bad magic"));
    }
    let mut word = [0u8; 4];
    r.read_exact(&mut word).map_err(|_| bad("truncated version"))?;
    let version = u32::from_le_bytes(word);
    if version != VERSION {
        return Err(bad(&format!("unsupported version {version}")));
    }
    let mut len = [0u8; 8];
    r.read_exact(&mut len).map_err(|_| bad("truncated header length"))?;
    let len = u64::from_le_bytes(len) as usize;
    if r.len() < len {
        return Err(bad("truncated header"));
    }
    let header: CheckpointHeader =
        serde_json::from_slice(&r[..len]).map_err(|e| bad(&format!("header json: {e}")))?;
    r = &r[len..];
    let mut model = Denoiser::new(header.model.clone(), &mut seeded_rng(0))?;
    if header.tensors.len() != model.params().len() {
        return Err(bad(&format!(
            "{} tensors for a model with {}",
            header.tensors.len(),
            model.params().len()
        )));
    }
    for entry in &header.tensors {
        let idx = model
            .params()
            .index_of(&entry.name)
            .ok_or_else(|| bad(&format!("unknown tensor {}", entry.name)))?;
        let t = model.params_mut().value_mut(idx);
        if t.shape != entry.shape {
            return Err(bad(&format!("tensor {} has shape {:?}, expected {:?}", entry.name, entry.shape, t.shape)));
        }
        for v in t.data.iter_mut() {
            r.read_exact(&mut word).map_err(|_| bad("truncated tensor data"))?;
            *v = f32::from_le_bytes(word);
        }
    }
    if !r.is_empty() {
        return Err(bad("trailing bytes"));
    }
    Ok(Checkpoint { header, model })
}

pub fn save(path: &Path, model: &Denoiser, training: Option<&TrainConfig>, source_hash: &str) -> Result<()> {
    let bytes = encode(model, training, source_hash)?;
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}
