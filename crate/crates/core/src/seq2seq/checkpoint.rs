use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::model::{Architecture, Role, Seq2SeqModel};
use super::vocab::Vocab;
use super::Seq2SeqError;
use crate::autodiff::{ParamSet, Tensor};

const MAGIC: &[u8; 8] = b"SEMAECKP";
pub const CHECKPOINT_VERSION: u32 = 1;
const DIGEST_LEN: usize = 32;

#[derive(Serialize, Deserialize)]
struct Manifest {
    version: u32,
    role: Role,
    architecture: Architecture,
    trainable: bool,
    vocab: Vocab,
    params: Vec<ParamEntry>,
}

#[derive(Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
}

/// Layout: magic, manifest length (u64 LE), JSON manifest, little-endian
/// `f32` blocks in manifest order, SHA-256 of everything before it.
pub fn to_bytes(model: &Seq2SeqModel) -> Vec<u8> {
    let manifest = Manifest {
        version: CHECKPOINT_VERSION,
        role: model.role,
        architecture: model.arch.clone(),
        trainable: model.trainable,
        vocab: model.vocab.clone(),
        params: model
            .params
            .iter()
            .map(|(name, t)| ParamEntry { name: name.to_string(), shape: t.shape().to_vec() })
            .collect(),
    };
    let json = serde_json::to_vec(&manifest).expect("manifest serializes");
    let mut out = Vec::with_capacity(16 + json.len() + 4 * model.params.num_scalars() + DIGEST_LEN);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for t in model.params.tensors() {
        for x in t.data() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    out
}

pub fn from_bytes(bytes: &[u8]) -> Result<Seq2SeqModel, Seq2SeqError> {
    let bad = |m: &str| Seq2SeqError::Checkpoint(m.to_string());
    if bytes.len() < MAGIC.len() + 8 + DIGEST_LEN || &bytes[..MAGIC.len()] != MAGIC {
        return Err(bad("not a checkpoint file"));
    }
    let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
    if Sha256::digest(body).as_slice() != digest {
        return Err(bad("checksum mismatch (truncated or corrupted file)"));
    }
    let len_bytes: [u8; 8] = body[8..16].try_into().expect("eight bytes");
    let json_len = usize::try_from(u64::from_le_bytes(len_bytes)).map_err(|_| bad("manifest too large"))?;
    let json = body.get(16..16 + json_len).ok_or_else(|| bad("manifest truncated"))?;
    let manifest: Manifest = serde_json::from_slice(json).map_err(|e| bad(&format!("manifest: {e}")))?;
    if manifest.version != CHECKPOINT_VERSION {
        return Err(bad(&format!(
            "version {} (this build reads {CHECKPOINT_VERSION})",
            manifest.version
        )));
    }
    let mut rest = &body[16 + json_len..];
    let mut params = ParamSet::new();
    for entry in manifest.params {
        let n: usize = entry.shape.iter().product();
        let block = rest.get(..4 * n).ok_or_else(|| bad("parameter data truncated"))?;
        let data = block
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("four bytes")))
            .collect();
        params.insert(entry.name, Tensor::new(entry.shape, data)?)?;
        rest = &rest[4 * n..];
    }
    if !rest.is_empty() {
        return Err(bad("trailing bytes after parameter data"));
    }
    let expected = Seq2SeqModel::new(manifest.role, manifest.architecture.clone(), manifest.vocab.clone(), 0)?;
    let layout_matches = expected.params.len() == params.len()
        && expected
            .params
            .iter()
            .zip(params.iter())
            .all(|((a, ta), (b, tb))| a == b && ta.shape() == tb.shape());
    if !layout_matches {
        return Err(bad("parameter layout does not match the architecture"));
    }
    Ok(Seq2SeqModel {
        role: manifest.role,
        arch: manifest.architecture,
        vocab: manifest.vocab,
        params,
        trainable: manifest.trainable,
    })
}

pub fn save_checkpoint(model: &Seq2SeqModel, path: impl AsRef<Path>) -> Result<(), Seq2SeqError> {
    let path = path.as_ref();
    fs::write(path, to_bytes(model)).map_err(|source| Seq2SeqError::Io { path: path.to_path_buf(), source })
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Seq2SeqModel, Seq2SeqError> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|source| Seq2SeqError::Io { path: path.to_path_buf(), source })?;
    from_bytes(&bytes)
}
