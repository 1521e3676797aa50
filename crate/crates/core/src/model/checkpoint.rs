//! Binary checkpoints: magic, a length-prefixed JSON header, then
//! little-endian f64 parameters and (optionally) the two Adam moment vectors.
//! Loading refuses a checkpoint whose vocabulary hash differs from the
//! caller's.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use super::train::TrainState;
use super::{Model, ModelConfig, ModelError};

const MAGIC: &[u8; 8] = b"NXPOICK1";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("malformed checkpoint header: {0}")]
    Header(String),
    #[error("vocabulary hash mismatch: checkpoint {found}, expected {expected}")]
    VocabMismatch { expected: String, found: String },
    #[error("payload corrupted: {0}")]
    Payload(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Header {
    pub format_version: u32,
    /// Free-form role tag, e.g. `lm` or `draft`.
    pub kind: String,
    pub config: serde_json::Value,
    pub vocab_hash: String,
    pub step: u64,
    pub rng_seed: String,
    pub rng_word_pos: String,
    pub param_count: usize,
    pub has_moments: bool,
    pub payload_sha256: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub header: Header,
    pub params: Vec<f64>,
    pub moments: Option<(Vec<f64>, Vec<f64>)>,
}

fn encode_f64s(out: &mut Vec<u8>, xs: &[f64]) {
    for x in xs {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

fn decode_f64s(bytes: &[u8]) -> Vec<f64> {
    bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk"))).collect()
}

impl Checkpoint {
    /// Builds a checkpoint for arbitrary parameters; `config` is stored verbatim.
    pub fn new(kind: &str, config: serde_json::Value, vocab_hash: &str, params: Vec<f64>, moments: Option<(Vec<f64>, Vec<f64>)>, step: u64, rng: Option<&ChaCha8Rng>) -> Self {
        let (seed, pos) = match rng {
            Some(r) => (hex::encode(r.get_seed()), r.get_word_pos().to_string()),
            None => (String::new(), "0".into()),
        };
        let header = Header {
            format_version: FORMAT_VERSION,
            kind: kind.into(),
            config,
            vocab_hash: vocab_hash.into(),
            step,
            rng_seed: seed,
            rng_word_pos: pos,
            param_count: params.len(),
            has_moments: moments.is_some(),
            payload_sha256: String::new(),
        };
        Checkpoint { header, params, moments }
    }

    pub fn from_model(kind: &str, model: &Model, vocab_hash: &str) -> Self {
        let cfg = serde_json::to_value(&model.cfg).expect("config serializes");
        Checkpoint::new(kind, cfg, vocab_hash, model.params.clone(), None, 0, None)
    }

    pub fn from_state(kind: &str, state: &TrainState, vocab_hash: &str) -> Self {
        let cfg = serde_json::to_value(&state.model.cfg).expect("config serializes");
        let moments = Some((state.m.clone(), state.v.clone()));
        Checkpoint::new(kind, cfg, vocab_hash, state.model.params.clone(), moments, state.step, Some(&state.rng))
    }

    fn payload(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.params.len() * 8 * if self.moments.is_some() { 3 } else { 1 });
        encode_f64s(&mut out, &self.params);
        if let Some((m, v)) = &self.moments {
            encode_f64s(&mut out, m);
            encode_f64s(&mut out, v);
        }
        out
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let payload = self.payload();
        let mut header = self.header.clone();
        header.payload_sha256 = hex::encode(Sha256::digest(&payload));
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(16 + json.len() + payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&payload);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let rest = &bytes[16..];
        if rest.len() < hlen {
            return Err(CheckpointError::Header("truncated header".into()));
        }
        let header: Header = serde_json::from_slice(&rest[..hlen]).map_err(|e| CheckpointError::Header(e.to_string()))?;
        if header.format_version != FORMAT_VERSION {
            return Err(CheckpointError::Header(format!("unsupported format version {}", header.format_version)));
        }
        let payload = &rest[hlen..];
        let n = header.param_count;
        let want = n * 8 * if header.has_moments { 3 } else { 1 };
        if payload.len() != want {
            return Err(CheckpointError::Payload(format!("expected {want} bytes, found {}", payload.len())));
        }
        if hex::encode(Sha256::digest(payload)) != header.payload_sha256 {
            return Err(CheckpointError::Payload("checksum mismatch".into()));
        }
        let params = decode_f64s(&payload[..n * 8]);
        let moments = header.has_moments.then(|| (decode_f64s(&payload[n * 8..n * 16]), decode_f64s(&payload[n * 16..])));
        Ok(Checkpoint { header, params, moments })
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        let tmp = path.with_extension("tmp");
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&self.to_bytes())?;
        f.sync_all()?;
        fs::rename(tmp, path)?;
        Ok(())
    }

    /// Reads `path`; when `vocab_hash` is given, a mismatch is an error.
    pub fn load(path: &Path, vocab_hash: Option<&str>) -> Result<Self, CheckpointError> {
        let mut bytes = Vec::new();
        fs::File::open(path)?.read_to_end(&mut bytes)?;
        let ck = Checkpoint::from_bytes(&bytes)?;
        if let Some(h) = vocab_hash {
            ck.check_vocab(h)?;
        }
        Ok(ck)
    }

    pub fn check_vocab(&self, expected: &str) -> Result<(), CheckpointError> {
        if self.header.vocab_hash != expected {
            return Err(CheckpointError::VocabMismatch { expected: expected.into(), found: self.header.vocab_hash.clone() });
        }
        Ok(())
    }

    pub fn to_model(&self) -> Result<Model, CheckpointError> {
        let cfg: ModelConfig = serde_json::from_value(self.header.config.clone()).map_err(|e| CheckpointError::Header(e.to_string()))?;
        let mut model = Model::new(cfg)?;
        if model.params.len() != self.params.len() {
            return Err(CheckpointError::Payload(format!("config implies {} params, file has {}", model.params.len(), self.params.len())));
        }
        model.params.clone_from(&self.params);
        Ok(model)
    }

    pub fn to_state(&self) -> Result<TrainState, CheckpointError> {
        let model = self.to_model()?;
        let mut state = TrainState::new(model, 0);
        if let Some((m, v)) = &self.moments {
            state.m.clone_from(m);
            state.v.clone_from(v);
        }
        state.step = self.header.step;
        if !self.header.rng_seed.is_empty() {
            let seed: [u8; 32] = hex::decode(&self.header.rng_seed)
                .ok()
                .and_then(|b| b.try_into().ok())
                .ok_or_else(|| CheckpointError::Header("bad rng seed".into()))?;
            let pos: u128 = self.header.rng_word_pos.parse().map_err(|_| CheckpointError::Header("bad rng position".into()))?;
            state.rng = ChaCha8Rng::from_seed(seed);
            state.rng.set_word_pos(pos);
        }
        Ok(state)
    }
}
