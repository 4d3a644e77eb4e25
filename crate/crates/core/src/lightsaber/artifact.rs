//! `model.dpm`: a self-describing container for a trained model.
//!
//! Layout: the line `DPM-MODEL 1`, a line holding the header length in bytes, a JSON
//! header, then every parameter array as little-endian `f32`.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use super::model::{Network, Segment};
use super::{AnyNetwork, ModelSpec, TrainedModel};
use crate::features::Preprocessor;

pub const MODEL_ARTIFACT: &str = "model.dpm";

const MAGIC: &[u8] = b"DPM-MODEL 1\n";

#[derive(Debug, Error)]
pub enum ArtifactError {
    #[error("not a model artifact")]
    BadMagic,
    #[error("model artifact is truncated")]
    Truncated,
    #[error("model artifact is corrupt: {0}")]
    Corrupt(String),
}

#[derive(Serialize, Deserialize)]
struct Header {
    spec: ModelSpec,
    preprocessor: Preprocessor,
    run_id: Option<String>,
    arrays: Vec<Segment>,
    payload_bytes: usize,
    payload_sha256: String,
}

impl TrainedModel {
    pub fn to_bytes(&self) -> Vec<u8> {
        let payload: Vec<u8> = self
            .network
            .params()
            .iter()
            .flat_map(|&p| (p as f32).to_le_bytes())
            .collect();
        let header = Header {
            spec: self.spec.clone(),
            preprocessor: self.preprocessor.clone(),
            run_id: self.run_id.clone(),
            arrays: self.network.segments(),
            payload_bytes: payload.len(),
            payload_sha256: hex::encode(Sha256::digest(&payload)),
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(MAGIC.len() + 16 + json.len() + payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(format!("{}\n", json.len()).as_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&payload);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ArtifactError> {
        let rest = bytes.strip_prefix(MAGIC).ok_or(if MAGIC.starts_with(bytes) {
            ArtifactError::Truncated
        } else {
            ArtifactError::BadMagic
        })?;
        let newline = rest
            .iter()
            .position(|&b| b == b'\n')
            .ok_or(ArtifactError::Truncated)?;
        let header_len: usize = std::str::from_utf8(&rest[..newline])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| ArtifactError::Corrupt("bad header length".into()))?;
        let rest = &rest[newline + 1..];
        if rest.len() < header_len {
            return Err(ArtifactError::Truncated);
        }
        let header: Header = serde_json::from_slice(&rest[..header_len])
            .map_err(|e| ArtifactError::Corrupt(format!("header: {e}")))?;
        let payload = &rest[header_len..];
        if payload.len() < header.payload_bytes {
            return Err(ArtifactError::Truncated);
        }
        if payload.len() > header.payload_bytes {
            return Err(ArtifactError::Corrupt("trailing bytes".into()));
        }
        if hex::encode(Sha256::digest(payload)) != header.payload_sha256 {
            return Err(ArtifactError::Corrupt("payload checksum mismatch".into()));
        }
        header
            .spec
            .validate()
            .map_err(|e| ArtifactError::Corrupt(e.to_string()))?;

        let mut network = AnyNetwork::<f64>::build(&header.spec, header.preprocessor.signature, 0);
        if network.segments() != header.arrays || network.params().len() * 4 != payload.len() {
            return Err(ArtifactError::Corrupt(
                "parameter layout does not match the model spec".into(),
            ));
        }
        for (p, chunk) in network.params_mut().iter_mut().zip(payload.chunks_exact(4)) {
            let v = f32::from_le_bytes(chunk.try_into().expect("chunk of 4"));
            if !v.is_finite() {
                return Err(ArtifactError::Corrupt("non-finite parameter".into()));
            }
            *p = f64::from(v);
        }
        Ok(TrainedModel {
            spec: header.spec,
            network,
            preprocessor: header.preprocessor,
            run_id: header.run_id,
        })
    }
}
