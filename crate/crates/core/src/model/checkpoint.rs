use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::arch::ArchConfig;
use super::params::ModelParams;
use super::real::Real;
use crate::data::{read_file, to_hex, write_file};
use crate::error::{Error, Result};

pub const CHECKPOINT_FORMAT: &str = "massflow-checkpoint/1";
pub const CHECKPOINT_JSON: &str = "model.json";
pub const CHECKPOINT_BLOB: &str = "model.bin";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum Precision {
    #[default]
    #[serde(rename = "32")]
    F32,
    #[serde(rename = "64")]
    F64,
}

impl Precision {
    pub fn of<T: Real>() -> Self {
        if T::BITS == 64 {
            Precision::F64
        } else {
            Precision::F32
        }
    }

    pub fn bytes(self) -> usize {
        match self {
            Precision::F32 => 4,
            Precision::F64 => 8,
        }
    }
}

impl std::str::FromStr for Precision {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "32" | "f32" => Ok(Precision::F32),
            "64" | "f64" => Ok(Precision::F64),
            _ => Err(Error::config(format!("precision must be 32 or 64, got {s:?}"))),
        }
    }
}

/// JSON half of a checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format: String,
    pub arch: ArchConfig,
    pub precision: Precision,
    pub param_count: usize,
    /// Hex sha256 of the blob.
    pub sha256: String,
    #[serde(default)]
    pub epoch: Option<usize>,
}

/// Architecture plus the raw little-endian parameter blob.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    blob: Vec<u8>,
}

impl Checkpoint {
    pub fn from_params<T: Real>(params: &ModelParams<T>) -> Self {
        let blob = T::to_le_bytes_vec(params.values());
        Self {
            meta: CheckpointMeta {
                format: CHECKPOINT_FORMAT.into(),
                arch: params.arch().clone(),
                precision: Precision::of::<T>(),
                param_count: params.len(),
                sha256: to_hex(&Sha256::digest(&blob)),
                epoch: None,
            },
            blob,
        }
    }

    pub fn with_epoch(mut self, epoch: usize) -> Self {
        self.meta.epoch = Some(epoch);
        self
    }

    pub fn blob(&self) -> &[u8] {
        &self.blob
    }

    /// Parameters in precision `T`, converting if the stored precision
    /// differs.
    pub fn params<T: Real>(&self) -> Result<ModelParams<T>> {
        let values: Vec<T> = match self.meta.precision {
            Precision::F32 => self.blob.chunks_exact(4).map(|c| T::of(f32::from_le_chunk(c) as f64)).collect(),
            Precision::F64 => self.blob.chunks_exact(8).map(|c| T::of(f64::from_le_chunk(c))).collect(),
        };
        ModelParams::from_values(&self.meta.arch, values)
    }

    pub fn encode(&self) -> Result<(Vec<u8>, Vec<u8>)> {
        Ok((serde_json::to_vec_pretty(&self.meta)?, self.blob.clone()))
    }

    /// Parses and verifies a checkpoint from its two files' contents.
    pub fn decode(json: &[u8], blob: &[u8]) -> Result<Self> {
        let meta: CheckpointMeta =
            serde_json::from_slice(json).map_err(|e| Error::corrupt(format!("checkpoint descriptor: {e}")))?;
        if meta.format != CHECKPOINT_FORMAT {
            return Err(Error::corrupt(format!("unknown checkpoint format {:?}", meta.format)));
        }
        meta.arch
            .validate()
            .map_err(|e| Error::corrupt(format!("checkpoint architecture: {e}")))?;
        let n = meta.arch.param_count();
        if n != meta.param_count {
            return Err(Error::corrupt(format!(
                "param_count {} but architecture has {n}",
                meta.param_count
            )));
        }
        let want = n
            .checked_mul(meta.precision.bytes())
            .ok_or_else(|| Error::corrupt("parameter blob size overflows"))?;
        if blob.len() != want {
            return Err(Error::corrupt(format!("blob is {} bytes, expected {want}", blob.len())));
        }
        let digest = to_hex(&Sha256::digest(blob));
        if digest != meta.sha256 {
            return Err(Error::corrupt("checksum mismatch"));
        }
        let ck = Self {
            meta,
            blob: blob.to_vec(),
        };
        ck.params::<f64>()
            .map_err(|_| Error::corrupt("non-finite parameter values"))?;
        Ok(ck)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let (json, blob) = self.encode()?;
        write_file(&dir.join(CHECKPOINT_BLOB), &blob)?;
        write_file(&dir.join(CHECKPOINT_JSON), &json)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let json = read_file(&dir.join(CHECKPOINT_JSON))?;
        let blob = read_file(&dir.join(CHECKPOINT_BLOB))?;
        Self::decode(&json, &blob)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::ImageDims;
    use crate::model::Preset;

    fn sample() -> ModelParams<f32> {
        ModelParams::build(&ArchConfig::preset(Preset::Res9er, ImageDims::new(16, 16, 1), 3)).unwrap()
    }

    #[test]
    fn round_trip_is_bitwise() {
        let p = sample();
        let dir = tempfile::tempdir().unwrap();
        Checkpoint::from_params(&p).with_epoch(2).save(dir.path()).unwrap();
        let back = Checkpoint::load(dir.path()).unwrap();
        assert_eq!(back.meta.epoch, Some(2));
        let q = back.params::<f32>().unwrap();
        assert!(p.values().iter().zip(q.values()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn tampering_is_detected() {
        let ck = Checkpoint::from_params(&sample());
        let (json, mut blob) = ck.encode().unwrap();
        blob[5] ^= 1;
        assert!(matches!(Checkpoint::decode(&json, &blob), Err(Error::CorruptArchive(_))));
        blob.pop();
        assert!(matches!(Checkpoint::decode(&json, &blob), Err(Error::CorruptArchive(_))));
        assert!(matches!(Checkpoint::decode(b"{", &blob), Err(Error::CorruptArchive(_))));
    }

    #[test]
    fn missing_checkpoint_is_not_found() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(Checkpoint::load(&dir.path().join("nope")), Err(Error::NotFound(_))));
    }

    #[test]
    fn widening_preserves_values() {
        let p = sample();
        let q = Checkpoint::from_params(&p).params::<f64>().unwrap();
        assert!(p.values().iter().zip(q.values()).all(|(a, b)| *a as f64 == *b));
    }
}
