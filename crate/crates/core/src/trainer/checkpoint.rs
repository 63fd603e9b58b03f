use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::frame::FrameKey;
use crate::model::ByteCursor;
use crate::trainer::config::TrainConfig;

const MAGIC: &[u8; 8] = b"LLCDCKP\0";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    /// `u128` word position, as a decimal string.
    pub word_pos: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BufferState {
    /// Frames in slot order.
    pub keys: Vec<FrameKey>,
    pub next_slot: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrackCounts {
    pub running: u64,
    pub prior: Option<u64>,
    pub blended: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counters {
    /// Optimizer steps taken over the whole run.
    pub step: u64,
    /// Stream events consumed, end markers included.
    pub position: u64,
    /// Frames consumed in the current environment.
    pub env_frames: u64,
    /// 1-based current environment.
    pub env: u32,
    /// Completed steps in the current environment.
    pub env_steps: u64,
    pub rmas: TrackCounts,
    pub mas: Option<TrackCounts>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub config: TrainConfig,
    pub config_hash: String,
    pub rng: RngState,
    pub buffer: BufferState,
    pub counters: Counters,
}

/// Complete training state: a JSON header plus named `f64` arrays, guarded
/// by a SHA-256 trailer.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub arrays: Vec<(String, Vec<f64>)>,
}

impl Checkpoint {
    pub fn array(&self, name: &str) -> Option<&[f64]> {
        self.arrays
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| v.as_slice())
    }

    pub fn require(&self, name: &str) -> Result<&[f64]> {
        self.array(name)
            .ok_or_else(|| Error::corrupt(format!("checkpoint lacks array `{name}`")))
    }

    /// Final parameters.
    pub fn params(&self) -> Result<&[f64]> {
        self.require("theta")
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        let json = serde_json::to_vec(&self.header)?;
        buf.extend_from_slice(&(json.len() as u32).to_le_bytes());
        buf.extend_from_slice(&json);
        buf.extend_from_slice(&(self.arrays.len() as u32).to_le_bytes());
        for (name, values) in &self.arrays {
            buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
            buf.extend_from_slice(name.as_bytes());
            buf.extend_from_slice(&(values.len() as u64).to_le_bytes());
            for v in values {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        let digest = Sha256::digest(&buf);
        buf.extend_from_slice(&digest);
        Ok(buf)
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        if buf.len() < 8 + 4 + 4 + 4 + 32 {
            return Err(Error::corrupt("checkpoint truncated"));
        }
        let (body, digest) = buf.split_at(buf.len() - 32);
        if Sha256::digest(body).as_slice() != digest {
            return Err(Error::corrupt("checksum mismatch"));
        }
        let mut cur = ByteCursor::new(body);
        if cur.take(8)? != MAGIC {
            return Err(Error::corrupt("not a checkpoint"));
        }
        let version = cur.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::corrupt(format!(
                "unsupported checkpoint version {version}"
            )));
        }
        let len = cur.u32()? as usize;
        let header: CheckpointHeader = serde_json::from_slice(cur.take(len)?)?;
        let count = cur.u32()? as usize;
        let mut arrays = Vec::with_capacity(count);
        for _ in 0..count {
            let n = cur.u32()? as usize;
            let name = String::from_utf8(cur.take(n)?.to_vec())
                .map_err(|_| Error::corrupt("array name is not UTF-8"))?;
            let len = cur.u64()? as usize;
            arrays.push((name, cur.f64s(len)?));
        }
        if !cur.is_empty() {
            return Err(Error::corrupt("trailing bytes"));
        }
        if header.config.hash() != header.config_hash {
            return Err(Error::corrupt("config hash does not match stored config"));
        }
        Ok(Self { header, arrays })
    }

    /// Writes to a temporary sibling first so a crash never leaves a
    /// half-written checkpoint under the final name.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("ckpt.tmp");
        {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(&self.to_bytes()?)?;
            f.sync_all()?;
        }
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingCheckpoint(path.display().to_string()));
        }
        let buf = fs::read(path)?;
        Self::from_bytes(&buf).map_err(|e| match e {
            Error::Corrupt { message, .. } => Error::Corrupt {
                path: Some(path.to_path_buf()),
                message,
            },
            other => other,
        })
    }
}
