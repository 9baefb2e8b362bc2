//! Binary checkpoint format.
//!
//! ```text
//! "DDMC" | u32 LE version | u64 LE header length | JSON header | f64 LE blobs
//! ```
//!
//! The header holds the config, architecture, tensor manifest, iteration,
//! optimizer step and RNG state. Four blobs follow in this order: live
//! weights, EMA weights, Adam first moments, Adam second moments, each in
//! manifest order.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::TrainConfig;
use crate::error::{DdmError, Result};
use crate::mlp::{Architecture, MlpParams};
use crate::numerics::RngStream;

pub const MAGIC: &[u8; 4] = b"DDMC";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub iteration: usize,
    pub live: MlpParams,
    pub ema: MlpParams,
    pub adam_m: MlpParams,
    pub adam_v: MlpParams,
    pub adam_step: u64,
    pub rng: RngStream,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    config: TrainConfig,
    architecture: Architecture,
    manifest: Vec<(String, [usize; 2])>,
    iteration: usize,
    adam_step: u64,
    rng: RngStream,
}

fn bad(msg: impl Into<String>) -> DdmError {
    DdmError::Checkpoint(msg.into())
}

impl Checkpoint {
    pub fn architecture(&self) -> &Architecture {
        &self.live.arch
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let arch = self.live.arch.clone();
        for p in [&self.ema, &self.adam_m, &self.adam_v] {
            if p.arch != arch {
                return Err(bad("tensor sets disagree on architecture"));
            }
        }
        let header = Header {
            config: self.config.clone(),
            manifest: arch.manifest(),
            architecture: arch,
            iteration: self.iteration,
            adam_step: self.adam_step,
            rng: self.rng.clone(),
        };
        let json = serde_json::to_vec(&header)?;
        let n = self.live.arch.n_params();
        let mut out = Vec::with_capacity(16 + json.len() + 4 * 8 * n);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for p in [&self.live, &self.ema, &self.adam_m, &self.adam_v] {
            for v in p.flatten() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 || &bytes[..4] != MAGIC {
            return Err(bad("missing DDMC magic"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(bad(format!("unsupported format version {version}")));
        }
        let json_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let json_end = 16usize
            .checked_add(json_len)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| bad("header length exceeds file size"))?;
        let header: Header = serde_json::from_slice(&bytes[16..json_end])
            .map_err(|e| bad(format!("header: {e}")))?;
        header.config.validate()?;
        let arch = header.architecture;
        arch.validate()?;
        if header.manifest != arch.manifest() {
            return Err(bad("tensor manifest does not match architecture"));
        }
        if header.config.architecture(arch.input_dim)? != arch {
            return Err(bad("architecture does not match config"));
        }
        let n = arch.n_params();
        let blobs = &bytes[json_end..];
        if blobs.len() != 4 * 8 * n {
            return Err(bad(format!(
                "expected {} bytes of weights, found {}",
                4 * 8 * n,
                blobs.len()
            )));
        }
        let mut sets = blobs.chunks_exact(8 * n).map(|chunk| {
            let values: Vec<f64> = chunk
                .chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
                .collect();
            MlpParams::from_flat(arch.clone(), &values)
        });
        let mut next = || sets.next().expect("four blobs");
        Ok(Checkpoint {
            config: header.config,
            iteration: header.iteration,
            live: next()?,
            ema: next()?,
            adam_m: next()?,
            adam_v: next()?,
            adam_step: header.adam_step,
            rng: header.rng,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}
