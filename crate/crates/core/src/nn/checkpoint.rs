//! Binary checkpoint format, all integers little-endian:
//!
//! ```text
//! magic      8 bytes  "VLSEGCKP"
//! version    u32      1
//! config_len u32      length of the JSON network configuration
//! config     bytes    UTF-8 JSON
//! count      u64      number of parameters
//! params     f32 * count, in parameter-layout order
//! ```

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use super::config::NetworkConfig;
use super::params::count_parameters;
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"VLSEGCKP";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: NetworkConfig,
    pub params: Vec<f32>,
}

fn ckpt_err(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

impl Checkpoint {
    pub fn new(config: NetworkConfig, params: Vec<f32>) -> Result<Self> {
        config.validate()?;
        let expected = count_parameters(&config);
        if params.len() != expected {
            return Err(ckpt_err(format!(
                "{} parameters for a configuration with {expected}",
                params.len()
            )));
        }
        Ok(Checkpoint { config, params })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let cfg = self.config.to_json();
        let mut out = Vec::with_capacity(24 + cfg.len() + 4 * self.params.len());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
        out.extend_from_slice(cfg.as_bytes());
        out.extend_from_slice(&(self.params.len() as u64).to_le_bytes());
        for p in &self.params {
            out.extend_from_slice(&p.to_le_bytes());
        }
        out
    }

    pub fn write_to(&self, w: &mut impl Write) -> std::io::Result<()> {
        w.write_all(&self.to_bytes())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut buf = Vec::new();
        r.read_to_end(&mut buf)
            .map_err(|e| ckpt_err(format!("read failed: {e}")))?;
        Self::from_bytes(&buf)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut pos = 0usize;
        let mut take = |n: usize| -> Result<&[u8]> {
            let s = bytes
                .get(pos..pos + n)
                .ok_or_else(|| ckpt_err("truncated checkpoint"))?;
            pos += n;
            Ok(s)
        };
        if take(8)? != CHECKPOINT_MAGIC {
            return Err(ckpt_err("not a checkpoint file"));
        }
        let version = u32::from_le_bytes(take(4)?.try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(ckpt_err(format!("unsupported version {version}")));
        }
        let len = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
        let cfg_text = std::str::from_utf8(take(len)?).map_err(|_| ckpt_err("config is not UTF-8"))?;
        let config: NetworkConfig =
            serde_json::from_str(cfg_text).map_err(|e| ckpt_err(format!("bad config: {e}")))?;
        let count = u64::from_le_bytes(take(8)?.try_into().unwrap()) as usize;
        let raw = take(count.checked_mul(4).ok_or_else(|| ckpt_err("bad count"))?)?;
        let params = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if take(1).is_ok() {
            return Err(ckpt_err("trailing bytes after parameters"));
        }
        Checkpoint::new(config, params)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_to(&mut f).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Loads a checkpoint that must have been written for `expected`.
    pub fn load_for(path: &Path, expected: &NetworkConfig) -> Result<Self> {
        let ck = Self::load(path)?;
        if &ck.config != expected {
            return Err(ckpt_err(format!(
                "{} was written for a different network configuration",
                path.display()
            )));
        }
        Ok(ck)
    }
}
