use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use super::model::LanguageModel;
use super::{LmConfig, LmError};
use crate::numerics::{read_tensors, write_tensors};

pub const LM_MAGIC: &[u8; 4] = b"UHLM";
pub const LM_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LmMeta {
    pub format_version: u32,
    pub train_seed: u64,
    pub corpus_hash: String,
    pub heldout_nll: Option<f64>,
    /// Hash of the run configuration that produced the checkpoint.
    #[serde(default)]
    pub config_hash: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LmCheckpoint {
    pub model: LanguageModel,
    pub meta: LmMeta,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    config: LmConfig,
    meta: LmMeta,
}

pub fn write_checkpoint<W: Write>(w: &mut W, ckpt: &LmCheckpoint) -> Result<(), LmError> {
    let header = serde_json::to_vec(&Header {
        config: ckpt.model.config.clone(),
        meta: ckpt.meta.clone(),
    })
    .map_err(|e| LmError::Checkpoint(e.to_string()))?;
    w.write_all(LM_MAGIC)?;
    w.write_all(&LM_FORMAT_VERSION.to_le_bytes())?;
    w.write_all(&(header.len() as u64).to_le_bytes())?;
    w.write_all(&header)?;
    write_tensors(w, &ckpt.model.params)?;
    Ok(())
}

pub fn read_checkpoint<R: Read>(r: &mut R) -> Result<LmCheckpoint, LmError> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != LM_MAGIC {
        return Err(LmError::Checkpoint("bad magic".into()));
    }
    let mut b4 = [0u8; 4];
    r.read_exact(&mut b4)?;
    let version = u32::from_le_bytes(b4);
    if version != LM_FORMAT_VERSION {
        return Err(LmError::Checkpoint(format!(
            "format version {version}, expected {LM_FORMAT_VERSION}"
        )));
    }
    let mut b8 = [0u8; 8];
    r.read_exact(&mut b8)?;
    let len = u64::from_le_bytes(b8);
    if len > 1 << 20 {
        return Err(LmError::Checkpoint("header too large".into()));
    }
    let mut buf = vec![0u8; len as usize];
    r.read_exact(&mut buf)?;
    let header: Header =
        serde_json::from_slice(&buf).map_err(|e| LmError::Checkpoint(e.to_string()))?;
    let params = read_tensors(r)?;
    Ok(LmCheckpoint {
        model: LanguageModel::from_parts(header.config, params)?,
        meta: header.meta,
    })
}
