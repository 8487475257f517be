use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use super::train::{EpochMetrics, UHeadCheckpoint, UHeadTrainHyper};
use super::{UHead, UHeadConfig, UHeadError};
use crate::numerics::{read_tensors, write_tensors, Tensor};

pub const UHEAD_MAGIC: &[u8; 4] = b"UHUH";
pub const UHEAD_FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    config: UHeadConfig,
    hyper: UHeadTrainHyper,
    data_hash: String,
    metrics: Vec<EpochMetrics>,
    selected_epoch: usize,
    parameter_count: usize,
    #[serde(default)]
    config_hash: String,
}

/// Layout: magic, version, length-prefixed JSON header, then the weight
/// tensors followed by the input mean and scale rows.
pub fn write_uhead<W: Write>(w: &mut W, ck: &UHeadCheckpoint) -> Result<(), UHeadError> {
    let header = serde_json::to_vec(&Header {
        config: ck.head.config.clone(),
        hyper: ck.hyper.clone(),
        data_hash: ck.data_hash.clone(),
        metrics: ck.metrics.clone(),
        selected_epoch: ck.selected_epoch,
        parameter_count: ck.head.parameter_count(),
        config_hash: ck.config_hash.clone(),
    })
    .map_err(|e| UHeadError::Checkpoint(e.to_string()))?;
    w.write_all(UHEAD_MAGIC)?;
    w.write_all(&UHEAD_FORMAT_VERSION.to_le_bytes())?;
    w.write_all(&(header.len() as u64).to_le_bytes())?;
    w.write_all(&header)?;
    let mut tensors = ck.head.params.clone();
    tensors.push(Tensor::row(ck.head.input_mean.clone()));
    tensors.push(Tensor::row(ck.head.input_scale.clone()));
    write_tensors(w, &tensors)?;
    Ok(())
}

pub fn read_uhead<R: Read>(r: &mut R) -> Result<UHeadCheckpoint, UHeadError> {
    let bad = |m: String| UHeadError::Checkpoint(m);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != UHEAD_MAGIC {
        return Err(bad("bad magic".into()));
    }
    let mut b4 = [0u8; 4];
    r.read_exact(&mut b4)?;
    let version = u32::from_le_bytes(b4);
    if version != UHEAD_FORMAT_VERSION {
        return Err(bad(format!(
            "format version {version}, expected {UHEAD_FORMAT_VERSION}"
        )));
    }
    let mut b8 = [0u8; 8];
    r.read_exact(&mut b8)?;
    let len = u64::from_le_bytes(b8);
    if len > 1 << 24 {
        return Err(bad("header too large".into()));
    }
    let mut buf = vec![0u8; len as usize];
    r.read_exact(&mut buf)?;
    let h: Header = serde_json::from_slice(&buf).map_err(|e| bad(e.to_string()))?;
    h.config.validate()?;
    let mut tensors = read_tensors(r)?;
    let shapes = h.config.shapes();
    if tensors.len() != shapes.len() + 2 {
        return Err(bad("tensor count does not match config".into()));
    }
    let scale = tensors.pop().expect("len checked").into_data();
    let mean = tensors.pop().expect("len checked").into_data();
    if mean.len() != h.config.input_dim || scale.len() != h.config.input_dim {
        return Err(bad("standardization width does not match config".into()));
    }
    for (t, (r, c)) in tensors.iter().zip(&shapes) {
        if t.shape() != [*r, *c] {
            return Err(bad(format!("tensor shape {:?}, expected [{r}, {c}]", t.shape())));
        }
    }
    let head = UHead {
        config: h.config,
        params: tensors,
        input_mean: mean,
        input_scale: scale,
    };
    if head.parameter_count() != h.parameter_count {
        return Err(bad("parameter count mismatch".into()));
    }
    Ok(UHeadCheckpoint {
        head,
        hyper: h.hyper,
        data_hash: h.data_hash,
        metrics: h.metrics,
        selected_epoch: h.selected_epoch,
        config_hash: h.config_hash,
    })
}
