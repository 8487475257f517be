use std::io::{ErrorKind, Read, Write};

use serde::{Deserialize, Serialize};

use super::{FeatureConfig, FeatureError, StepFeatures};
use crate::numerics::Tensor;

pub const FEATURE_MAGIC: &[u8; 4] = b"UHFT";
pub const FEATURE_FORMAT_VERSION: u32 = 1;

fn put_u64<W: Write>(w: &mut W, v: u64) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn get_u64<R: Read>(r: &mut R) -> std::io::Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    config: FeatureConfig,
    config_hash: String,
}

pub fn write_feature_file<W: Write>(
    w: &mut W,
    cfg: &FeatureConfig,
    config_hash: &str,
    steps: &[StepFeatures],
) -> Result<(), FeatureError> {
    let d = cfg.width();
    if let Some(s) = steps.iter().find(|s| s.width() != d) {
        return Err(FeatureError::WidthMismatch {
            expected: d,
            found: s.width(),
        });
    }
    let json = serde_json::to_vec(&Header {
        config: cfg.clone(),
        config_hash: config_hash.to_string(),
    }).map_err(|e| FeatureError::CorruptHeader(e.to_string()))?;
    w.write_all(FEATURE_MAGIC)?;
    w.write_all(&FEATURE_FORMAT_VERSION.to_le_bytes())?;
    put_u64(w, json.len() as u64)?;
    w.write_all(&json)?;
    for s in steps {
        put_u64(w, s.problem_id.len() as u64)?;
        w.write_all(s.problem_id.as_bytes())?;
        put_u64(w, s.chain_index as u64)?;
        put_u64(w, s.step_index as u64)?;
        put_u64(w, s.tokens() as u64)?;
        put_u64(w, d as u64)?;
        for v in s.data.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

/// Reads records until end of file. Returns the feature config, the
/// producing config hash and the records.
pub fn read_feature_file<R: Read>(
    r: &mut R,
) -> Result<(FeatureConfig, String, Vec<StepFeatures>), FeatureError> {
    let corrupt = |m: &str| FeatureError::CorruptHeader(m.to_string());
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|_| corrupt("missing magic"))?;
    if &magic != FEATURE_MAGIC {
        return Err(corrupt("bad magic"));
    }
    let mut b4 = [0u8; 4];
    r.read_exact(&mut b4).map_err(|_| corrupt("missing version"))?;
    let version = u32::from_le_bytes(b4);
    if version != FEATURE_FORMAT_VERSION {
        return Err(FeatureError::VersionMismatch {
            found: version,
            expected: FEATURE_FORMAT_VERSION,
        });
    }
    let len = get_u64(r).map_err(|_| corrupt("missing config length"))?;
    if len > 1 << 20 {
        return Err(corrupt("config block too large"));
    }
    let mut json = vec![0u8; len as usize];
    r.read_exact(&mut json).map_err(|_| corrupt("truncated config"))?;
    let Header { config: cfg, config_hash } =
        serde_json::from_slice(&json).map_err(|e| FeatureError::CorruptHeader(e.to_string()))?;
    cfg.validate()?;
    let d = cfg.width();
    let mut steps = Vec::new();
    loop {
        let id_len = match get_u64(r) {
            Ok(v) => v,
            Err(e) if e.kind() == ErrorKind::UnexpectedEof => break,
            Err(e) => return Err(e.into()),
        };
        if id_len > 1 << 16 {
            return Err(corrupt("record id too long"));
        }
        let mut id = vec![0u8; id_len as usize];
        r.read_exact(&mut id)?;
        let problem_id = String::from_utf8(id).map_err(|_| corrupt("record id not utf-8"))?;
        let chain_index = get_u64(r)? as usize;
        let step_index = get_u64(r)? as usize;
        let t = get_u64(r)? as usize;
        let width = get_u64(r)? as usize;
        if width != d {
            return Err(FeatureError::WidthMismatch {
                expected: d,
                found: width,
            });
        }
        if t == 0 || t > 1 << 20 {
            return Err(corrupt("bad record length"));
        }
        let mut raw = vec![0u8; t * d * 4];
        r.read_exact(&mut raw)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        steps.push(StepFeatures {
            problem_id,
            chain_index,
            step_index,
            data: Tensor::matrix(t, d, data),
        });
    }
    Ok((cfg, config_hash, steps))
}
