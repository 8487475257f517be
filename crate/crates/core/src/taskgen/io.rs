//! JSONL storage. Files may start with a `{"header": ...}` line naming the
//! artifact and the config hash it was produced under.

use std::io::{BufRead, Write};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::{Family, JudgeId, StepLabels, TaskError};
use crate::toylm::StopReason;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArtifactHeader {
    pub artifact: String,
    pub version: u32,
    pub config_hash: String,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct HeaderLine {
    header: ArtifactHeader,
}

/// One sampled chain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainRecord {
    pub problem_id: String,
    pub chain_index: usize,
    pub family: Family,
    /// Prompt followed by generated tokens.
    pub tokens: Vec<usize>,
    pub prompt_len: usize,
    pub text: String,
    pub stop: StopReason,
}

/// Per-chain step labels; `steps` holds 1 for correct and 0 for incorrect.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelRecord {
    pub problem_id: String,
    pub chain_index: usize,
    pub steps: Vec<u8>,
    pub final_correct: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub judge: Option<JudgeId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

impl LabelRecord {
    pub fn from_labels(problem_id: &str, chain_index: usize, labels: &StepLabels) -> Self {
        Self {
            problem_id: problem_id.to_string(),
            chain_index,
            steps: labels.correct.iter().map(|&b| b as u8).collect(),
            final_correct: labels.final_correct,
            judge: Some(labels.judge.clone()),
            note: None,
        }
    }
}

pub fn write_jsonl<W: Write, T: Serialize>(
    w: &mut W,
    header: Option<&ArtifactHeader>,
    items: &[T],
) -> Result<(), TaskError> {
    let enc = |e: serde_json::Error| TaskError::Jsonl {
        line: 0,
        message: e.to_string(),
    };
    if let Some(h) = header {
        serde_json::to_writer(&mut *w, &HeaderLine { header: h.clone() }).map_err(enc)?;
        w.write_all(b"\n")?;
    }
    for it in items {
        serde_json::to_writer(&mut *w, it).map_err(enc)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

/// Reads records, skipping blank lines; the header line is optional.
pub fn read_jsonl<R: BufRead, T: DeserializeOwned>(
    r: R,
) -> Result<(Option<ArtifactHeader>, Vec<T>), TaskError> {
    let mut header = None;
    let mut items = Vec::new();
    for (n, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        if n == 0 && line.trim_start().starts_with("{\"header\"") {
            let h: HeaderLine = serde_json::from_str(&line).map_err(|e| TaskError::Jsonl {
                line: 1,
                message: e.to_string(),
            })?;
            header = Some(h.header);
            continue;
        }
        items.push(serde_json::from_str(&line).map_err(|e| TaskError::Jsonl {
            line: n + 1,
            message: e.to_string(),
        })?);
    }
    Ok((header, items))
}
