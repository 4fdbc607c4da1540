//! JSON Lines formats for generation requests and generated records.
//!
//! A request file holds one object per line:
//!
//! ```text
//! {"id": "r1", "class": "c0", "prompt": "A B"}
//! {"class": "c1", "prompt": "", "max_new_tokens": 8}
//! ```
//!
//! `class` is a class name of the guide (or of the model in direct mode),
//! `prompt` whitespace-separated token names. Blank lines and lines starting
//! with `#` are skipped.
//!
//! A generation file starts with one header object and then one record per
//! generation:
//!
//! ```text
//! {"kind":"header","format":"gedi-generations","version":1,"seed":3,"preset":"paper-default","config":{...},"models":{...}}
//! {"kind":"generation","id":"r1","class":"c0","prompt":["A","B"],"tokens":["A","A"],"stopped_at_eos":false,"cost":{...}}
//! ```

use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::decode::GenerationConfig;
use crate::error::{GediError, Result};
use crate::eval::CostReport;

pub const GENERATIONS_FORMAT: &str = "gedi-generations";
pub const GENERATIONS_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerationRequest {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<String>,
    pub class: String,
    #[serde(default)]
    pub prompt: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_new_tokens: Option<usize>,
}

pub fn read_requests<R: BufRead>(input: R) -> Result<Vec<GenerationRequest>> {
    let mut out = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let req = serde_json::from_str(trimmed).map_err(|e| GediError::parse(i + 1, e.to_string()))?;
        out.push(req);
    }
    if out.is_empty() {
        return Err(GediError::EmptyInput("request file has no requests"));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationsHeader {
    pub format: String,
    pub version: u32,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub preset: Option<String>,
    pub config: GenerationConfig,
    /// Model role to checkpoint path.
    pub models: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRecord {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<String>,
    pub class: String,
    pub prompt: Vec<String>,
    pub tokens: Vec<String>,
    pub stopped_at_eos: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cost: Option<CostReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
enum Line {
    Header(GenerationsHeader),
    Generation(GenerationRecord),
}

pub fn write_generations<W: Write>(header: &GenerationsHeader, records: &[GenerationRecord], mut out: W) -> Result<()> {
    let json = |line: &Line| serde_json::to_string(line).map_err(|e| GediError::InvalidConfig(e.to_string()));
    writeln!(out, "{}", json(&Line::Header(header.clone()))?)?;
    for r in records {
        writeln!(out, "{}", json(&Line::Generation(r.clone()))?)?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_generations<R: BufRead>(input: R) -> Result<(GenerationsHeader, Vec<GenerationRecord>)> {
    let mut header = None;
    let mut records = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: Line = serde_json::from_str(&line).map_err(|e| GediError::parse(i + 1, e.to_string()))?;
        match parsed {
            Line::Header(h) => {
                if header.is_some() {
                    return Err(GediError::parse(i + 1, "second header line"));
                }
                if h.format != GENERATIONS_FORMAT {
                    return Err(GediError::parse(i + 1, format!("unknown format `{}`", h.format)));
                }
                if h.version != GENERATIONS_VERSION {
                    return Err(GediError::Version {
                        found: h.version.to_string(),
                        expected: GENERATIONS_VERSION.to_string(),
                    });
                }
                header = Some(h);
            }
            Line::Generation(r) => {
                if header.is_none() {
                    return Err(GediError::parse(i + 1, "generation record before the header"));
                }
                records.push(r);
            }
        }
    }
    let header = header.ok_or_else(|| GediError::parse(1, "missing header line"))?;
    Ok((header, records))
}
