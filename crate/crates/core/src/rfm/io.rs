//! Versioned JSON probe files.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::probe::ConceptProbe;
use crate::error::{Error, Result};

pub const PROBE_FORMAT: &str = "rfmsteer-probe";
pub const PROBE_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct ProbeFile {
    format: String,
    version: u32,
    probe: ConceptProbe,
}

pub fn probe_to_json(probe: &ConceptProbe) -> Result<String> {
    let file = ProbeFile {
        format: PROBE_FORMAT.into(),
        version: PROBE_VERSION,
        probe: probe.clone(),
    };
    Ok(serde_json::to_string(&file)?)
}

pub fn probe_from_json(text: &str) -> Result<ConceptProbe> {
    let file: ProbeFile = serde_json::from_str(text)?;
    if file.format != PROBE_FORMAT {
        return Err(Error::Format(format!("unexpected format tag {:?}", file.format)));
    }
    if file.version != PROBE_VERSION {
        return Err(Error::Format(format!(
            "probe file version {} is not supported (expected {PROBE_VERSION})",
            file.version
        )));
    }
    Ok(file.probe)
}

pub fn save_probe(probe: &ConceptProbe, path: &Path) -> Result<()> {
    fs::write(path, probe_to_json(probe)?)?;
    Ok(())
}

pub fn load_probe(path: &Path) -> Result<ConceptProbe> {
    probe_from_json(&fs::read_to_string(path)?)
}
