//! Versioned binary checkpoints.
//!
//! Layout: the magic `HBFLCKPT`, a little-endian `u32` format version, then
//! sections of `[u32 tag][u64 length][bytes]`. Section 1 holds the resolved
//! spec and section 2 the simulation state, both as JSON with exact float
//! round-tripping. Unknown sections are skipped. Random streams are not
//! stored: every stream is derived from the seed and the round index.

use std::path::Path;

use hbfl_core::runtime::SimulationState;

use crate::error::{CliError, Result};
use crate::experiment::write_atomic;
use crate::spec::ExperimentSpec;

pub const MAGIC: &[u8; 8] = b"HBFLCKPT";
pub const VERSION: u32 = 1;
const TAG_SPEC: u32 = 1;
const TAG_STATE: u32 = 2;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub spec: ExperimentSpec,
    pub state: SimulationState,
}

fn push_section(out: &mut Vec<u8>, tag: u32, body: &[u8]) {
    out.extend_from_slice(&tag.to_le_bytes());
    out.extend_from_slice(&(body.len() as u64).to_le_bytes());
    out.extend_from_slice(body);
}

pub fn encode(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    let mut out = MAGIC.to_vec();
    out.extend_from_slice(&VERSION.to_le_bytes());
    push_section(&mut out, TAG_SPEC, &serde_json::to_vec(&ckpt.spec)?);
    push_section(&mut out, TAG_STATE, &serde_json::to_vec(&ckpt.state)?);
    Ok(out)
}

pub fn decode(bytes: &[u8], path: &Path) -> Result<Checkpoint> {
    let bad = |m: &str| CliError::checkpoint(path, m);
    if bytes.len() < 12 || &bytes[..8] != MAGIC {
        return Err(bad("bad magic"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != VERSION {
        return Err(bad(&format!("unsupported version {version} (expected {VERSION})")));
    }
    let mut pos = 12;
    let (mut spec, mut state) = (None, None);
    while pos < bytes.len() {
        if bytes.len() - pos < 12 {
            return Err(bad("truncated section header"));
        }
        let tag = u32::from_le_bytes(bytes[pos..pos + 4].try_into().unwrap());
        let len = u64::from_le_bytes(bytes[pos + 4..pos + 12].try_into().unwrap()) as usize;
        pos += 12;
        if bytes.len() - pos < len {
            return Err(bad("truncated section"));
        }
        let body = &bytes[pos..pos + len];
        pos += len;
        match tag {
            TAG_SPEC => spec = Some(serde_json::from_slice::<ExperimentSpec>(body)?),
            TAG_STATE => state = Some(serde_json::from_slice::<SimulationState>(body)?),
            _ => {}
        }
    }
    match (spec, state) {
        (Some(spec), Some(state)) => Ok(Checkpoint { spec, state }),
        _ => Err(bad("missing spec or state section")),
    }
}

pub fn save(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    write_atomic(path, &encode(ckpt)?)
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
    decode(&bytes, path)
}
