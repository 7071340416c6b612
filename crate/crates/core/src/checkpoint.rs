//! Checkpoint files: an 8-byte magic, a little-endian `u64` header length,
//! a JSON header, then every persisted array of every member network as
//! little-endian `f32` in declaration order.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{Model, ModelSpec, Predictor};
use crate::preprocess::FilterConfig;
use crate::psr::PsrConfig;

const MAGIC: &[u8; 8] = b"PSRTRCK1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub model: ModelSpec,
    pub name: String,
    pub ensemble: bool,
    pub members: usize,
    /// Length of each persisted array of one member, in order.
    pub arrays: Vec<usize>,
    pub psr: PsrConfig,
    pub filter: FilterConfig,
    /// Free-form training provenance (config, hash, seed, best epoch, ...).
    pub training: serde_json::Value,
    pub version: String,
}

pub fn save(path: &Path, predictor: &Predictor, psr: &PsrConfig, filter: &FilterConfig, training: serde_json::Value) -> Result<()> {
    let members = predictor.members();
    let header = CheckpointHeader {
        model: predictor.spec(),
        name: predictor.name(),
        ensemble: matches!(predictor, Predictor::Ensemble(_)),
        members: members.len(),
        arrays: members[0].net.state().iter().map(|a| a.len()).collect(),
        psr: *psr,
        filter: filter.clone(),
        training,
        version: env!("CARGO_PKG_VERSION").to_string(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    out.write_all(MAGIC)?;
    out.write_all(&(json.len() as u64).to_le_bytes())?;
    out.write_all(&json)?;
    for m in members {
        for array in m.net.state() {
            for v in array {
                out.write_all(&v.to_le_bytes())?;
            }
        }
    }
    out.flush()?;
    Ok(())
}

pub fn read_header(path: &Path) -> Result<CheckpointHeader> {
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    read_header_from(&mut f)
}

fn read_header_from(f: &mut impl Read) -> Result<CheckpointHeader> {
    let mut magic = [0u8; 8];
    f.read_exact(&mut magic)
        .map_err(|_| Error::Checkpoint("file too short".into()))?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
    }
    let mut len = [0u8; 8];
    f.read_exact(&mut len)?;
    let len = u64::from_le_bytes(len) as usize;
    let mut json = vec![0u8; len];
    f.read_exact(&mut json)
        .map_err(|_| Error::Checkpoint("truncated header".into()))?;
    Ok(serde_json::from_slice(&json)?)
}

pub fn load(path: &Path) -> Result<(Predictor, CheckpointHeader)> {
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    let header = read_header_from(&mut f)?;
    if header.members == 0 {
        return Err(Error::Checkpoint("no member networks".into()));
    }
    let mut models = Vec::with_capacity(header.members);
    let mut buf = [0u8; 4];
    for k in 0..header.members {
        let mut model = Model::new(header.model, 0)?;
        let mut state = model.net.state_mut();
        let lens: Vec<usize> = state.iter().map(|a| a.len()).collect();
        if lens != header.arrays {
            return Err(Error::Checkpoint(format!(
                "array layout of {} does not match the header",
                header.model.name()
            )));
        }
        for array in state.iter_mut() {
            for v in array.iter_mut() {
                f.read_exact(&mut buf)
                    .map_err(|_| Error::Checkpoint(format!("parameters of member {k} truncated")))?;
                *v = f32::from_le_bytes(buf);
            }
        }
        models.push(model);
    }
    if f.read(&mut buf)? != 0 {
        return Err(Error::Checkpoint("trailing bytes after parameters".into()));
    }
    let predictor = if header.ensemble {
        Predictor::Ensemble(models)
    } else {
        Predictor::Single(models.pop().expect("one member"))
    };
    Ok((predictor, header))
}
