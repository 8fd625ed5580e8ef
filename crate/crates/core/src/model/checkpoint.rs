//! Binary checkpoint format.
//!
//! ```text
//! magic   b"SCOPECKP" | u32 version
//! section u64 byte length | header JSON {config, role}
//! section u64 byte length | u16 name length | name | u8 rank | u64 dims.. | f64 LE values
//! ...     one tensor section per layout entry, in layout order
//! ```
//! All integers are little-endian.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{layout, ModelConfig, ModelError, Parameters};

const MAGIC: &[u8; 8] = b"SCOPECKP";
const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Pretrained,
    Sft,
    Scope,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: Parameters,
    pub role: Role,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    role: Role,
}

fn write_section(w: &mut impl Write, payload: &[u8]) -> std::io::Result<()> {
    w.write_all(&(payload.len() as u64).to_le_bytes())?;
    w.write_all(payload)
}

fn read_section(r: &mut impl Read) -> Result<Vec<u8>, ModelError> {
    let mut len = [0u8; 8];
    r.read_exact(&mut len)?;
    let len = u64::from_le_bytes(len);
    if len > (1 << 34) {
        return Err(ModelError::Format(format!("section of {len} bytes")));
    }
    let mut buf = vec![0u8; len as usize];
    r.read_exact(&mut buf)?;
    Ok(buf)
}

pub fn save_checkpoint(params: &Parameters, role: Role, path: impl AsRef<Path>) -> Result<(), ModelError> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    let header = serde_json::to_vec(&Header { config: params.config().clone(), role })
        .map_err(|e| ModelError::Format(e.to_string()))?;
    write_section(&mut w, &header)?;
    for spec in params.specs() {
        let mut buf = Vec::with_capacity(16 + spec.name.len() + 8 * spec.len());
        buf.extend_from_slice(&(spec.name.len() as u16).to_le_bytes());
        buf.extend_from_slice(spec.name.as_bytes());
        buf.push(spec.shape.len() as u8);
        for &dim in &spec.shape {
            buf.extend_from_slice(&(dim as u64).to_le_bytes());
        }
        for v in &params.as_slice()[spec.range()] {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        write_section(&mut w, &buf)?;
    }
    w.flush()?;
    Ok(())
}

fn take<'a>(buf: &mut &'a [u8], n: usize) -> Result<&'a [u8], ModelError> {
    if buf.len() < n {
        return Err(ModelError::Format("truncated tensor section".into()));
    }
    let (head, rest) = buf.split_at(n);
    *buf = rest;
    Ok(head)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint, ModelError> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(ModelError::Format("bad magic".into()));
    }
    let mut ver = [0u8; 4];
    r.read_exact(&mut ver)?;
    if u32::from_le_bytes(ver) != VERSION {
        return Err(ModelError::Format(format!("unsupported version {}", u32::from_le_bytes(ver))));
    }
    let header: Header =
        serde_json::from_slice(&read_section(&mut r)?).map_err(|e| ModelError::Format(e.to_string()))?;
    header.config.validate()?;
    let specs = layout(&header.config);
    let mut data = Vec::with_capacity(specs.last().map(|s| s.offset + s.len()).unwrap_or(0));
    for spec in &specs {
        let section = read_section(&mut r)?;
        let mut buf = section.as_slice();
        let name_len = u16::from_le_bytes(take(&mut buf, 2)?.try_into().unwrap()) as usize;
        let name = std::str::from_utf8(take(&mut buf, name_len)?).map_err(|e| ModelError::Format(e.to_string()))?;
        let rank = take(&mut buf, 1)?[0] as usize;
        let shape: Vec<usize> = (0..rank)
            .map(|_| take(&mut buf, 8).map(|b| u64::from_le_bytes(b.try_into().unwrap()) as usize))
            .collect::<Result<_, _>>()?;
        if name != spec.name || shape != spec.shape {
            return Err(ModelError::ConfigMismatch(format!(
                "tensor `{name}` {shape:?} where layout expects `{}` {:?}",
                spec.name, spec.shape
            )));
        }
        if buf.len() != 8 * spec.len() {
            return Err(ModelError::Format(format!("tensor `{name}` has {} payload bytes", buf.len())));
        }
        data.extend(buf.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())));
    }
    let mut rest = Vec::new();
    r.read_to_end(&mut rest)?;
    if !rest.is_empty() {
        return Err(ModelError::Format(format!("{} trailing bytes", rest.len())));
    }
    Ok(Checkpoint { params: Parameters::from_vec(&header.config, data)?, role: header.role })
}

/// Loads a checkpoint and checks that its architecture matches `expected`.
pub fn load_checkpoint_for(path: impl AsRef<Path>, expected: &ModelConfig) -> Result<Checkpoint, ModelError> {
    let ck = load_checkpoint(path)?;
    if !ck.params.config().same_shape(expected) {
        return Err(ModelError::ConfigMismatch(format!(
            "checkpoint has {:?}, expected {:?}",
            ck.params.config(),
            expected
        )));
    }
    Ok(ck)
}
