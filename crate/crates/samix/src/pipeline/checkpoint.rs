//! Binary checkpoint container for named f64 tensors.
//!
//! Layout, all little-endian:
//!   magic bytes `SMXCKPT1`, format version u32, then one record per
//!   tensor: name_len u32, name UTF-8, ndim u32, dims u32 each, data f64
//!   each. Records run to end of file. Round trips are bit-exact.

use std::path::Path;

use crate::mixer::StateError;

pub const MAGIC: &[u8; 8] = b"SMXCKPT1";
pub const VERSION: u32 = 1;

#[derive(Debug)]
pub enum CheckpointError {
    Io(std::io::Error),
    BadMagic { found: Vec<u8> },
    VersionMismatch { found: u32, expected: u32 },
    Truncated { offset: usize },
    BadName { offset: usize },
    State(StateError),
}

impl std::fmt::Display for CheckpointError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CheckpointError::Io(e) => write!(f, "i/o error: {e}"),
            CheckpointError::BadMagic { found } => {
                write!(f, "bad magic {:?}, expected {:?}", found, MAGIC)
            }
            CheckpointError::VersionMismatch { found, expected } => {
                write!(f, "format version {found}, this build reads {expected}")
            }
            CheckpointError::Truncated { offset } => {
                write!(f, "file truncated at byte {offset}")
            }
            CheckpointError::BadName { offset } => {
                write!(f, "tensor name at byte {offset} is not UTF-8")
            }
            CheckpointError::State(e) => write!(f, "{e}"),
        }
    }
}

impl std::error::Error for CheckpointError {}

impl From<std::io::Error> for CheckpointError {
    fn from(e: std::io::Error) -> Self {
        CheckpointError::Io(e)
    }
}

impl From<StateError> for CheckpointError {
    fn from(e: StateError) -> Self {
        CheckpointError::State(e)
    }
}

pub type StateTable = Vec<(String, Vec<usize>, Vec<f64>)>;

/// Serialize a state table; the write is atomic (temp file then rename).
pub fn save_state_table(path: &Path, entries: &StateTable) -> Result<(), CheckpointError> {
    let mut bytes = Vec::new();
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&VERSION.to_le_bytes());
    for (name, shape, data) in entries {
        let numel: usize = shape.iter().product();
        assert_eq!(
            numel,
            data.len(),
            "checkpoint: tensor `{name}` shape {shape:?} does not match {} values",
            data.len()
        );
        bytes.extend_from_slice(&(name.len() as u32).to_le_bytes());
        bytes.extend_from_slice(name.as_bytes());
        bytes.extend_from_slice(&(shape.len() as u32).to_le_bytes());
        for d in shape {
            bytes.extend_from_slice(&(*d as u32).to_le_bytes());
        }
        for v in data {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    let tmp = path.with_extension("tmp-write");
    std::fs::write(&tmp, &bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_state_table(path: &Path) -> Result<StateTable, CheckpointError> {
    let bytes = std::fs::read(path)?;
    let mut pos = 0usize;
    let take = |pos: &mut usize, n: usize| -> Result<&[u8], CheckpointError> {
        if *pos + n > bytes.len() {
            return Err(CheckpointError::Truncated { offset: *pos });
        }
        let slice = &bytes[*pos..*pos + n];
        *pos += n;
        Ok(slice)
    };

    let magic = take(&mut pos, 8)?;
    if magic != MAGIC {
        return Err(CheckpointError::BadMagic {
            found: magic.to_vec(),
        });
    }
    let version = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap());
    if version != VERSION {
        return Err(CheckpointError::VersionMismatch {
            found: version,
            expected: VERSION,
        });
    }

    let mut entries = Vec::new();
    while pos < bytes.len() {
        let name_offset = pos;
        let name_len = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
        let name = std::str::from_utf8(take(&mut pos, name_len)?)
            .map_err(|_| CheckpointError::BadName {
                offset: name_offset,
            })?
            .to_string();
        let ndim = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize);
        }
        let numel: usize = shape.iter().product();
        let raw = take(&mut pos, numel * 8)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        entries.push((name, shape, data));
    }
    Ok(entries)
}
