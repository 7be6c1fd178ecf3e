//! Versioned text checkpoints: a magic line followed by one JSON document.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use thiserror::Error;

pub const MAGIC: &str = "CDA-CKPT-1";
const MAGIC_PREFIX: &str = "CDA-CKPT-";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("CDA-CKPT-1 expected")]
    Magic,
    #[error("checkpoint version mismatch: file is {found}, this build reads {expected}")]
    Version { found: String, expected: String },
    #[error("checkpoint body: {0}")]
    Body(#[from] serde_json::Error),
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
}

pub fn to_string<T: Serialize>(value: &T) -> Result<String, CheckpointError> {
    let mut s = String::from(MAGIC);
    s.push('\n');
    s.push_str(&serde_json::to_string(value)?);
    s.push('\n');
    Ok(s)
}

pub fn from_str<T: DeserializeOwned>(text: &str) -> Result<T, CheckpointError> {
    let (head, body) = text.split_once('\n').unwrap_or((text, ""));
    let head = head.trim_end_matches('\r');
    if head != MAGIC {
        return Err(match head.strip_prefix(MAGIC_PREFIX) {
            Some(v) if !v.is_empty() => CheckpointError::Version {
                found: head.to_string(),
                expected: MAGIC.to_string(),
            },
            _ => CheckpointError::Magic,
        });
    }
    Ok(serde_json::from_str(body)?)
}

/// Writes through a temporary sibling so an interrupted save never leaves a
/// truncated checkpoint behind.
pub fn save<T: Serialize>(value: &T, path: &Path) -> Result<(), CheckpointError> {
    let text = to_string(value)?;
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(text.as_bytes())?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load<T: DeserializeOwned>(path: &Path) -> Result<T, CheckpointError> {
    from_str(&fs::read_to_string(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamStore;
    use crate::tensor::Tensor;

    #[test]
    fn round_trip_is_bit_exact() {
        let mut p = ParamStore::new();
        p.insert("a", Tensor::from_rows(&[vec![0.1, 1.0 / 3.0], vec![-2.5e-300, 7e21]]).unwrap());
        let back: ParamStore = from_str(&to_string(&p).unwrap()).unwrap();
        assert_eq!(back, p);
    }

    #[test]
    fn bad_magic_rejected() {
        let err = from_str::<ParamStore>("HELLO\n{}").unwrap_err();
        assert_eq!(err.to_string(), "CDA-CKPT-1 expected");
    }

    #[test]
    fn version_mismatch_names_both() {
        let err = from_str::<ParamStore>("CDA-CKPT-2\n{}").unwrap_err().to_string();
        assert!(err.contains("CDA-CKPT-2") && err.contains("CDA-CKPT-1"), "{err}");
    }
}
