//! Binary parameter checkpoints with JSON sidecar manifests.
//!
//! Payload layout: u64 LE parameter count followed by that many f64 LE values.
//! The sidecar (`<payload>.json`) records schema version, producing module,
//! training step, and whether the parameters are an EMA copy.

use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::SCHEMA_VERSION;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub module: String,
    pub step: usize,
    pub ema: bool,
    pub param_count: usize,
}

impl Manifest {
    pub fn new(module: &str, step: usize, ema: bool, param_count: usize) -> Self {
        Self { schema_version: SCHEMA_VERSION, module: module.into(), step, ema, param_count }
    }
}

pub fn manifest_path(payload: &Path) -> PathBuf {
    let mut name = payload.file_name().unwrap_or_default().to_os_string();
    name.push(".json");
    payload.with_file_name(name)
}

pub fn save_checkpoint(params: &[f64], manifest: &Manifest, path: &Path) -> Result<()> {
    if manifest.param_count != params.len() {
        return Err(Error::CheckpointMismatch {
            expected: format!("{} params", manifest.param_count),
            found: format!("{} params", params.len()),
        });
    }
    let mut buf = Vec::with_capacity(8 + 8 * params.len());
    buf.extend_from_slice(&(params.len() as u64).to_le_bytes());
    for &p in params {
        buf.extend_from_slice(&p.to_le_bytes());
    }
    let mut file = std::fs::File::create(path)?;
    file.write_all(&buf)?;
    file.flush()?;
    let sidecar = serde_json::to_string_pretty(manifest)?;
    std::fs::write(manifest_path(path), sidecar)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(Vec<f64>, Manifest)> {
    let manifest: Manifest = {
        let text = std::fs::read_to_string(manifest_path(path))?;
        serde_json::from_str(&text)?
    };
    if manifest.schema_version != SCHEMA_VERSION {
        return Err(Error::CheckpointMismatch {
            expected: format!("schema version {SCHEMA_VERSION}"),
            found: format!("schema version {}", manifest.schema_version),
        });
    }
    let mut file = std::fs::File::open(path)?;
    let mut header = [0u8; 8];
    file.read_exact(&mut header)?;
    let declared = u64::from_le_bytes(header) as usize;
    let mut body = Vec::new();
    file.read_to_end(&mut body)?;
    if body.len() != declared * 8 || declared != manifest.param_count {
        return Err(Error::CheckpointMismatch {
            expected: format!("{} params", manifest.param_count),
            found: format!("{} params in payload", body.len() / 8),
        });
    }
    let params = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((params, manifest))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_identical() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.bin");
        let params: Vec<f64> = (0..37).map(|i| (i as f64).sin() * 1e3).collect();
        let manifest = Manifest::new("student", 42, true, params.len());
        save_checkpoint(&params, &manifest, &path).unwrap();
        let (back, m) = load_checkpoint(&path).unwrap();
        assert_eq!(back, params);
        assert_eq!(m, manifest);
        assert_eq!(m.step, 42);
        assert!(m.ema);
    }

    #[test]
    fn truncated_payload_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.bin");
        let params = vec![1.0, 2.0, 3.0];
        save_checkpoint(&params, &Manifest::new("teacher", 0, false, 3), &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 8]).unwrap();
        let err = load_checkpoint(&path).unwrap_err();
        assert!(err.to_string().contains("3 params"), "{err}");
        assert!(err.to_string().contains("2 params"), "{err}");
    }

    #[test]
    fn manifest_count_mismatch_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.bin");
        let err = save_checkpoint(&[1.0, 2.0], &Manifest::new("teacher", 0, false, 5), &path)
            .unwrap_err();
        assert!(err.to_string().contains("5 params"), "{err}");
    }

    #[test]
    fn wrong_schema_version_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.bin");
        let params = vec![0.5];
        let mut manifest = Manifest::new("surrogate", 1, false, 1);
        save_checkpoint(&params, &manifest, &path).unwrap();
        manifest.schema_version = 99;
        std::fs::write(manifest_path(&path), serde_json::to_string(&manifest).unwrap()).unwrap();
        assert!(load_checkpoint(&path).is_err());
    }
}
