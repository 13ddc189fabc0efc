//! Checkpoint directories: a flat little-endian f32 weight blob plus a
//! `meta.json` describing what the weights are and where they came from.
//!
//! The sha256 of the weight blob is the model fingerprint; samplers and
//! evaluators compare fingerprints instead of trusting paths.

use std::fs::File;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use byteorder::{ByteOrder, LittleEndian};
use serde::{de::DeserializeOwned, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("meta.json: {0}")]
    Meta(#[from] serde_json::Error),
    #[error("weight blob has {len} bytes, not a multiple of 4")]
    RaggedBlob { len: usize },
    #[error("fingerprint mismatch in {dir}: meta says {expected}, blob hashes to {actual}")]
    FingerprintMismatch { dir: String, expected: String, actual: String },
}

fn io_err(path: &Path, source: std::io::Error) -> CheckpointError {
    CheckpointError::Io { path: path.display().to_string(), source }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(bytes);
    let digest = h.finalize();
    let mut out = String::with_capacity(64);
    for b in digest {
        out.push_str(&format!("{b:02x}"));
    }
    out
}

pub fn sha256_file(path: &Path) -> Result<String, CheckpointError> {
    let mut f = File::open(path).map_err(|e| io_err(path, e))?;
    let mut h = Sha256::new();
    let mut buf = [0u8; 65536];
    loop {
        let n = f.read(&mut buf).map_err(|e| io_err(path, e))?;
        if n == 0 {
            break;
        }
        h.update(&buf[..n]);
    }
    let digest = h.finalize();
    let mut out = String::with_capacity(64);
    for b in digest {
        out.push_str(&format!("{b:02x}"));
    }
    Ok(out)
}

/// Canonical-form JSON hash: serde_json with sorted maps would be needed
/// for arbitrary values; here metas are plain structs whose field order is
/// fixed by declaration, so hashing the serialized string is stable.
pub fn sha256_json<T: Serialize>(value: &T) -> Result<String, CheckpointError> {
    Ok(sha256_hex(serde_json::to_string(value)?.as_bytes()))
}

#[derive(Debug, Clone)]
pub struct CheckpointDir {
    pub dir: PathBuf,
}

impl CheckpointDir {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }

    pub fn weights_path(&self) -> PathBuf {
        self.dir.join("weights.f32le")
    }

    pub fn meta_path(&self) -> PathBuf {
        self.dir.join("meta.json")
    }

    /// Writes weights + meta. `augment` receives the blob fingerprint so
    /// the meta can embed it before serialization.
    pub fn save<M: Serialize>(
        &self,
        weights: &[f32],
        meta: impl FnOnce(String) -> M,
    ) -> Result<String, CheckpointError> {
        std::fs::create_dir_all(&self.dir).map_err(|e| io_err(&self.dir, e))?;
        let mut bytes = vec![0u8; weights.len() * 4];
        LittleEndian::write_f32_into(weights, &mut bytes);
        let fingerprint = sha256_hex(&bytes);
        let wp = self.weights_path();
        File::create(&wp)
            .map_err(|e| io_err(&wp, e))?
            .write_all(&bytes)
            .map_err(|e| io_err(&wp, e))?;
        let meta = meta(fingerprint.clone());
        let mp = self.meta_path();
        let json = serde_json::to_string_pretty(&meta)?;
        std::fs::write(&mp, json).map_err(|e| io_err(&mp, e))?;
        Ok(fingerprint)
    }

    /// Loads the blob and meta, verifying the fingerprint recorded by
    /// `extract_fp` against the blob hash.
    pub fn load<M: DeserializeOwned>(
        &self,
        extract_fp: impl FnOnce(&M) -> &str,
    ) -> Result<(Vec<f32>, M), CheckpointError> {
        let wp = self.weights_path();
        let mut bytes = Vec::new();
        File::open(&wp)
            .map_err(|e| io_err(&wp, e))?
            .read_to_end(&mut bytes)
            .map_err(|e| io_err(&wp, e))?;
        if bytes.len() % 4 != 0 {
            return Err(CheckpointError::RaggedBlob { len: bytes.len() });
        }
        let mp = self.meta_path();
        let meta_str = std::fs::read_to_string(&mp).map_err(|e| io_err(&mp, e))?;
        let meta: M = serde_json::from_str(&meta_str)?;
        let actual = sha256_hex(&bytes);
        let expected = extract_fp(&meta);
        if expected != actual {
            return Err(CheckpointError::FingerprintMismatch {
                dir: self.dir.display().to_string(),
                expected: expected.to_string(),
                actual,
            });
        }
        let mut weights = vec![0.0f32; bytes.len() / 4];
        LittleEndian::read_f32_into(&bytes, &mut weights);
        Ok((weights, meta))
    }
}

/// Reads only the meta.json of a checkpoint dir (no blob verification).
pub fn read_meta<M: DeserializeOwned>(dir: &Path) -> Result<M, CheckpointError> {
    let mp = dir.join("meta.json");
    let meta_str = std::fs::read_to_string(&mp).map_err(|e| io_err(&mp, e))?;
    Ok(serde_json::from_str(&meta_str)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde::Deserialize;

    #[derive(Debug, Clone, Serialize, Deserialize)]
    struct ProbeMeta {
        kind: String,
        fingerprint: String,
    }

    #[test]
    fn save_load_verifies_fingerprint() {
        let dir = tempfile::tempdir().unwrap();
        let ckpt = CheckpointDir::new(dir.path().join("model"));
        let weights = vec![0.5f32, -1.25, 3.0];
        let fp = ckpt
            .save(&weights, |fingerprint| ProbeMeta { kind: "probe".into(), fingerprint })
            .unwrap();
        let (back, meta) =
            ckpt.load(|m: &ProbeMeta| m.fingerprint.as_str()).unwrap();
        assert_eq!(back, weights);
        assert_eq!(meta.fingerprint, fp);
    }

    #[test]
    fn tampered_blob_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let ckpt = CheckpointDir::new(dir.path().join("model"));
        ckpt.save(&[1.0f32, 2.0], |fingerprint| ProbeMeta { kind: "probe".into(), fingerprint })
            .unwrap();
        let mut bytes = std::fs::read(ckpt.weights_path()).unwrap();
        bytes[0] ^= 0xff;
        std::fs::write(ckpt.weights_path(), &bytes).unwrap();
        match ckpt.load::<ProbeMeta>(|m| m.fingerprint.as_str()) {
            Err(CheckpointError::FingerprintMismatch { .. }) => {}
            other => panic!("expected fingerprint mismatch, got {other:?}"),
        }
    }

    #[test]
    fn sha256_known_vector() {
        // sha256("abc") from FIPS 180-2.
        assert_eq!(
            sha256_hex(b"abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }
}
