//! HGRF frame-feature files and the JSON-lines feature manifest.
//!
//! Layout: `b"HGRF"`, version byte `1`, `u32` LE frame count `M`, `u32` LE
//! width `D_f`, then `M·D_f` LE `f32` values in row-major order.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;

pub const HGRF_MAGIC: &[u8; 4] = b"HGRF";
pub const HGRF_VERSION: u8 = 1;
const HEADER_LEN: usize = 4 + 1 + 4 + 4;

#[derive(Debug, thiserror::Error)]
pub enum FeatureError {
    #[error("{path}: bad magic {found:?}, expected \"HGRF\"")]
    BadMagic { path: String, found: Vec<u8> },
    #[error("{path}: unsupported version {found}, expected {HGRF_VERSION}")]
    BadVersion { path: String, found: u8 },
    #[error("{path}: expected {expected} bytes for the declared shape, found {found}")]
    Length {
        path: String,
        expected: usize,
        found: usize,
    },
    #[error("{path}: feature matrix has no frames")]
    NoFrames { path: String },
    #[error("{path}: non-finite value at frame {frame}, column {col}")]
    NonFinite {
        path: String,
        frame: usize,
        col: usize,
    },
    #[error("{path}:{line}: {msg}")]
    Manifest {
        path: String,
        line: usize,
        msg: String,
    },
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> FeatureError + '_ {
    move |source| FeatureError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Encodes an `[M × D_f]` matrix.
pub fn encode_hgrf(frames: &Tensor<f32>) -> Vec<u8> {
    let (m, d) = frames.dims2().expect("frame features are a matrix");
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * m * d);
    out.extend_from_slice(HGRF_MAGIC);
    out.push(HGRF_VERSION);
    out.extend_from_slice(&(m as u32).to_le_bytes());
    out.extend_from_slice(&(d as u32).to_le_bytes());
    for v in frames.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// Header fields `(M, D_f)` after checking magic, version and total length.
pub fn decode_hgrf_header(bytes: &[u8], path: &str) -> Result<(usize, usize), FeatureError> {
    if bytes.len() < 4 || &bytes[..4] != HGRF_MAGIC {
        return Err(FeatureError::BadMagic {
            path: path.into(),
            found: bytes[..bytes.len().min(4)].to_vec(),
        });
    }
    if bytes.len() < HEADER_LEN {
        return Err(FeatureError::Length {
            path: path.into(),
            expected: HEADER_LEN,
            found: bytes.len(),
        });
    }
    if bytes[4] != HGRF_VERSION {
        return Err(FeatureError::BadVersion {
            path: path.into(),
            found: bytes[4],
        });
    }
    let u32_at =
        |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes")) as usize;
    let (m, d) = (u32_at(5), u32_at(9));
    let expected = HEADER_LEN + 4 * m * d;
    if bytes.len() != expected {
        return Err(FeatureError::Length {
            path: path.into(),
            expected,
            found: bytes.len(),
        });
    }
    if m == 0 {
        return Err(FeatureError::NoFrames { path: path.into() });
    }
    Ok((m, d))
}

pub fn decode_hgrf(bytes: &[u8], path: &str) -> Result<Tensor<f32>, FeatureError> {
    let (m, d) = decode_hgrf_header(bytes, path)?;
    let data: Vec<f32> = bytes[HEADER_LEN..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    if let Some(i) = data.iter().position(|v| !v.is_finite()) {
        return Err(FeatureError::NonFinite {
            path: path.into(),
            frame: i / d.max(1),
            col: i % d.max(1),
        });
    }
    Ok(Tensor::new(vec![m, d], data))
}

pub fn write_hgrf(path: &Path, frames: &Tensor<f32>) -> Result<(), FeatureError> {
    fs::write(path, encode_hgrf(frames)).map_err(io_err(path))
}

pub fn read_hgrf(path: &Path) -> Result<Tensor<f32>, FeatureError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    decode_hgrf(&bytes, &path.display().to_string())
}

/// One manifest line.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub video_id: String,
    /// Relative paths resolve against the manifest's directory.
    pub path: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source: Option<String>,
}

impl ManifestEntry {
    pub fn resolve(&self, manifest_dir: &Path) -> PathBuf {
        let p = Path::new(&self.path);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            manifest_dir.join(p)
        }
    }
}

pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<(), FeatureError> {
    let mut f = fs::File::create(path).map_err(io_err(path))?;
    for e in entries {
        let line = serde_json::to_string(e).expect("manifest entry serializes");
        writeln!(f, "{line}").map_err(io_err(path))?;
    }
    Ok(())
}

/// Parses every line; reports all malformed lines and duplicate ids at once.
pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>, Vec<FeatureError>> {
    let shown = path.display().to_string();
    let file = fs::File::open(path).map_err(|e| vec![io_err(path)(e)])?;
    let mut entries = Vec::new();
    let mut errors = Vec::new();
    let mut seen = std::collections::HashMap::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| vec![io_err(path)(e)])?;
        if line.trim().is_empty() {
            continue;
        }
        let err = |msg: String| FeatureError::Manifest {
            path: shown.clone(),
            line: i + 1,
            msg,
        };
        match serde_json::from_str::<ManifestEntry>(&line) {
            Ok(e) => {
                if let Some(first) = seen.insert(e.video_id.clone(), i + 1) {
                    errors.push(err(format!(
                        "video `{}` already listed on line {first}",
                        e.video_id
                    )));
                } else {
                    entries.push(e);
                }
            }
            Err(e) => errors.push(err(e.to_string())),
        }
    }
    if errors.is_empty() {
        Ok(entries)
    } else {
        Err(errors)
    }
}
