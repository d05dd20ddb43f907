//! Line-delimited JSON manifests.
//!
//! Image paths are stored relative to the directory holding the manifest.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::emotion::EmotionLabel;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SubsetTag {
    #[serde(rename = "EPAS")]
    Annotated,
    #[serde(rename = "EPGS")]
    Generated,
}

/// One curated training pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairRecord {
    pub source_path: PathBuf,
    pub target_path: PathBuf,
    pub source_emotion: EmotionLabel,
    pub target_emotion: EmotionLabel,
    pub instruction: String,
    pub subset_tag: SubsetTag,
    pub provenance: String,
}

/// A single image with its class label (predictor corpora, editing sources).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledImage {
    pub path: PathBuf,
    pub emotion: EmotionLabel,
}

/// An edit pair without emotion labels, as consumed by annotation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditPair {
    pub source_path: PathBuf,
    pub target_path: PathBuf,
    pub instruction: String,
}

/// Records whose fields reference image files.
pub trait ImageRefs {
    fn image_paths(&self) -> Vec<&Path>;
    fn check(&self) -> std::result::Result<(), String> {
        Ok(())
    }
}

impl ImageRefs for PairRecord {
    fn image_paths(&self) -> Vec<&Path> {
        vec![&self.source_path, &self.target_path]
    }
    fn check(&self) -> std::result::Result<(), String> {
        if self.instruction.trim().is_empty() {
            Err("instruction is empty".into())
        } else {
            Ok(())
        }
    }
}

impl ImageRefs for LabeledImage {
    fn image_paths(&self) -> Vec<&Path> {
        vec![&self.path]
    }
}

impl ImageRefs for EditPair {
    fn image_paths(&self) -> Vec<&Path> {
        vec![&self.source_path, &self.target_path]
    }
}

pub fn manifest_base(path: &Path) -> PathBuf {
    path.parent()
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."))
}

/// Writes one JSON record per line. The file is replaced atomically.
pub fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<usize> {
    let mut body = Vec::new();
    for r in records {
        serde_json::to_writer(&mut body, r)?;
        body.push(b'\n');
    }
    write_atomic(path, &body)?;
    Ok(records.len())
}

/// Writes through a temporary file in the same directory, then renames.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    let tmp = path.with_extension("tmp-write");
    {
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Parses a JSON-lines file; blank lines are skipped and errors name the
/// 1-based line number.
pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg: e.to_string(),
        })?;
        out.push(rec);
    }
    Ok(out)
}

/// Reads a manifest and checks every record's invariants and image refs.
pub fn read_validated<T: DeserializeOwned + ImageRefs + std::fmt::Debug>(path: &Path) -> Result<Vec<T>> {
    let records: Vec<T> = read_jsonl(path)?;
    let base = manifest_base(path);
    for (i, r) in records.iter().enumerate() {
        if let Err(msg) = r.check() {
            return Err(Error::Validation(format!("record {} {:?}: {msg}", i + 1, r)));
        }
        for p in r.image_paths() {
            if !base.join(p).is_file() {
                return Err(Error::Validation(format!(
                    "record {} {:?}: image {} does not exist",
                    i + 1,
                    r,
                    base.join(p).display()
                )));
            }
        }
    }
    Ok(records)
}

pub fn manifest_write(path: &Path, records: &[PairRecord]) -> Result<usize> {
    write_jsonl(path, records)
}

pub fn manifest_read(path: &Path) -> Result<Vec<PairRecord>> {
    read_validated(path)
}
