//! Dataset manifests: a JSON array of case objects whose relative paths
//! resolve against the manifest's own directory.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaseRecord {
    pub case_id: String,
    pub fixed_path: PathBuf,
    pub moving_path: PathBuf,
    pub fixed_landmarks_path: PathBuf,
    pub moving_landmarks_path: PathBuf,
    /// Known displacement field, present for synthetic cases.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub truth_field_path: Option<PathBuf>,
}

#[derive(Deserialize)]
struct RawRecord {
    case_id: Option<String>,
    fixed_path: Option<PathBuf>,
    moving_path: Option<PathBuf>,
    fixed_landmarks_path: Option<PathBuf>,
    moving_landmarks_path: Option<PathBuf>,
    #[serde(default)]
    truth_field_path: Option<PathBuf>,
}

fn manifest_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Manifest(msg.into()))
}

/// Parses manifest text, resolving relative paths against `base` and
/// checking that every referenced file exists.
pub fn parse_manifest(text: &str, base: &Path) -> Result<Vec<CaseRecord>> {
    let raw: Vec<serde_json::Value> =
        serde_json::from_str(text).map_err(|e| Error::Manifest(format!("manifest is not a JSON array: {e}")))?;
    let mut out: Vec<CaseRecord> = Vec::with_capacity(raw.len());
    for (i, value) in raw.into_iter().enumerate() {
        let r: RawRecord =
            serde_json::from_value(value).map_err(|e| Error::Manifest(format!("case #{i}: {e}")))?;
        let Some(case_id) = r.case_id else {
            return manifest_err(format!("case #{i}: missing field `case_id`"));
        };
        if out.iter().any(|c| c.case_id == case_id) {
            return manifest_err(format!("case {case_id}: duplicate case_id"));
        }
        let resolve = |p: Option<PathBuf>, field: &str| -> Result<PathBuf> {
            let Some(p) = p else {
                return manifest_err(format!("case {case_id}: missing field `{field}`"));
            };
            let full = if p.is_absolute() { p } else { base.join(p) };
            if !full.is_file() {
                return manifest_err(format!("case {case_id}: `{field}` does not resolve: {}", full.display()));
            }
            Ok(full)
        };
        out.push(CaseRecord {
            fixed_path: resolve(r.fixed_path, "fixed_path")?,
            moving_path: resolve(r.moving_path, "moving_path")?,
            fixed_landmarks_path: resolve(r.fixed_landmarks_path, "fixed_landmarks_path")?,
            moving_landmarks_path: resolve(r.moving_landmarks_path, "moving_landmarks_path")?,
            truth_field_path: match r.truth_field_path {
                Some(p) => Some(resolve(Some(p), "truth_field_path")?),
                None => None,
            },
            case_id,
        });
    }
    Ok(out)
}

pub fn load_manifest(path: &Path) -> Result<Vec<CaseRecord>> {
    let text = fs::read_to_string(path)?;
    let base = path.parent().unwrap_or(Path::new("."));
    parse_manifest(&text, base)
}

/// Writes records as pretty JSON, with paths stored exactly as given.
pub fn write_manifest(records: &[CaseRecord], path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(records).map_err(|e| Error::Manifest(e.to_string()))?;
    fs::write(path, text + "\n")?;
    Ok(())
}
