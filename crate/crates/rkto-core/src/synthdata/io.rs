//! Dataset file format: newline-delimited JSON records, one example per
//! line, plus a sibling manifest file. Reads reject unknown fields, verify
//! the format version, and cross-check manifest counts against the records.

use super::{DataError, DatasetManifest, PreferenceExample, DATASET_FORMAT_VERSION};
use std::path::{Path, PathBuf};

/// Manifest path for a dataset path: same directory and stem with a
/// `.manifest.json` suffix.
pub fn manifest_path_for(dataset_path: &Path) -> PathBuf {
    let stem = dataset_path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "dataset".to_string());
    dataset_path.with_file_name(format!("{stem}.manifest.json"))
}

pub fn write_dataset(
    examples: &[PreferenceExample],
    manifest: &DatasetManifest,
    dataset_path: &Path,
) -> Result<(), DataError> {
    if manifest.total != examples.len() {
        return Err(DataError::Consistency(format!(
            "manifest total {} does not match {} examples",
            manifest.total,
            examples.len()
        )));
    }
    let mut body = String::new();
    for ex in examples {
        let line = serde_json::to_string(ex)
            .map_err(|e| DataError::Format(format!("serialize example {}: {e}", ex.id)))?;
        body.push_str(&line);
        body.push('\n');
    }
    std::fs::write(dataset_path, body)?;
    let manifest_json = serde_json::to_string_pretty(manifest)
        .map_err(|e| DataError::Format(format!("serialize manifest: {e}")))?;
    std::fs::write(manifest_path_for(dataset_path), manifest_json)?;
    Ok(())
}

pub fn read_dataset(
    dataset_path: &Path,
) -> Result<(Vec<PreferenceExample>, DatasetManifest), DataError> {
    let manifest_path = manifest_path_for(dataset_path);
    let manifest_text = std::fs::read_to_string(&manifest_path)?;
    let manifest: DatasetManifest = serde_json::from_str(&manifest_text)
        .map_err(|e| DataError::Format(format!("parse manifest: {e}")))?;
    if manifest.format_version != DATASET_FORMAT_VERSION {
        return Err(DataError::Format(format!(
            "dataset format version {} not supported (expected {})",
            manifest.format_version, DATASET_FORMAT_VERSION
        )));
    }
    let text = std::fs::read_to_string(dataset_path)?;
    let mut examples = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let ex: PreferenceExample =
            serde_json::from_str(line).map_err(|e| DataError::Parse {
                line: i + 1,
                message: e.to_string(),
            })?;
        examples.push(ex);
    }
    if examples.len() != manifest.total {
        return Err(DataError::Consistency(format!(
            "manifest total {} but {} records on disk",
            manifest.total,
            examples.len()
        )));
    }
    for (name, count) in &manifest.counts {
        let actual = examples.iter().filter(|e| &e.category == name).count();
        if actual != *count {
            return Err(DataError::Consistency(format!(
                "category {name}: manifest says {count}, found {actual}"
            )));
        }
    }
    Ok((examples, manifest))
}
