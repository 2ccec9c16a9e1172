//! Source dataset listings.
//!
//! Two inputs are accepted:
//!
//! * a JSON file `{"entries": [{"image_id", "image_path", "class"}, ...]}`,
//!   with `image_path` relative to the file's directory unless absolute;
//! * a directory laid out as `<root>/<class>/<image>`, where the directory name
//!   is the fine class name and the file stem is the image id.
//!
//! Either way every class is resolved through a [`SuperclassTable`].

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::OrchestratorError;
use crate::isolation::{IsolationError, SuperclassTable};
use crate::raster::ClassLabel;

const IMAGE_EXTENSIONS: [&str; 4] = ["png", "jpg", "jpeg", "PNG"];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetEntry {
    pub image_id: String,
    pub image_path: PathBuf,
    pub label: ClassLabel,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct DatasetManifest {
    pub entries: Vec<DatasetEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawDataset {
    entries: Vec<RawEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawEntry {
    image_id: String,
    image_path: String,
    class: String,
}

fn resolve(table: &SuperclassTable, class: &str) -> Result<ClassLabel, OrchestratorError> {
    table.resolve(class).map_err(|e| match e {
        IsolationError::UnknownClass(class) => OrchestratorError::UnresolvableSuperclass(class),
        other => OrchestratorError::BadDataset(other.to_string()),
    })
}

fn io_error(path: &Path, e: impl std::fmt::Display) -> OrchestratorError {
    OrchestratorError::DatasetIo {
        path: path.display().to_string(),
        detail: e.to_string(),
    }
}

impl DatasetManifest {
    pub fn from_json_file(path: &Path, table: &SuperclassTable) -> Result<Self, OrchestratorError> {
        let text = std::fs::read_to_string(path).map_err(|e| io_error(path, e))?;
        let raw: RawDataset = serde_json::from_str(&text)
            .map_err(|e| OrchestratorError::BadDataset(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let entries = raw
            .entries
            .into_iter()
            .map(|e| {
                Ok(DatasetEntry {
                    label: resolve(table, &e.class)?,
                    image_path: base.join(&e.image_path),
                    image_id: e.image_id,
                })
            })
            .collect::<Result<_, OrchestratorError>>()?;
        Ok(Self { entries })
    }

    pub fn scan_dir(root: &Path, table: &SuperclassTable) -> Result<Self, OrchestratorError> {
        let mut entries = Vec::new();
        let mut class_dirs: Vec<PathBuf> = std::fs::read_dir(root)
            .map_err(|e| io_error(root, e))?
            .filter_map(|d| d.ok().map(|d| d.path()))
            .filter(|p| p.is_dir())
            .collect();
        class_dirs.sort();
        for dir in class_dirs {
            let class = dir
                .file_name()
                .and_then(|n| n.to_str())
                .unwrap_or_default()
                .to_owned();
            let label = resolve(table, &class)?;
            let mut files: Vec<PathBuf> = std::fs::read_dir(&dir)
                .map_err(|e| io_error(&dir, e))?
                .filter_map(|d| d.ok().map(|d| d.path()))
                .filter(|p| {
                    p.is_file()
                        && p.extension()
                            .and_then(|x| x.to_str())
                            .is_some_and(|x| IMAGE_EXTENSIONS.contains(&x))
                })
                .collect();
            files.sort();
            for file in files {
                let image_id = file
                    .file_stem()
                    .and_then(|s| s.to_str())
                    .unwrap_or_default()
                    .to_owned();
                entries.push(DatasetEntry {
                    image_id,
                    image_path: file,
                    label: label.clone(),
                });
            }
        }
        Ok(Self { entries })
    }

    /// JSON file if `path` is a file, directory scan otherwise.
    pub fn load(path: &Path, table: &SuperclassTable) -> Result<Self, OrchestratorError> {
        if path.is_dir() {
            Self::scan_dir(path, table)
        } else {
            Self::from_json_file(path, table)
        }
    }

    /// Checks id uniqueness and id/label well-formedness.
    pub fn validate(&self) -> Result<(), OrchestratorError> {
        let mut seen = BTreeSet::new();
        for e in &self.entries {
            if e.image_id.is_empty()
                || e.image_id.contains(['/', '\\'])
                || e.image_id.starts_with('.')
            {
                return Err(OrchestratorError::InvalidImageId(e.image_id.clone()));
            }
            if e.label.superclass.trim().is_empty() {
                return Err(OrchestratorError::UnresolvableSuperclass(
                    e.label.fine_name.clone(),
                ));
            }
            if e.label.fine_name.is_empty()
                || e.label.fine_name.contains(['/', '\\'])
                || e.label.fine_name.starts_with('.')
            {
                return Err(OrchestratorError::BadDataset(format!(
                    "class name {:?} cannot be used as a directory name",
                    e.label.fine_name
                )));
            }
            if !seen.insert(e.image_id.as_str()) {
                return Err(OrchestratorError::DuplicateImageId(e.image_id.clone()));
            }
        }
        Ok(())
    }

    pub fn get(&self, image_id: &str) -> Option<&DatasetEntry> {
        self.entries.iter().find(|e| e.image_id == image_id)
    }

    pub fn to_json(&self, relative_to: &Path) -> String {
        let raw = RawDataset {
            entries: self
                .entries
                .iter()
                .map(|e| RawEntry {
                    image_id: e.image_id.clone(),
                    image_path: e
                        .image_path
                        .strip_prefix(relative_to)
                        .unwrap_or(&e.image_path)
                        .to_string_lossy()
                        .replace('\\', "/"),
                    class: e.label.fine_name.clone(),
                })
                .collect(),
        };
        serde_json::to_string_pretty(&raw).expect("dataset serializes")
    }
}
