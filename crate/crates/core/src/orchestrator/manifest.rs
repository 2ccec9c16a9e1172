//! The run manifest: `<out>/manifest.jsonl`.
//!
//! Line 1 is a [`ManifestHeader`]; every further line is one [`AugRecord`],
//! appended as tasks finish, so record order follows completion order. A task
//! may appear more than once (a failed attempt followed by a later success);
//! the last record for a `(image_id, replica_idx)` pair wins.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::{File, OpenOptions};
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use super::OrchestratorError;
use crate::backends::BackendSet;
use crate::geometry::AffineParams;
use crate::hashing::sha256_hex;

pub const MANIFEST_SCHEMA: &str = "backdrop-run-manifest";
pub const MANIFEST_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.jsonl";

pub(crate) fn now_unix_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0, |d| d.as_millis() as u64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestHeader {
    pub schema: String,
    pub version: u32,
    pub global_seed: u64,
    pub backends: BackendSet,
    /// Effective configuration as supplied by the caller.
    pub config: serde_json::Value,
    pub created_at_unix_ms: u64,
}

impl ManifestHeader {
    pub fn new(global_seed: u64, backends: BackendSet, config: serde_json::Value) -> Self {
        Self {
            schema: MANIFEST_SCHEMA.to_owned(),
            version: MANIFEST_VERSION,
            global_seed,
            backends,
            config,
            created_at_unix_ms: now_unix_ms(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "state", rename_all = "snake_case")]
pub enum RecordStatus {
    Done,
    Failed { reason: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PromptRecord {
    pub instruction_idx: usize,
    pub background_idx: usize,
    pub temporal_idx: usize,
    pub rendered: String,
    pub caption: String,
    pub caption_attempts: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugRecord {
    pub image_id: String,
    pub replica_idx: u32,
    pub task_seed: u64,
    pub class: String,
    pub superclass: String,
    pub status: RecordStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompt: Option<PromptRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub background_seed: Option<u64>,
    /// Parameters after shrink-to-fit.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub affine: Option<AffineParams>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detection_fallback: Option<bool>,
    pub backends: BackendSet,
    /// Relative to the manifest's directory, `/`-separated.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_path: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub content_sha256: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub foreground_coverage: Option<f64>,
    pub finished_at_unix_ms: u64,
}

impl AugRecord {
    pub fn key(&self) -> (&str, u32) {
        (&self.image_id, self.replica_idx)
    }

    pub fn is_done(&self) -> bool {
        self.status == RecordStatus::Done
    }
}

/// Parsed manifest, tolerant of damage.
#[derive(Debug, Clone)]
pub struct ManifestContents {
    pub header: ManifestHeader,
    pub records: Vec<AugRecord>,
    /// `(1-based line, error)` for record lines that failed to parse.
    pub bad_lines: Vec<(usize, String)>,
    /// The file ended in an unterminated line, as left by an interrupted write.
    pub truncated_tail: bool,
}

fn unreadable(path: &Path, detail: impl std::fmt::Display) -> OrchestratorError {
    OrchestratorError::UnreadableManifest {
        path: path.display().to_string(),
        detail: detail.to_string(),
    }
}

pub fn parse_manifest(text: &str, path: &Path) -> Result<ManifestContents, OrchestratorError> {
    let truncated_tail = !text.is_empty() && !text.ends_with('\n');
    let mut lines = text.lines().enumerate();
    let header_line = lines
        .next()
        .map(|(_, l)| l)
        .ok_or_else(|| unreadable(path, "empty manifest"))?;
    let header: ManifestHeader =
        serde_json::from_str(header_line).map_err(|e| unreadable(path, format!("line 1: {e}")))?;
    if header.schema != MANIFEST_SCHEMA || header.version != MANIFEST_VERSION {
        return Err(unreadable(
            path,
            format!("unsupported schema {} v{}", header.schema, header.version),
        ));
    }
    let mut records = Vec::new();
    let mut bad_lines = Vec::new();
    for (i, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<AugRecord>(line) {
            Ok(r) => records.push(r),
            Err(e) => bad_lines.push((i + 1, e.to_string())),
        }
    }
    Ok(ManifestContents {
        header,
        records,
        bad_lines,
        truncated_tail,
    })
}

pub fn read_manifest(path: &Path) -> Result<ManifestContents, OrchestratorError> {
    let text = std::fs::read_to_string(path).map_err(|e| unreadable(path, e))?;
    parse_manifest(&text, path)
}

/// Last record per task key.
pub fn latest_records(records: &[AugRecord]) -> BTreeMap<(String, u32), &AugRecord> {
    records
        .iter()
        .map(|r| ((r.image_id.clone(), r.replica_idx), r))
        .collect()
}

/// Appends records one line at a time; safe to share across threads.
#[derive(Debug)]
pub struct ManifestWriter {
    path: PathBuf,
    file: Mutex<File>,
}

impl ManifestWriter {
    /// Creates a new manifest with `header`, or reopens an existing one for
    /// appending. An unterminated last line is cut off first.
    pub fn open(
        path: &Path,
        header: &ManifestHeader,
    ) -> Result<(Self, Option<ManifestContents>), OrchestratorError> {
        let fatal = |e: io::Error| OrchestratorError::FatalIo {
            path: path.display().to_string(),
            detail: e.to_string(),
        };
        let existing = match std::fs::read_to_string(path) {
            Ok(text) if !text.trim().is_empty() => Some((parse_manifest(&text, path)?, text)),
            Ok(_) => None,
            Err(e) if e.kind() == io::ErrorKind::NotFound => None,
            Err(e) => return Err(fatal(e)),
        };
        match existing {
            Some((contents, text)) => {
                if contents.header.global_seed != header.global_seed {
                    return Err(OrchestratorError::SeedMismatch {
                        manifest: contents.header.global_seed,
                        requested: header.global_seed,
                    });
                }
                let file = OpenOptions::new()
                    .read(true)
                    .write(true)
                    .open(path)
                    .map_err(fatal)?;
                if contents.truncated_tail {
                    let keep = text.rfind('\n').map_or(0, |i| i + 1);
                    log::warn!("dropping unterminated last line of {}", path.display());
                    file.set_len(keep as u64).map_err(fatal)?;
                }
                drop(file);
                let file = OpenOptions::new().append(true).open(path).map_err(fatal)?;
                Ok((
                    Self {
                        path: path.to_owned(),
                        file: Mutex::new(file),
                    },
                    Some(contents),
                ))
            }
            None => {
                let mut file = File::create(path).map_err(fatal)?;
                let line = serde_json::to_string(header).expect("header serializes");
                writeln!(file, "{line}")
                    .and_then(|_| file.flush())
                    .map_err(fatal)?;
                Ok((
                    Self {
                        path: path.to_owned(),
                        file: Mutex::new(file),
                    },
                    None,
                ))
            }
        }
    }

    pub fn append(&self, record: &AugRecord) -> Result<(), OrchestratorError> {
        let mut line = serde_json::to_string(record).expect("record serializes");
        line.push('\n');
        let mut file = self.file.lock().expect("manifest writer poisoned");
        file.write_all(line.as_bytes())
            .and_then(|_| file.flush())
            .map_err(|e| OrchestratorError::FatalIo {
                path: self.path.display().to_string(),
                detail: e.to_string(),
            })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Violation {
    Schema { line: usize, detail: String },
    TruncatedTail,
    DuplicateRecord { image_id: String, replica_idx: u32 },
    DuplicateOutput { output_path: String },
    MissingFile { output_path: String },
    HashMismatch { output_path: String },
}

impl std::fmt::Display for Violation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Violation::Schema { line, detail } => write!(f, "line {line}: {detail}"),
            Violation::TruncatedTail => write!(f, "last line is unterminated"),
            Violation::DuplicateRecord {
                image_id,
                replica_idx,
            } => {
                write!(
                    f,
                    "more than one done record for {image_id} replica {replica_idx}"
                )
            }
            Violation::DuplicateOutput { output_path } => {
                write!(f, "{output_path} is claimed by several records")
            }
            Violation::MissingFile { output_path } => write!(f, "{output_path} does not exist"),
            Violation::HashMismatch { output_path } => {
                write!(f, "{output_path} does not match its recorded sha256")
            }
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ValidationReport {
    pub records: usize,
    pub done: usize,
    pub failed: usize,
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_clean(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Checks record schema, uniqueness of done records and output paths, and
/// that every output exists with the recorded hash. Tasks whose latest record
/// is a failure are counted in `failed`.
pub fn validate_manifest(path: &Path) -> Result<ValidationReport, OrchestratorError> {
    let contents = read_manifest(path)?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut report = ValidationReport {
        records: contents.records.len(),
        ..Default::default()
    };
    for (line, detail) in &contents.bad_lines {
        report.violations.push(Violation::Schema {
            line: *line,
            detail: detail.clone(),
        });
    }
    if contents.truncated_tail {
        report.violations.push(Violation::TruncatedTail);
    }

    let mut done_keys = BTreeSet::new();
    let mut outputs = BTreeSet::new();
    for record in contents.records.iter().filter(|r| r.is_done()) {
        if !done_keys.insert(record.key()) {
            report.violations.push(Violation::DuplicateRecord {
                image_id: record.image_id.clone(),
                replica_idx: record.replica_idx,
            });
            continue;
        }
        let (Some(output_path), Some(sha)) = (&record.output_path, &record.content_sha256) else {
            report.violations.push(Violation::Schema {
                line: 0,
                detail: format!(
                    "done record for {} replica {} lacks output_path or content_sha256",
                    record.image_id, record.replica_idx
                ),
            });
            continue;
        };
        if !outputs.insert(output_path.as_str()) {
            report.violations.push(Violation::DuplicateOutput {
                output_path: output_path.clone(),
            });
        }
        match std::fs::read(base.join(output_path)) {
            Ok(bytes) if &sha256_hex(&bytes) == sha => {}
            Ok(_) => report.violations.push(Violation::HashMismatch {
                output_path: output_path.clone(),
            }),
            Err(_) => report.violations.push(Violation::MissingFile {
                output_path: output_path.clone(),
            }),
        }
    }
    report.done = done_keys.len();
    report.failed = latest_records(&contents.records)
        .values()
        .filter(|r| !r.is_done())
        .count();
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::Backends;

    fn header() -> ManifestHeader {
        ManifestHeader::new(
            7,
            Backends::mock().identities(),
            serde_json::json!({"scale": 2}),
        )
    }

    fn record(id: &str, replica: u32, output: Option<(&str, &[u8])>) -> AugRecord {
        AugRecord {
            image_id: id.into(),
            replica_idx: replica,
            task_seed: 1,
            class: "tick".into(),
            superclass: "arachnid".into(),
            status: if output.is_some() {
                RecordStatus::Done
            } else {
                RecordStatus::Failed {
                    reason: "boom".into(),
                }
            },
            prompt: None,
            background_seed: None,
            affine: None,
            detection_fallback: None,
            backends: Backends::mock().identities(),
            output_path: output.map(|(p, _)| p.to_owned()),
            content_sha256: output.map(|(_, b)| sha256_hex(b)),
            foreground_coverage: None,
            finished_at_unix_ms: 0,
        }
    }

    #[test]
    fn status_is_tagged() {
        let s = serde_json::to_string(&RecordStatus::Failed { reason: "x".into() }).unwrap();
        assert_eq!(s, r#"{"state":"failed","reason":"x"}"#);
        assert_eq!(
            serde_json::to_string(&RecordStatus::Done).unwrap(),
            r#"{"state":"done"}"#
        );
    }

    #[test]
    fn write_read_validate() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join(MANIFEST_FILE);
        std::fs::write(dir.path().join("a.png"), b"abc").unwrap();
        let (w, prior) = ManifestWriter::open(&path, &header()).unwrap();
        assert!(prior.is_none());
        w.append(&record("a", 0, Some(("a.png", b"abc")))).unwrap();
        w.append(&record("b", 0, None)).unwrap();
        drop(w);
        let report = validate_manifest(&path).unwrap();
        assert!(report.is_clean(), "{:?}", report.violations);
        assert_eq!((report.records, report.done, report.failed), (2, 1, 1));
    }

    #[test]
    fn violations_are_reported() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join(MANIFEST_FILE);
        std::fs::write(dir.path().join("a.png"), b"changed").unwrap();
        let (w, _) = ManifestWriter::open(&path, &header()).unwrap();
        w.append(&record("a", 0, Some(("a.png", b"abc")))).unwrap();
        w.append(&record("a", 0, Some(("a.png", b"abc")))).unwrap();
        w.append(&record("b", 0, Some(("b.png", b"abc")))).unwrap();
        drop(w);
        let mut f = OpenOptions::new().append(true).open(&path).unwrap();
        write!(f, "{{\"image_id\":").unwrap();
        let v = validate_manifest(&path).unwrap().violations;
        assert!(v.contains(&Violation::HashMismatch {
            output_path: "a.png".into()
        }));
        assert!(v.contains(&Violation::DuplicateRecord {
            image_id: "a".into(),
            replica_idx: 0
        }));
        assert!(v.contains(&Violation::MissingFile {
            output_path: "b.png".into()
        }));
        assert!(v.contains(&Violation::TruncatedTail));
        assert!(v
            .iter()
            .any(|x| matches!(x, Violation::Schema { line: 5, .. })));
    }

    #[test]
    fn reopening_cuts_partial_line_and_keeps_header() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join(MANIFEST_FILE);
        let (w, _) = ManifestWriter::open(&path, &header()).unwrap();
        w.append(&record("a", 0, None)).unwrap();
        drop(w);
        let mut f = OpenOptions::new().append(true).open(&path).unwrap();
        write!(f, "{{\"image_id\":\"b\",").unwrap();
        drop(f);
        let (w, prior) = ManifestWriter::open(&path, &header()).unwrap();
        let prior = prior.unwrap();
        assert!(prior.truncated_tail);
        assert_eq!(prior.records.len(), 1);
        w.append(&record("c", 0, None)).unwrap();
        drop(w);
        let again = read_manifest(&path).unwrap();
        assert!(again.bad_lines.is_empty() && !again.truncated_tail);
        assert_eq!(again.records.len(), 2);
    }

    #[test]
    fn reopening_with_other_seed_is_refused() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join(MANIFEST_FILE);
        ManifestWriter::open(&path, &header()).unwrap();
        let mut other = header();
        other.global_seed = 8;
        assert!(matches!(
            ManifestWriter::open(&path, &other),
            Err(OrchestratorError::SeedMismatch {
                manifest: 7,
                requested: 8
            })
        ));
    }
}
