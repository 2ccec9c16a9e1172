use std::collections::{HashMap, HashSet};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::dataset::{DatasetEntry, DatasetManifest};
use super::manifest::{
    latest_records, now_unix_ms, AugRecord, ManifestHeader, ManifestWriter, PromptRecord,
    RecordStatus, MANIFEST_FILE,
};
use super::plan::AugTask;
use super::OrchestratorError;
use crate::backends::{self, BackendError, Backends};
use crate::compositor::merge;
use crate::geometry::{apply_affine, AffineParams, AffineRanges, GeometryError};
use crate::hashing::{sha256_hex, stable_hash};
use crate::isolation::{isolate, IsolationError, IsolationPolicy};
use crate::prompt::{obtain_caption, sample_spec, PromptError, PromptLibrary};
use crate::raster::{decode_image, encode_png, ImageError};

/// Whether replicas of one source share a caption.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CaptionGranularity {
    #[default]
    Replica,
    Source,
}

#[derive(Debug, Clone)]
pub struct PipelineConfig {
    pub out_dir: PathBuf,
    pub global_seed: u64,
    pub library: PromptLibrary,
    pub isolation: IsolationPolicy,
    pub affine: AffineRanges,
    pub caption_retries: u32,
    pub caption_per: CaptionGranularity,
    /// Worker threads; 0 lets rayon decide.
    pub jobs: usize,
    /// Run at most this many pending tasks, leaving the rest for a later resume.
    pub limit: Option<usize>,
    /// Echoed verbatim into the manifest header.
    pub header_config: serde_json::Value,
}

impl PipelineConfig {
    pub fn new(out_dir: impl Into<PathBuf>, global_seed: u64) -> Self {
        Self {
            out_dir: out_dir.into(),
            global_seed,
            library: PromptLibrary::builtin(),
            isolation: IsolationPolicy::default(),
            affine: AffineRanges::default(),
            caption_retries: 5,
            caption_per: CaptionGranularity::Replica,
            jobs: 0,
            limit: None,
            header_config: serde_json::Value::Null,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct CancelToken(Arc<AtomicBool>);

impl CancelToken {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn cancel(&self) {
        self.0.store(true, Ordering::SeqCst);
    }

    pub fn is_cancelled(&self) -> bool {
        self.0.load(Ordering::SeqCst)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct RunSummary {
    pub done: usize,
    pub failed: usize,
    /// Already complete in the output directory.
    pub skipped: usize,
    /// Left pending by cancellation or the task limit.
    pub not_run: usize,
}

/// A per-task failure; recorded in the manifest, never fatal to the run.
#[derive(Debug, Error)]
pub enum TaskError {
    #[error("source image {path}: {detail}")]
    Source { path: String, detail: String },
    #[error("isolation: {0}")]
    Isolation(#[from] IsolationError),
    #[error("caption: {0}")]
    Caption(#[from] PromptError),
    #[error("background: {0}")]
    Background(#[from] BackendError),
    #[error("transform: {0}")]
    Geometry(#[from] GeometryError),
    #[error("merge: {0}")]
    Merge(#[from] ImageError),
}

/// Everything a finished task contributes besides the identity fields.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskProduct {
    pub png: Vec<u8>,
    pub prompt: PromptRecord,
    pub background_seed: u64,
    pub affine: AffineParams,
    pub detection_fallback: bool,
    pub foreground_coverage: f64,
}

fn sub_seed(label: &[u8], seed: u64) -> u64 {
    stable_hash(&[label, &seed.to_le_bytes()])
}

/// `<class>/<image_id>_r<replica>.png`
pub fn output_relpath(entry: &DatasetEntry, replica_idx: u32) -> String {
    format!(
        "{}/{}_r{replica_idx}.png",
        entry.label.fine_name, entry.image_id
    )
}

/// Runs one task without touching the output directory.
///
/// Prompt, background seed and affine parameters each come from their own
/// stream derived from the task seed, so the result does not depend on which
/// thread runs the task or in what order.
pub fn render_task(
    entry: &DatasetEntry,
    task: &AugTask,
    backends: &Backends,
    config: &PipelineConfig,
) -> Result<TaskProduct, TaskError> {
    let source_err = |detail: String| TaskError::Source {
        path: entry.image_path.display().to_string(),
        detail,
    };
    let bytes = std::fs::read(&entry.image_path).map_err(|e| source_err(e.to_string()))?;
    let source = decode_image(&bytes)
        .map_err(|e| source_err(e.to_string()))?
        .to_rgb8();
    let canvas = source.dimensions();

    let isolated = isolate(
        &source,
        &entry.label,
        backends.detector.as_ref(),
        backends.segmenter.as_ref(),
        &config.isolation,
    )?;

    let prompt_seed = match config.caption_per {
        CaptionGranularity::Replica => sub_seed(b"prompt", task.task_seed),
        CaptionGranularity::Source => stable_hash(&[
            b"prompt-source",
            &config.global_seed.to_le_bytes(),
            entry.image_id.as_bytes(),
        ]),
    };
    let library = &config.library;
    let spec = sample_spec(
        &mut ChaCha8Rng::seed_from_u64(prompt_seed),
        &library.sets,
        &library.avoid,
    );
    let caption = obtain_caption(
        &spec,
        backends.captioner.as_ref(),
        &library.avoid,
        config.caption_retries,
    )?;

    let background_seed = sub_seed(b"background", task.task_seed);
    let background = backends::generate_background(
        backends.generator.as_ref(),
        &caption.caption,
        background_seed,
        canvas,
    )?;

    let params = config
        .affine
        .sample(&mut ChaCha8Rng::seed_from_u64(sub_seed(
            b"affine",
            task.task_seed,
        )));
    let moved = apply_affine(&isolated.subject, &params, canvas)?;
    let merged = merge(&moved.subject, &background)?;

    Ok(TaskProduct {
        png: encode_png(&merged.image)?,
        prompt: PromptRecord {
            instruction_idx: spec.instruction_idx,
            background_idx: spec.background_idx,
            temporal_idx: spec.temporal_idx,
            rendered: spec.rendered,
            caption: caption.caption,
            caption_attempts: caption.attempts,
        },
        background_seed,
        affine: moved.effective,
        detection_fallback: isolated.used_fallback,
        foreground_coverage: merged.foreground_coverage,
    })
}

fn fatal(path: &Path, e: std::io::Error) -> OrchestratorError {
    OrchestratorError::FatalIo {
        path: path.display().to_string(),
        detail: e.to_string(),
    }
}

fn write_atomically(path: &Path, bytes: &[u8]) -> Result<(), OrchestratorError> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| fatal(dir, e))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".part");
    let tmp = PathBuf::from(tmp);
    std::fs::write(&tmp, bytes).map_err(|e| fatal(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| fatal(path, e))
}

fn execute(
    entry: &DatasetEntry,
    task: &AugTask,
    backends: &Backends,
    config: &PipelineConfig,
) -> Result<AugRecord, OrchestratorError> {
    let mut record = AugRecord {
        image_id: task.image_id.clone(),
        replica_idx: task.replica_idx,
        task_seed: task.task_seed,
        class: entry.label.fine_name.clone(),
        superclass: entry.label.superclass.clone(),
        status: RecordStatus::Done,
        prompt: None,
        background_seed: None,
        affine: None,
        detection_fallback: None,
        backends: backends.identities(),
        output_path: None,
        content_sha256: None,
        foreground_coverage: None,
        finished_at_unix_ms: 0,
    };
    match render_task(entry, task, backends, config) {
        Ok(product) => {
            let rel = output_relpath(entry, task.replica_idx);
            write_atomically(&config.out_dir.join(&rel), &product.png)?;
            record.content_sha256 = Some(sha256_hex(&product.png));
            record.output_path = Some(rel);
            record.prompt = Some(product.prompt);
            record.background_seed = Some(product.background_seed);
            record.affine = Some(product.affine);
            record.detection_fallback = Some(product.detection_fallback);
            record.foreground_coverage = Some(product.foreground_coverage);
        }
        Err(e) => {
            log::warn!("{} replica {} failed: {e}", task.image_id, task.replica_idx);
            record.status = RecordStatus::Failed {
                reason: e.to_string(),
            };
        }
    }
    record.finished_at_unix_ms = now_unix_ms();
    Ok(record)
}

/// A done record counts only if its seed matches and its file is intact.
fn already_done(record: &AugRecord, task: &AugTask, out_dir: &Path) -> bool {
    if !record.is_done() || record.task_seed != task.task_seed {
        return false;
    }
    let (Some(rel), Some(sha)) = (&record.output_path, &record.content_sha256) else {
        return false;
    };
    std::fs::read(out_dir.join(rel)).is_ok_and(|bytes| &sha256_hex(&bytes) == sha)
}

/// Executes `tasks` on a pool of `config.jobs` threads, writing images under
/// `config.out_dir` and appending one manifest record per finished task.
///
/// Tasks already completed by an earlier run into the same directory are
/// skipped. Per-task failures are recorded and counted; I/O failures on the
/// output directory or manifest abort the run.
pub fn run(
    dataset: &DatasetManifest,
    tasks: &[AugTask],
    backends: &Backends,
    config: &PipelineConfig,
    cancel: &CancelToken,
) -> Result<RunSummary, OrchestratorError> {
    config
        .affine
        .validate()
        .map_err(|e| OrchestratorError::InvalidConfig(e.to_string()))?;
    if config.caption_retries == 0 {
        return Err(OrchestratorError::InvalidConfig(
            "caption_retries must be at least 1".into(),
        ));
    }
    let entries: HashMap<&str, &DatasetEntry> = dataset
        .entries
        .iter()
        .map(|e| (e.image_id.as_str(), e))
        .collect();
    let mut keys = HashSet::new();
    for task in tasks {
        if !entries.contains_key(task.image_id.as_str()) {
            return Err(OrchestratorError::UnknownTask(task.image_id.clone()));
        }
        if !keys.insert((task.image_id.as_str(), task.replica_idx)) {
            return Err(OrchestratorError::DuplicateImageId(task.image_id.clone()));
        }
    }

    std::fs::create_dir_all(&config.out_dir).map_err(|e| fatal(&config.out_dir, e))?;
    let header = ManifestHeader::new(
        config.global_seed,
        backends.identities(),
        config.header_config.clone(),
    );
    let (writer, prior) = ManifestWriter::open(&config.out_dir.join(MANIFEST_FILE), &header)?;

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.jobs)
        .build()
        .map_err(|e| OrchestratorError::InvalidConfig(e.to_string()))?;

    pool.install(|| {
        let pending: Vec<&AugTask> = match &prior {
            Some(contents) => {
                let latest = latest_records(&contents.records);
                tasks
                    .par_iter()
                    .filter(|t| {
                        !latest
                            .get(&(t.image_id.clone(), t.replica_idx))
                            .is_some_and(|r| already_done(r, t, &config.out_dir))
                    })
                    .collect()
            }
            None => tasks.iter().collect(),
        };
        let skipped = tasks.len() - pending.len();

        let started = AtomicUsize::new(0);
        let done = AtomicUsize::new(0);
        let failed = AtomicUsize::new(0);
        let first_fatal = Mutex::new(None);
        let stop = CancelToken::new();

        pending.par_iter().for_each(|task| {
            if cancel.is_cancelled() || stop.is_cancelled() {
                return;
            }
            let claimed = started.fetch_add(1, Ordering::SeqCst);
            if config.limit.is_some_and(|limit| claimed >= limit) {
                started.fetch_sub(1, Ordering::SeqCst);
                return;
            }
            let entry = entries[task.image_id.as_str()];
            let outcome = execute(entry, task, backends, config).and_then(|record| {
                writer.append(&record)?;
                Ok(record.is_done())
            });
            match outcome {
                Ok(true) => {
                    done.fetch_add(1, Ordering::SeqCst);
                }
                Ok(false) => {
                    failed.fetch_add(1, Ordering::SeqCst);
                }
                Err(e) => {
                    stop.cancel();
                    first_fatal
                        .lock()
                        .expect("fatal slot poisoned")
                        .get_or_insert(e);
                }
            }
        });

        if let Some(e) = first_fatal.into_inner().expect("fatal slot poisoned") {
            return Err(e);
        }
        let done = done.into_inner();
        let failed = failed.into_inner();
        Ok(RunSummary {
            done,
            failed,
            skipped,
            not_run: pending.len() - done - failed,
        })
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::mock::{CaptionMode, MockCaptioner, MockDetector};
    use crate::fixtures::write_demo_dataset;
    use crate::isolation::SuperclassTable;
    use crate::orchestrator::manifest::{read_manifest, validate_manifest};
    use crate::orchestrator::plan::plan;

    fn demo() -> (tempfile::TempDir, DatasetManifest) {
        let dir = tempfile::tempdir().unwrap();
        let json = write_demo_dataset(dir.path()).unwrap();
        let ds = DatasetManifest::from_json_file(&json, &SuperclassTable::imagenet10()).unwrap();
        (dir, ds)
    }

    #[test]
    fn full_run_writes_every_output() {
        let (src, ds) = demo();
        let tasks = plan(&ds, 2, 7).unwrap();
        let out = src.path().join("out");
        let config = PipelineConfig::new(&out, 7);
        let summary = run(&ds, &tasks, &Backends::mock(), &config, &CancelToken::new()).unwrap();
        assert_eq!(
            summary,
            RunSummary {
                done: 20,
                failed: 0,
                skipped: 0,
                not_run: 0
            }
        );
        let report = validate_manifest(&out.join(MANIFEST_FILE)).unwrap();
        assert!(report.is_clean(), "{:?}", report.violations);
        assert_eq!(report.done, 20);
        let tick = ds
            .entries
            .iter()
            .find(|e| e.label.fine_name == "tick")
            .unwrap();
        assert!(out.join(output_relpath(tick, 1)).exists());
    }

    #[test]
    fn rerun_skips_everything() {
        let (src, ds) = demo();
        let tasks = plan(&ds, 1, 3).unwrap();
        let config = PipelineConfig::new(src.path().join("out"), 3);
        run(&ds, &tasks, &Backends::mock(), &config, &CancelToken::new()).unwrap();
        let again = run(&ds, &tasks, &Backends::mock(), &config, &CancelToken::new()).unwrap();
        assert_eq!(
            again,
            RunSummary {
                done: 0,
                failed: 0,
                skipped: 10,
                not_run: 0
            }
        );
    }

    #[test]
    fn tampered_output_is_redone() {
        let (src, ds) = demo();
        let tasks = plan(&ds, 1, 3).unwrap();
        let out = src.path().join("out");
        let config = PipelineConfig::new(&out, 3);
        run(&ds, &tasks, &Backends::mock(), &config, &CancelToken::new()).unwrap();
        let victim = out.join(output_relpath(&ds.entries[0], 0));
        std::fs::write(&victim, b"garbage").unwrap();
        let again = run(&ds, &tasks, &Backends::mock(), &config, &CancelToken::new()).unwrap();
        assert_eq!((again.done, again.skipped), (1, 9));
    }

    #[test]
    fn failures_are_isolated_and_recorded() {
        let (src, ds) = demo();
        let victim = decode_image(&std::fs::read(&ds.entries[4].image_path).unwrap())
            .unwrap()
            .to_rgb8();
        let backends = Backends {
            detector: Arc::new(MockDetector::new().fail_on(&victim)),
            ..Backends::mock()
        };
        let tasks = plan(&ds, 2, 1).unwrap();
        let out = src.path().join("out");
        let summary = run(
            &ds,
            &tasks,
            &backends,
            &PipelineConfig::new(&out, 1),
            &CancelToken::new(),
        )
        .unwrap();
        assert_eq!((summary.done, summary.failed), (18, 2));
        let contents = read_manifest(&out.join(MANIFEST_FILE)).unwrap();
        let failed: Vec<_> = contents.records.iter().filter(|r| !r.is_done()).collect();
        assert_eq!(failed.len(), 2);
        assert!(failed.iter().all(|r| r.image_id == ds.entries[4].image_id));
        assert!(matches!(&failed[0].status, RecordStatus::Failed { reason } if !reason.is_empty()));
    }

    #[test]
    fn caption_exhaustion_fails_only_that_task() {
        let (src, ds) = demo();
        let backends = Backends {
            captioner: Arc::new(MockCaptioner::new(CaptionMode::InjectAvoid {
                word: "spider".into(),
                probability: 1.0,
            })),
            ..Backends::mock()
        };
        let tasks = plan(&ds, 1, 1).unwrap();
        let summary = run(
            &ds,
            &tasks[..2],
            &backends,
            &PipelineConfig::new(src.path().join("o"), 1),
            &CancelToken::new(),
        )
        .unwrap();
        assert_eq!(summary.failed, 2);
    }

    #[test]
    fn limit_leaves_work_for_resume() {
        let (src, ds) = demo();
        let tasks = plan(&ds, 2, 5).unwrap();
        let mut config = PipelineConfig::new(src.path().join("out"), 5);
        config.limit = Some(6);
        let first = run(&ds, &tasks, &Backends::mock(), &config, &CancelToken::new()).unwrap();
        assert_eq!((first.done, first.not_run), (6, 14));
        config.limit = None;
        let second = run(&ds, &tasks, &Backends::mock(), &config, &CancelToken::new()).unwrap();
        assert_eq!((second.done, second.skipped), (14, 6));
    }

    #[test]
    fn cancelled_run_does_nothing() {
        let (src, ds) = demo();
        let tasks = plan(&ds, 1, 5).unwrap();
        let cancel = CancelToken::new();
        cancel.cancel();
        let s = run(
            &ds,
            &tasks,
            &Backends::mock(),
            &PipelineConfig::new(src.path().join("o"), 5),
            &cancel,
        )
        .unwrap();
        assert_eq!(s.not_run, 10);
    }

    #[test]
    fn render_is_independent_of_order() {
        let (_src, ds) = demo();
        let tasks = plan(&ds, 2, 9).unwrap();
        let config = PipelineConfig::new("unused", 9);
        let backends = Backends::mock();
        let by_id = |t: &AugTask| ds.get(&t.image_id).unwrap();
        let forward: Vec<_> = tasks
            .iter()
            .map(|t| render_task(by_id(t), t, &backends, &config).unwrap().png)
            .collect();
        let mut backward: Vec<_> = tasks
            .iter()
            .rev()
            .map(|t| render_task(by_id(t), t, &backends, &config).unwrap().png)
            .collect();
        backward.reverse();
        assert_eq!(forward, backward);
    }

    #[test]
    fn source_granularity_shares_captions() {
        let (_src, ds) = demo();
        let tasks = plan(&ds, 3, 9).unwrap();
        let mut config = PipelineConfig::new("unused", 9);
        config.caption_per = CaptionGranularity::Source;
        let backends = Backends::mock();
        let entry = ds.get(&tasks[0].image_id).unwrap();
        let captions: Vec<_> = tasks[..3]
            .iter()
            .map(|t| {
                render_task(entry, t, &backends, &config)
                    .unwrap()
                    .prompt
                    .caption
            })
            .collect();
        assert!(captions.windows(2).all(|w| w[0] == w[1]));
    }

    #[test]
    fn unknown_task_rejected() {
        let (src, ds) = demo();
        let task = AugTask {
            image_id: "nope".into(),
            replica_idx: 0,
            task_seed: 0,
        };
        let err = run(
            &ds,
            &[task],
            &Backends::mock(),
            &PipelineConfig::new(src.path().join("o"), 0),
            &CancelToken::new(),
        )
        .unwrap_err();
        assert!(matches!(err, OrchestratorError::UnknownTask(_)));
    }
}
