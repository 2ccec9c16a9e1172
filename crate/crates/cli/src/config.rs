//! Run options shared by flags and the TOML config file.
//!
//! Every flag has a key of the same name (dashes become underscores) in the
//! config file; backend flags live under a `[backends]` table. Flags win
//! over the file; relative paths in the file are taken relative to the
//! file's directory.

use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use backdrop_core::backends::http::{
    HttpBackgroundGenerator, HttpCaptioner, HttpDetector, HttpSegmenter, RetryPolicy,
};
use backdrop_core::backends::mock::{
    CaptionMode, MockBackgroundGenerator, MockCaptioner, MockDetector, MockSegmenter,
};
use backdrop_core::orchestrator::CaptionGranularity;
use backdrop_core::{
    AffineRanges, BackendRole, Backends, IsolationPolicy, NoDetectionPolicy, PromptLibrary,
    SuperclassTable,
};
use clap::Args;
use serde::{Deserialize, Serialize};

/// `lo,hi`
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Range(pub f64, pub f64);

impl FromStr for Range {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (lo, hi) = s
            .split_once(',')
            .ok_or_else(|| format!("expected `lo,hi`, got {s:?}"))?;
        let parse = |v: &str| v.trim().parse::<f64>().map_err(|e| format!("{v:?}: {e}"));
        Ok(Range(parse(lo)?, parse(hi)?))
    }
}

/// Backend selection: URLs per role, with `--mock` filling any role left unset.
#[derive(Debug, Clone, Default, Args, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackendOptions {
    /// Use deterministic in-process mocks for roles without a URL.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub mock: Option<bool>,
    #[arg(long)]
    pub detector_url: Option<String>,
    #[arg(long)]
    pub segmenter_url: Option<String>,
    #[arg(long)]
    pub captioner_url: Option<String>,
    #[arg(long)]
    pub generator_url: Option<String>,
    /// Per-request timeout for HTTP backends.
    #[arg(long)]
    pub timeout_ms: Option<u64>,
    /// Retries after a failed HTTP request.
    #[arg(long)]
    pub retries: Option<u32>,
}

impl BackendOptions {
    fn overlay(self, file: Self) -> Self {
        Self {
            mock: self.mock.or(file.mock),
            detector_url: self.detector_url.or(file.detector_url),
            segmenter_url: self.segmenter_url.or(file.segmenter_url),
            captioner_url: self.captioner_url.or(file.captioner_url),
            generator_url: self.generator_url.or(file.generator_url),
            timeout_ms: self.timeout_ms.or(file.timeout_ms),
            retries: self.retries.or(file.retries),
        }
    }

    pub fn retry_policy(&self) -> RetryPolicy {
        let default = RetryPolicy::default();
        RetryPolicy {
            timeout_ms: self.timeout_ms.unwrap_or(default.timeout_ms),
            retries: self.retries.unwrap_or(default.retries),
            backoff_ms: default.backoff_ms,
        }
    }

    pub fn build(&self) -> Result<Backends> {
        let mock = self.mock.unwrap_or(false);
        let policy = self.retry_policy();
        let version = env!("CARGO_PKG_VERSION");
        let missing = |role: BackendRole| {
            anyhow::anyhow!(
                "no {role} configured: pass --{}-url or --mock",
                flag_stem(role)
            )
        };
        Ok(Backends {
            detector: match &self.detector_url {
                Some(url) => Arc::new(HttpDetector::new(url, "http", version, policy)),
                None if mock => Arc::new(MockDetector::new()),
                None => return Err(missing(BackendRole::Detector)),
            },
            segmenter: match &self.segmenter_url {
                Some(url) => Arc::new(HttpSegmenter::new(url, "http", version, policy)),
                None if mock => Arc::new(MockSegmenter::new()),
                None => return Err(missing(BackendRole::Segmenter)),
            },
            captioner: match &self.captioner_url {
                Some(url) => Arc::new(HttpCaptioner::new(url, "http", version, policy)),
                None if mock => Arc::new(MockCaptioner::new(CaptionMode::Template)),
                None => return Err(missing(BackendRole::Captioner)),
            },
            generator: match &self.generator_url {
                Some(url) => Arc::new(HttpBackgroundGenerator::new(url, "http", version, policy)),
                None if mock => Arc::new(MockBackgroundGenerator::new()),
                None => return Err(missing(BackendRole::BackgroundGenerator)),
            },
        })
    }
}

fn flag_stem(role: BackendRole) -> &'static str {
    match role {
        BackendRole::Detector => "detector",
        BackendRole::Segmenter => "segmenter",
        BackendRole::Captioner => "captioner",
        BackendRole::BackgroundGenerator => "generator",
    }
}

#[derive(Debug, Clone, Default, Args, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunOptions {
    /// Dataset listing (JSON) or a `<root>/<class>/<image>` directory.
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Augmented replicas per source image.
    #[arg(long)]
    pub scale: Option<u32>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Prompt library TOML (defaults to the built-in library).
    #[arg(long)]
    pub sets: Option<PathBuf>,
    /// Class to superclass table (defaults to the ImageNet10 table).
    #[arg(long)]
    pub superclasses: Option<PathBuf>,
    /// Worker threads (defaults to the logical CPU count).
    #[arg(long)]
    pub jobs: Option<usize>,
    #[arg(long, value_enum)]
    pub on_no_detection: Option<NoDetection>,
    #[arg(long)]
    pub min_mask_fraction: Option<f64>,
    /// Rotation range in degrees, e.g. `-25,25`.
    #[arg(long, allow_hyphen_values = true)]
    pub theta_range: Option<Range>,
    #[arg(long, allow_hyphen_values = true)]
    pub scale_range: Option<Range>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub allow_hflip: Option<bool>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub allow_vflip: Option<bool>,
    /// Maximum subject shift as a fraction of the image size.
    #[arg(long)]
    pub max_shift: Option<f64>,
    #[arg(long, value_enum)]
    pub caption_per: Option<CaptionPer>,
    #[arg(long)]
    pub caption_retries: Option<u32>,
    /// Stop after this many tasks; a later run resumes.
    #[arg(long)]
    pub limit: Option<usize>,
    // `[backends]` table in the config file.
    #[command(flatten)]
    pub backends: BackendOptions,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NoDetection {
    Error,
    CenterBox,
}

impl From<NoDetection> for NoDetectionPolicy {
    fn from(v: NoDetection) -> Self {
        match v {
            NoDetection::Error => NoDetectionPolicy::Error,
            NoDetection::CenterBox => NoDetectionPolicy::CenterBox,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CaptionPer {
    Replica,
    Source,
}

impl From<CaptionPer> for CaptionGranularity {
    fn from(v: CaptionPer) -> Self {
        match v {
            CaptionPer::Replica => CaptionGranularity::Replica,
            CaptionPer::Source => CaptionGranularity::Source,
        }
    }
}

/// Options after merging flags, file and defaults.
#[derive(Debug, Clone, Serialize)]
pub struct Effective {
    pub dataset: PathBuf,
    pub out: PathBuf,
    pub scale: u32,
    pub seed: u64,
    pub sets: Option<PathBuf>,
    pub superclasses: Option<PathBuf>,
    pub jobs: usize,
    pub on_no_detection: NoDetection,
    pub min_mask_fraction: f64,
    pub theta_range: Range,
    pub scale_range: Range,
    pub allow_hflip: bool,
    pub allow_vflip: bool,
    pub max_shift: f64,
    pub caption_per: CaptionPer,
    pub caption_retries: u32,
    pub limit: Option<usize>,
    pub mock: bool,
    pub detector_url: Option<String>,
    pub segmenter_url: Option<String>,
    pub captioner_url: Option<String>,
    pub generator_url: Option<String>,
    pub timeout_ms: u64,
    pub retries: u32,
}

fn rebase(base: &Path, p: Option<PathBuf>) -> Option<PathBuf> {
    p.map(|p| if p.is_absolute() { p } else { base.join(p) })
}

/// Reads a config file whose keys mirror the flags.
pub fn read_config_file(path: &Path) -> Result<RunOptions> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading config {}", path.display()))?;
    let mut opts: RunOptions =
        toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
    let base = path.parent().unwrap_or(Path::new("."));
    opts.dataset = rebase(base, opts.dataset);
    opts.out = rebase(base, opts.out);
    opts.sets = rebase(base, opts.sets);
    opts.superclasses = rebase(base, opts.superclasses);
    Ok(opts)
}

impl RunOptions {
    pub fn overlay(self, file: Self) -> Self {
        Self {
            dataset: self.dataset.or(file.dataset),
            out: self.out.or(file.out),
            scale: self.scale.or(file.scale),
            seed: self.seed.or(file.seed),
            sets: self.sets.or(file.sets),
            superclasses: self.superclasses.or(file.superclasses),
            jobs: self.jobs.or(file.jobs),
            on_no_detection: self.on_no_detection.or(file.on_no_detection),
            min_mask_fraction: self.min_mask_fraction.or(file.min_mask_fraction),
            theta_range: self.theta_range.or(file.theta_range),
            scale_range: self.scale_range.or(file.scale_range),
            allow_hflip: self.allow_hflip.or(file.allow_hflip),
            allow_vflip: self.allow_vflip.or(file.allow_vflip),
            max_shift: self.max_shift.or(file.max_shift),
            caption_per: self.caption_per.or(file.caption_per),
            caption_retries: self.caption_retries.or(file.caption_retries),
            limit: self.limit.or(file.limit),
            backends: self.backends.overlay(file.backends),
        }
    }

    pub fn resolve(self) -> Result<Effective> {
        let ranges = AffineRanges::default();
        let isolation = IsolationPolicy::default();
        let retry = self.backends.retry_policy();
        let jobs = self
            .jobs
            .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
        let scale = self.scale.unwrap_or(1);
        if scale == 0 {
            bail!("--scale must be at least 1");
        }
        if jobs == 0 {
            bail!("--jobs must be at least 1");
        }
        Ok(Effective {
            dataset: self.dataset.context("--dataset is required")?,
            out: self.out.context("--out is required")?,
            scale,
            seed: self.seed.unwrap_or(0),
            sets: self.sets,
            superclasses: self.superclasses,
            jobs,
            on_no_detection: self.on_no_detection.unwrap_or(NoDetection::Error),
            min_mask_fraction: self
                .min_mask_fraction
                .unwrap_or(isolation.min_mask_fraction),
            theta_range: self
                .theta_range
                .unwrap_or(Range(ranges.rotation_deg.0, ranges.rotation_deg.1)),
            scale_range: self
                .scale_range
                .unwrap_or(Range(ranges.scale.0, ranges.scale.1)),
            allow_hflip: self.allow_hflip.unwrap_or(ranges.allow_hflip),
            allow_vflip: self.allow_vflip.unwrap_or(ranges.allow_vflip),
            max_shift: self.max_shift.unwrap_or(ranges.max_shift),
            caption_per: self.caption_per.unwrap_or(CaptionPer::Replica),
            caption_retries: self.caption_retries.unwrap_or(5),
            limit: self.limit,
            mock: self.backends.mock.unwrap_or(false),
            detector_url: self.backends.detector_url,
            segmenter_url: self.backends.segmenter_url,
            captioner_url: self.backends.captioner_url,
            generator_url: self.backends.generator_url,
            timeout_ms: retry.timeout_ms,
            retries: retry.retries,
        })
    }
}

impl Effective {
    pub fn backend_options(&self) -> BackendOptions {
        BackendOptions {
            mock: Some(self.mock),
            detector_url: self.detector_url.clone(),
            segmenter_url: self.segmenter_url.clone(),
            captioner_url: self.captioner_url.clone(),
            generator_url: self.generator_url.clone(),
            timeout_ms: Some(self.timeout_ms),
            retries: Some(self.retries),
        }
    }

    pub fn affine_ranges(&self) -> AffineRanges {
        AffineRanges {
            rotation_deg: (self.theta_range.0, self.theta_range.1),
            scale: (self.scale_range.0, self.scale_range.1),
            allow_hflip: self.allow_hflip,
            allow_vflip: self.allow_vflip,
            max_shift: self.max_shift,
        }
    }

    pub fn isolation_policy(&self) -> IsolationPolicy {
        IsolationPolicy {
            on_no_detection: self.on_no_detection.into(),
            min_mask_fraction: self.min_mask_fraction,
        }
    }
}

pub fn load_library(path: Option<&Path>) -> Result<PromptLibrary> {
    match path {
        Some(p) => PromptLibrary::load(p)
            .with_context(|| format!("loading prompt library {}", p.display())),
        None => Ok(PromptLibrary::builtin()),
    }
}

pub fn load_table(path: Option<&Path>) -> Result<SuperclassTable> {
    match path {
        Some(p) => SuperclassTable::load(p)
            .with_context(|| format!("loading superclass table {}", p.display())),
        None => Ok(SuperclassTable::imagenet10()),
    }
}
