mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use backdrop_core::orchestrator::{
    self, CancelToken, DatasetManifest, PipelineConfig, MANIFEST_FILE,
};
use backdrop_core::prompt::{sample_spec, space_size};
use backdrop_core::raster::{decode_image, encode_mask_png, encode_png};
use backdrop_core::{isolate, IsolationPolicy};
use clap::{Parser, Subcommand};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use config::{load_library, load_table, read_config_file, BackendOptions, NoDetection, RunOptions};

#[derive(Parser)]
#[command(
    name = "backdrop",
    version,
    about = "Background-replacement dataset augmentation"
)]
struct Cli {
    /// Log verbosity (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write k augmented replicas of every dataset image.
    Augment {
        /// TOML file with the same keys as the flags.
        #[arg(long)]
        config: Option<PathBuf>,
        #[command(flatten)]
        opts: RunOptions,
    },
    /// Print sampled background prompts and the size of the prompt space.
    Prompts {
        #[arg(short, default_value_t = 10)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        sets: Option<PathBuf>,
    },
    /// Cut the subject out of one image; writes `<stem>_cutout.png` and `<stem>_mask.png`.
    Isolate {
        image: PathBuf,
        #[arg(long)]
        class: String,
        #[arg(long)]
        superclasses: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "error")]
        on_no_detection: NoDetection,
        #[arg(long)]
        min_mask_fraction: Option<f64>,
        #[command(flatten)]
        backends: BackendOptions,
    },
    /// Check a run manifest (or an output directory containing one).
    Validate { manifest: PathBuf },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    let result = match cli.command {
        Command::Augment { config, opts } => cmd_augment(config.as_deref(), opts),
        Command::Prompts { n, seed, sets } => cmd_prompts(n, seed, sets.as_deref()),
        Command::Isolate {
            image,
            class,
            superclasses,
            on_no_detection,
            min_mask_fraction,
            backends,
        } => {
            let policy = IsolationPolicy {
                on_no_detection: on_no_detection.into(),
                min_mask_fraction: min_mask_fraction
                    .unwrap_or(IsolationPolicy::default().min_mask_fraction),
            };
            cmd_isolate(&image, &class, superclasses.as_deref(), policy, &backends)
        }
        Command::Validate { manifest } => cmd_validate(&manifest),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn cmd_augment(config_file: Option<&Path>, flags: RunOptions) -> Result<ExitCode> {
    let file = match config_file {
        Some(p) => read_config_file(p)?,
        None => RunOptions::default(),
    };
    let eff = flags.overlay(file).resolve()?;
    let table = load_table(eff.superclasses.as_deref())?;
    let library = load_library(eff.sets.as_deref())?;
    let backends = eff.backend_options().build()?;
    let dataset = DatasetManifest::load(&eff.dataset, &table)?;
    let tasks = orchestrator::plan(&dataset, eff.scale, eff.seed)?;

    let mut config = PipelineConfig::new(&eff.out, eff.seed);
    config.library = library;
    config.isolation = eff.isolation_policy();
    config.affine = eff.affine_ranges();
    config.caption_retries = eff.caption_retries;
    config.caption_per = eff.caption_per.into();
    config.jobs = eff.jobs;
    config.limit = eff.limit;
    config.header_config = serde_json::to_value(&eff)?;

    let summary = orchestrator::run(&dataset, &tasks, &backends, &config, &CancelToken::new())?;
    let mut line = format!(
        "{} done, {} failed, {} skipped",
        summary.done, summary.failed, summary.skipped
    );
    if summary.not_run > 0 {
        line.push_str(&format!(", {} pending", summary.not_run));
    }
    println!("{line}");
    Ok(if summary.failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    })
}

fn cmd_prompts(n: usize, seed: u64, sets: Option<&Path>) -> Result<ExitCode> {
    let library = load_library(sets)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..n {
        println!(
            "{}",
            sample_spec(&mut rng, &library.sets, &library.avoid).rendered
        );
    }
    println!("space: {}", space_size(&library.sets));
    Ok(ExitCode::SUCCESS)
}

fn cmd_isolate(
    image: &Path,
    class: &str,
    superclasses: Option<&Path>,
    policy: IsolationPolicy,
    backends: &BackendOptions,
) -> Result<ExitCode> {
    let table = load_table(superclasses)?;
    let label = table.resolve(class)?;
    let bytes = std::fs::read(image).with_context(|| format!("reading {}", image.display()))?;
    let source = decode_image(&bytes).with_context(|| format!("decoding {}", image.display()))?;
    let backends = backends.build()?;
    let isolated = isolate(
        &source,
        &label,
        backends.detector.as_ref(),
        backends.segmenter.as_ref(),
        &policy,
    )?;

    let stem = image
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("image");
    let dir = image.parent().unwrap_or(Path::new("."));
    let cutout = dir.join(format!("{stem}_cutout.png"));
    let mask = dir.join(format!("{stem}_mask.png"));
    std::fs::write(&cutout, encode_png(isolated.subject.cutout())?)
        .with_context(|| format!("writing {}", cutout.display()))?;
    std::fs::write(&mask, encode_mask_png(isolated.subject.mask())?)
        .with_context(|| format!("writing {}", mask.display()))?;
    if isolated.used_fallback {
        eprintln!(
            "warning: no {} detected, used the center box",
            label.superclass
        );
    }
    println!("{}", cutout.display());
    println!("{}", mask.display());
    Ok(ExitCode::SUCCESS)
}

fn cmd_validate(path: &Path) -> Result<ExitCode> {
    let manifest = if path.is_dir() {
        path.join(MANIFEST_FILE)
    } else {
        path.to_owned()
    };
    let report = orchestrator::validate_manifest(&manifest)?;
    for v in &report.violations {
        println!("violation: {v}");
    }
    println!(
        "{} records, {} done, {} failed, {} violations",
        report.records,
        report.done,
        report.failed,
        report.violations.len()
    );
    Ok(if report.is_clean() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    })
}
