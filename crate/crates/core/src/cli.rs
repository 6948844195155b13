//! Command-line surface behind the `vlm-guard` binary.
//!
//! Exit codes: 0 success, 2 usage, 3 configuration, 4 profile, 5 endpoint
//! unreachable, 6 unreadable input, 7 model or pipeline failure, 8 output
//! could not be written.

use std::io::{BufRead, Write};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use serde_json::json;
use thiserror::Error;

use crate::calibration::{
    calibrate_early, calibrate_late, collect_response_sets, load_profile, save_profile, CalibrationError,
    CalibrationProfile, ProfileError,
};
use crate::clients::ClientError;
use crate::config::{build_runtime, AppConfig, AppConfigError, Runtime};
use crate::eval::{evaluate, EvalCorpus, EvalError, EvalOptions, EvalReport, ScoreAggregation};
use crate::pipeline::{Defender, PipelineError};
use crate::raster::RasterImage;
use crate::synthetic::{make_corpus, SyntheticCorpus, SyntheticError};

#[derive(Debug, Parser)]
#[command(
    name = "vlm-guard",
    version,
    about = "Adversarial-image defense for vision-language inference"
)]
pub struct Cli {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Default, Args)]
pub struct CommonArgs {
    /// TOML configuration file; built-in defaults (synthetic backend) when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Endpoint override, `URL` for every role or `ROLE=URL` for one. Repeatable.
    #[arg(long = "endpoint", global = true)]
    pub endpoints: Vec<String>,
    /// Maximum concurrent per-image operations.
    #[arg(long, global = true, default_value_t = 8)]
    pub concurrency: usize,
    /// Transform seed override (corpus seed for `synth`).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Synthetic corpus the synthetic backend recognizes, overriding the config.
    #[arg(long, global = true)]
    pub world: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Derive both thresholds from clean images and write a profile.
    Calibrate {
        /// Directory of images, labels file, or synthetic corpus (clean entries only).
        #[arg(long)]
        corpus: PathBuf,
        /// Profile path; an existing file is never overwritten.
        #[arg(long)]
        out: PathBuf,
    },
    /// Defend one image and print the result as JSON.
    Defend {
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        profile: PathBuf,
        #[arg(long)]
        instruction: Option<String>,
    },
    /// Defend a labelled corpus and write `report.json` and `summary.csv`.
    Eval {
        /// Synthetic corpus, labels file, or directory containing `labels.jsonl`.
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        profile: PathBuf,
        #[arg(long, default_value = "eval-out")]
        out: PathBuf,
        /// How caption scores reduce over multiple references.
        #[arg(long, value_enum, default_value_t = Aggregation::Max)]
        aggregation: Aggregation,
    },
    /// Serve the defense over HTTP.
    Serve {
        #[arg(long)]
        profile: PathBuf,
        #[arg(long, default_value = "127.0.0.1:8080")]
        listen: SocketAddr,
    },
    /// Generate a synthetic corpus.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 100)]
        clean: usize,
        #[arg(long, default_value_t = 0)]
        attacked: usize,
        #[arg(long, default_value_t = 0.5)]
        epsilon: f64,
        /// Also write every entry as PNG plus a `labels.jsonl` into this directory.
        #[arg(long)]
        images_dir: Option<PathBuf>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Aggregation {
    Max,
    Mean,
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Config(#[from] AppConfigError),
    #[error(transparent)]
    Profile(#[from] ProfileError),
    #[error("endpoint unreachable: {0}")]
    Unreachable(String),
    #[error("unreadable input: {0}")]
    Input(String),
    #[error("{0}")]
    Failed(String),
    #[error("cannot write output: {0}")]
    Output(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Config(_) => 3,
            CliError::Profile(_) => 4,
            CliError::Unreachable(_) => 5,
            CliError::Input(_) => 6,
            CliError::Failed(_) => 7,
            CliError::Output(_) => 8,
        }
    }

    fn from_client(e: &ClientError, context: String) -> Self {
        match e {
            ClientError::Transport(_) | ClientError::Timeout(_) => CliError::Unreachable(context),
            _ => CliError::Failed(context),
        }
    }
}

impl From<CalibrationError> for CliError {
    fn from(e: CalibrationError) -> Self {
        match &e {
            CalibrationError::Client { source, .. } => {
                CliError::from_client(source, format!("calibration: {e}"))
            }
            _ => CliError::Failed(format!("calibration: {e}")),
        }
    }
}

impl From<PipelineError> for CliError {
    fn from(e: PipelineError) -> Self {
        match &e {
            PipelineError::Client { source, .. } => CliError::from_client(source, e.to_string()),
            _ => CliError::Failed(e.to_string()),
        }
    }
}

impl From<SyntheticError> for CliError {
    fn from(e: SyntheticError) -> Self {
        match e {
            SyntheticError::Io(_) | SyntheticError::Format { .. } => CliError::Input(e.to_string()),
            other => CliError::Usage(other.to_string()),
        }
    }
}

fn output_err(e: impl std::fmt::Display) -> CliError {
    CliError::Output(e.to_string())
}

/// Loads the configuration and applies flag and environment overrides.
pub fn load_config(common: &CommonArgs) -> Result<AppConfig, CliError> {
    let mut config = match &common.config {
        Some(path) => AppConfig::load(path)?,
        None => AppConfig::default(),
    };
    config.apply_env(|k| std::env::var(k).ok())?;
    for e in &common.endpoints {
        config.apply_endpoint_override(e)?;
    }
    if let Some(seed) = common.seed {
        config.transform.seed = seed;
    }
    if let (Some(world), crate::config::Backend::Synthetic(s)) = (&common.world, &mut config.backend) {
        s.corpus = Some(world.clone());
    }
    config.validate()?;
    if common.concurrency == 0 {
        return Err(CliError::Usage("--concurrency must be at least 1".into()));
    }
    Ok(config)
}

/// Inputs a corpus path can resolve to.
pub enum CorpusInput {
    Synthetic(SyntheticCorpus),
    Labelled(EvalCorpus),
}

fn is_synthetic_corpus(path: &Path) -> bool {
    let Ok(file) = std::fs::File::open(path) else {
        return false;
    };
    let mut first = String::new();
    if std::io::BufReader::new(file).read_line(&mut first).is_err() {
        return false;
    }
    serde_json::from_str::<serde_json::Value>(&first)
        .ok()
        .and_then(|v| {
            v.get("format")
                .and_then(|f| f.as_str())
                .map(|f| f.starts_with("vlm-guard/synthetic-corpus"))
        })
        .unwrap_or(false)
}

fn image_files(dir: &Path) -> Result<Vec<PathBuf>, CliError> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| CliError::Input(format!("{}: {e}", dir.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .and_then(|x| x.to_str())
                .is_some_and(|x| matches!(x.to_ascii_lowercase().as_str(), "png" | "jpg" | "jpeg"))
        })
        .collect();
    files.sort();
    Ok(files)
}

/// Resolves `path` as a synthetic corpus, a labels file, or a directory with
/// a `labels.jsonl`.
pub fn read_corpus(path: &Path) -> Result<CorpusInput, CliError> {
    if path.is_dir() {
        let labels = path.join("labels.jsonl");
        if !labels.exists() {
            return Err(CliError::Input(format!("{} has no labels.jsonl", path.display())));
        }
        return read_corpus(&labels);
    }
    if !path.exists() {
        return Err(CliError::Input(format!("{} does not exist", path.display())));
    }
    if is_synthetic_corpus(path) {
        Ok(CorpusInput::Synthetic(SyntheticCorpus::load(path)?))
    } else {
        EvalCorpus::from_labels(path)
            .map(CorpusInput::Labelled)
            .map_err(|e| CliError::Input(e.to_string()))
    }
}

/// Clean calibration images from a directory (every image is taken as
/// clean), a labels file, or a synthetic corpus. Labelled attacked entries
/// are refused.
fn read_clean_images(path: &Path) -> Result<(Vec<RasterImage>, Option<SyntheticCorpus>), CliError> {
    if path.is_dir() && !path.join("labels.jsonl").exists() {
        let images = image_files(path)?
            .iter()
            .map(|p| RasterImage::open(p).map_err(|e| CliError::Input(format!("{}: {e}", p.display()))))
            .collect::<Result<Vec<_>, _>>()?;
        return Ok((images, None));
    }
    match read_corpus(path)? {
        CorpusInput::Synthetic(c) => {
            if let Some(e) = c.entries.iter().find(|e| e.is_attacked) {
                return Err(CliError::Input(format!(
                    "calibration corpus must be clean, entry {} is attacked",
                    e.id
                )));
            }
            let images = c.entries.iter().map(|e| e.raster.clone()).collect();
            Ok((images, Some(c)))
        }
        CorpusInput::Labelled(c) => {
            let mut images = Vec::with_capacity(c.len());
            for e in c.entries {
                if e.is_attacked {
                    return Err(CliError::Input(format!(
                        "calibration corpus must be clean, {} is attacked",
                        e.id
                    )));
                }
                images.push(
                    e.image
                        .map_err(|err| CliError::Input(format!("{}: {err}", e.id)))?,
                );
            }
            Ok((images, None))
        }
    }
}

/// Calibrates both thresholds against `images`.
pub async fn calibrate(
    config: &AppConfig,
    runtime: &Runtime,
    images: &[RasterImage],
    concurrency: usize,
) -> Result<CalibrationProfile, CliError> {
    let settings = &config.calibration;
    let take = |limit: Option<usize>| &images[..limit.unwrap_or(images.len()).min(images.len())];
    let early = calibrate_early(
        take(settings.max_samples),
        runtime.clients.encoder.as_ref(),
        &config.transform,
        settings.early_percentile,
        concurrency,
    )
    .await?;
    let sets = collect_response_sets(
        take(settings.late_samples),
        runtime.clients.captioner.as_ref(),
        &config.transform,
        &config.pipeline.instruction,
        concurrency,
    )
    .await?;
    let late = calibrate_late(
        &sets,
        runtime.clients.embedder.as_ref(),
        settings.late_percentile,
        config.pipeline.include_original_in_late,
        concurrency,
    )
    .await?;
    Ok(CalibrationProfile::new(&early, &late, &config.transform)?)
}

fn defender(config: &AppConfig, runtime: &Runtime, profile_path: &Path) -> Result<Defender, CliError> {
    let profile = load_profile(profile_path, &config.transform)?;
    Ok(Defender::new(
        runtime.clients.clone(),
        profile,
        config.transform,
        config.pipeline.clone(),
    )?)
}

/// Evaluates the corpus against the profile and writes the report files into `out`.
pub async fn run_eval(
    corpus_path: &Path,
    profile_path: &Path,
    config: &AppConfig,
    options: EvalOptions,
    out: &Path,
) -> Result<EvalReport, CliError> {
    let (corpus, world) = match read_corpus(corpus_path)? {
        CorpusInput::Synthetic(c) => (EvalCorpus::from_synthetic(&c), Some(c)),
        CorpusInput::Labelled(c) => (c, None),
    };
    let runtime = build_runtime(config, world)?;
    let defender = defender(config, &runtime, profile_path)?;
    let echo = json!({
        "transform": config.transform,
        "pipeline": config.pipeline,
        "profile": defender.profile(),
        "options": options,
    });
    let report = evaluate(
        &corpus,
        &defender,
        runtime.clients.embedder.as_ref(),
        options,
        echo,
    )
    .await;
    report.write_to_dir(out).map_err(|e| match e {
        EvalError::Write { .. } => output_err(e),
        other => CliError::Failed(other.to_string()),
    })?;
    Ok(report)
}

fn write_images(corpus: &SyntheticCorpus, dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(output_err)?;
    let mut labels = String::new();
    for e in &corpus.entries {
        let name = format!("{:05}.png", e.id);
        e.raster.save_png(dir.join(&name)).map_err(output_err)?;
        labels.push_str(
            &json!({
                "path": name,
                "is_attacked": e.is_attacked,
                "references": [e.reference_caption()],
            })
            .to_string(),
        );
        labels.push('\n');
    }
    std::fs::write(dir.join("labels.jsonl"), labels).map_err(output_err)
}

/// Runs one command, writing its primary output to `out`.
pub async fn run(cli: Cli, out: &mut (dyn Write + Send)) -> Result<(), CliError> {
    let common = &cli.common;
    match cli.command {
        Command::Synth {
            out: path,
            clean,
            attacked,
            epsilon,
            images_dir,
        } => {
            let corpus = make_corpus(clean, attacked, epsilon, common.seed.unwrap_or(0))?;
            corpus.save(&path).map_err(output_err)?;
            if let Some(dir) = images_dir {
                write_images(&corpus, &dir)?;
            }
            writeln!(
                out,
                "{}",
                json!({"corpus": path, "entries": corpus.len(), "attacked": attacked, "seed": corpus.seed})
            )
            .map_err(output_err)
        }
        Command::Calibrate { corpus, out: path } => {
            let config = load_config(common)?;
            if path.exists() {
                return Err(ProfileError::Exists(path.display().to_string()).into());
            }
            let (images, world) = read_clean_images(&corpus)?;
            let runtime = build_runtime(&config, world)?;
            let profile = calibrate(&config, &runtime, &images, common.concurrency).await?;
            save_profile(&profile, &path)?;
            let summary = json!({
                "profile": path,
                "tau_early": profile.tau_early,
                "tau_late": profile.tau_late,
                "n_samples": profile.n_samples,
                "n_late_samples": profile.n_late_samples,
                "transform_spec_fingerprint": profile.transform_spec_fingerprint,
            });
            writeln!(out, "{}", serde_json::to_string_pretty(&summary).expect("json")).map_err(output_err)
        }
        Command::Defend {
            image,
            profile,
            instruction,
        } => {
            let config = load_config(common)?;
            let raster = RasterImage::open(&image)
                .map_err(|e| CliError::Input(format!("{}: {e}", image.display())))?;
            let runtime = build_runtime(&config, None)?;
            let defender = defender(&config, &runtime, &profile)?;
            let instruction = instruction.unwrap_or_else(|| config.pipeline.instruction.clone());
            let result = defender.defend(&raster, &instruction).await?;
            writeln!(out, "{}", serde_json::to_string_pretty(&result).expect("json")).map_err(output_err)
        }
        Command::Eval {
            corpus,
            profile,
            out: dir,
            aggregation,
        } => {
            let config = load_config(common)?;
            let options = EvalOptions {
                concurrency: common.concurrency,
                aggregation: match aggregation {
                    Aggregation::Max => ScoreAggregation::Max,
                    Aggregation::Mean => ScoreAggregation::Mean,
                },
            };
            let report = run_eval(&corpus, &profile, &config, options, &dir).await?;
            let summary = json!({
                "total": report.total,
                "route_counts": report.route_counts,
                "failures": report.failures.len(),
                "detection": report.detection,
                "mean_caption_score": report.mean_caption_score,
                "report": dir.join("report.json"),
                "summary": dir.join("summary.csv"),
            });
            writeln!(out, "{}", serde_json::to_string_pretty(&summary).expect("json")).map_err(output_err)
        }
        Command::Serve { profile, listen } => {
            let config = load_config(common)?;
            let runtime = build_runtime(&config, None)?;
            let defender = Arc::new(defender(&config, &runtime, &profile)?);
            crate::serve::serve_until_ctrl_c(listen, defender)
                .await
                .map_err(|e| CliError::Failed(format!("serve on {listen}: {e}")))
        }
    }
}
