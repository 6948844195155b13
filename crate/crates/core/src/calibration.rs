//! Threshold calibration from clean data.
//!
//! `tau_early` is the nearest-rank percentile (default 95th) of per-image mean
//! transform distances; `tau_late` is the nearest-rank percentile (default
//! 99th) of per-set maximum KL divergence. Nothing here takes attack
//! parameters. A [`CalibrationProfile`] binds both thresholds to the
//! fingerprint of the [`TransformSpec`] used to produce them.

use std::io::Write;
use std::path::Path;

use chrono::{DateTime, Utc};
use futures::stream::{self, StreamExt, TryStreamExt};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clients::{Captioner, ClientError, TextEmbedder, VisionEncoder};
use crate::detection::{max_off_diagonal, mean_transform_distance, MathError};
use crate::raster::RasterImage;
use crate::responses::{generate_responses, response_set_divergence, DivergenceError, ResponseSet};
use crate::transforms::{generate_transform_set, TransformError, TransformSpec};

pub const DEFAULT_EARLY_PERCENTILE: f64 = 0.95;
pub const DEFAULT_LATE_PERCENTILE: f64 = 0.99;

#[derive(Debug, Error)]
pub enum CalibrationError {
    #[error("calibration needs at least one sample")]
    Empty,
    #[error("percentile must be in (0, 1], got {0}")]
    Percentile(f64),
    #[error("sample {index}: {source}")]
    Client {
        index: usize,
        #[source]
        source: ClientError,
    },
    #[error("sample {index}: {source}")]
    Math {
        index: usize,
        #[source]
        source: MathError,
    },
    #[error(transparent)]
    Transform(#[from] TransformError),
    #[error("encoder returned {got} embeddings for {expected} images")]
    BatchSize { expected: usize, got: usize },
    #[error("degenerate profile: {0} threshold is {1}, must be positive")]
    Degenerate(&'static str, f64),
}

/// `sorted(values)[ceil(p * n) - 1]`.
pub fn nearest_rank_percentile(values: &[f64], p: f64) -> Result<f64, CalibrationError> {
    if values.is_empty() {
        return Err(CalibrationError::Empty);
    }
    if !(p > 0.0 && p <= 1.0) {
        return Err(CalibrationError::Percentile(p));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    // 0.95 * 100 ranks as 95 despite representation error
    let rank = ((p * sorted.len() as f64) - 1e-9).ceil().max(1.0) as usize;
    Ok(sorted[rank.min(sorted.len()) - 1])
}

/// A percentile threshold together with the sample it was drawn from.
#[derive(Debug, Clone, PartialEq)]
pub struct ThresholdEstimate {
    pub value: f64,
    pub percentile: f64,
    pub samples: Vec<f64>,
}

impl ThresholdEstimate {
    pub fn from_samples(samples: Vec<f64>, percentile: f64) -> Result<Self, CalibrationError> {
        let value = nearest_rank_percentile(&samples, percentile)?;
        Ok(Self {
            value,
            percentile,
            samples,
        })
    }

    /// A non-positive threshold cannot back a profile.
    pub fn is_degenerate(&self) -> bool {
        self.value.is_nan() || self.value <= 0.0
    }

    /// Fraction of the calibration sample at or below the threshold.
    pub fn pass_rate(&self) -> f64 {
        let passed = self.samples.iter().filter(|s| **s <= self.value).count();
        passed as f64 / self.samples.len() as f64
    }
}

/// Mean transform distance of one image, using a single encoder batch of
/// `1 + spec.count` images.
pub async fn early_score(
    image: &RasterImage,
    encoder: &dyn VisionEncoder,
    spec: &TransformSpec,
) -> Result<f64, CalibrationError> {
    let views = generate_transform_set(image, spec)?;
    let mut batch = Vec::with_capacity(views.len() + 1);
    batch.push(image.clone());
    batch.extend(views);
    let embeddings = encoder
        .encode_image_batch(&batch)
        .await
        .map_err(|source| CalibrationError::Client { index: 0, source })?;
    if embeddings.len() != batch.len() {
        return Err(CalibrationError::BatchSize {
            expected: batch.len(),
            got: embeddings.len(),
        });
    }
    mean_transform_distance(&embeddings[0], &embeddings[1..])
        .map_err(|source| CalibrationError::Math { index: 0, source })
}

fn reindex(e: CalibrationError, index: usize) -> CalibrationError {
    match e {
        CalibrationError::Client { source, .. } => CalibrationError::Client { index, source },
        CalibrationError::Math { source, .. } => CalibrationError::Math { index, source },
        other => other,
    }
}

/// Calibrates `tau_early` on clean images. Any failing sample aborts the run.
pub async fn calibrate_early(
    clean_images: &[RasterImage],
    encoder: &dyn VisionEncoder,
    spec: &TransformSpec,
    percentile: f64,
    concurrency: usize,
) -> Result<ThresholdEstimate, CalibrationError> {
    if clean_images.is_empty() {
        return Err(CalibrationError::Empty);
    }
    spec.validate()?;
    let samples: Vec<f64> = stream::iter(clean_images.iter().enumerate())
        .map(|(i, img)| async move { early_score(img, encoder, spec).await.map_err(|e| reindex(e, i)) })
        .buffered(concurrency.max(1))
        .try_collect()
        .await?;
    ThresholdEstimate::from_samples(samples, percentile)
}

/// Calibrates `tau_late` on clean response sets.
pub async fn calibrate_late(
    clean_sets: &[ResponseSet],
    embedder: &dyn TextEmbedder,
    percentile: f64,
    include_original: bool,
    concurrency: usize,
) -> Result<ThresholdEstimate, CalibrationError> {
    if clean_sets.is_empty() {
        return Err(CalibrationError::Empty);
    }
    let samples: Vec<f64> = stream::iter(clean_sets.iter().enumerate())
        .map(|(index, set)| async move {
            let d = response_set_divergence(set, embedder, include_original)
                .await
                .map_err(|e| match e {
                    DivergenceError::Client(source) => CalibrationError::Client { index, source },
                    DivergenceError::Math(source) => CalibrationError::Math { index, source },
                })?;
            Ok::<_, CalibrationError>(max_off_diagonal(&d))
        })
        .buffered(concurrency.max(1))
        .try_collect()
        .await?;
    ThresholdEstimate::from_samples(samples, percentile)
}

/// Captions the original and every view of each clean image.
pub async fn collect_response_sets(
    clean_images: &[RasterImage],
    captioner: &dyn Captioner,
    spec: &TransformSpec,
    instruction: &str,
    concurrency: usize,
) -> Result<Vec<ResponseSet>, CalibrationError> {
    stream::iter(clean_images.iter().enumerate())
        .map(|(index, img)| async move {
            let views = generate_transform_set(img, spec)?;
            generate_responses(captioner, img, &views, instruction)
                .await
                .map_err(|source| CalibrationError::Client { index, source })
        })
        .buffered(concurrency.max(1))
        .try_collect()
        .await
}

/// Thresholds for both detectors, bound to one transform spec.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationProfile {
    pub tau_early: f64,
    pub tau_late: f64,
    pub early_percentile: f64,
    pub late_percentile: f64,
    pub n_samples: usize,
    pub n_late_samples: usize,
    pub transform_spec_fingerprint: String,
    pub created_at: DateTime<Utc>,
}

#[derive(Debug, Error)]
pub enum ProfileError {
    #[error("profile file not found: {0}")]
    Missing(String),
    #[error("corrupt profile {path}: {reason}")]
    Corrupt { path: String, reason: String },
    #[error("profile was calibrated for transform spec {found}, but the configured spec is {expected}")]
    FingerprintMismatch { expected: String, found: String },
    #[error("refusing to overwrite existing profile {0}")]
    Exists(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid profile: {0}")]
    Invalid(String),
}

impl CalibrationProfile {
    pub fn new(
        early: &ThresholdEstimate,
        late: &ThresholdEstimate,
        spec: &TransformSpec,
    ) -> Result<Self, CalibrationError> {
        if early.is_degenerate() {
            return Err(CalibrationError::Degenerate("early", early.value));
        }
        if late.is_degenerate() {
            return Err(CalibrationError::Degenerate("late", late.value));
        }
        Ok(Self {
            tau_early: early.value,
            tau_late: late.value,
            early_percentile: early.percentile,
            late_percentile: late.percentile,
            n_samples: early.samples.len(),
            n_late_samples: late.samples.len(),
            transform_spec_fingerprint: spec.fingerprint(),
            created_at: Utc::now(),
        })
    }

    pub fn validate(&self) -> Result<(), ProfileError> {
        let positive = |name: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(ProfileError::Invalid(format!("{name} must be positive, got {v}")))
            }
        };
        positive("tau_early", self.tau_early)?;
        positive("tau_late", self.tau_late)?;
        for (name, p) in [
            ("early_percentile", self.early_percentile),
            ("late_percentile", self.late_percentile),
        ] {
            if !(p > 0.0 && p <= 1.0) {
                return Err(ProfileError::Invalid(format!(
                    "{name} must be in (0, 1], got {p}"
                )));
            }
        }
        Ok(())
    }

    pub fn check_spec(&self, spec: &TransformSpec) -> Result<(), ProfileError> {
        let expected = spec.fingerprint();
        if self.transform_spec_fingerprint != expected {
            return Err(ProfileError::FingerprintMismatch {
                expected,
                found: self.transform_spec_fingerprint.clone(),
            });
        }
        Ok(())
    }
}

/// Writes the profile as pretty JSON. The file appears atomically and an
/// existing file is never replaced.
pub fn save_profile(profile: &CalibrationProfile, path: impl AsRef<Path>) -> Result<(), ProfileError> {
    let path = path.as_ref();
    let shown = path.display().to_string();
    profile.validate()?;
    let io = |source| ProfileError::Io {
        path: shown.clone(),
        source,
    };
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(io)?;
    let json = serde_json::to_vec_pretty(profile).expect("profile serializes");
    tmp.write_all(&json).map_err(io)?;
    tmp.write_all(b"\n").map_err(io)?;
    tmp.as_file().sync_all().map_err(io)?;
    tmp.persist_noclobber(path).map_err(|e| {
        if e.error.kind() == std::io::ErrorKind::AlreadyExists {
            ProfileError::Exists(shown.clone())
        } else {
            io(e.error)
        }
    })?;
    Ok(())
}

/// Reads a profile and checks it against the configured transform spec.
pub fn load_profile(
    path: impl AsRef<Path>,
    spec: &TransformSpec,
) -> Result<CalibrationProfile, ProfileError> {
    let path = path.as_ref();
    let shown = path.display().to_string();
    let bytes = std::fs::read(path).map_err(|source| {
        if source.kind() == std::io::ErrorKind::NotFound {
            ProfileError::Missing(shown.clone())
        } else {
            ProfileError::Io {
                path: shown.clone(),
                source,
            }
        }
    })?;
    let profile: CalibrationProfile = serde_json::from_slice(&bytes).map_err(|e| ProfileError::Corrupt {
        path: shown.clone(),
        reason: e.to_string(),
    })?;
    profile.validate().map_err(|e| ProfileError::Corrupt {
        path: shown,
        reason: e.to_string(),
    })?;
    profile.check_spec(spec)?;
    Ok(profile)
}
