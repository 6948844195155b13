//! Corpus evaluation: detection metrics, caption similarity against
//! references, and JSON/CSV reports.
//!
//! An input reached consolidation iff it is predicted adversarial. Precision
//! and recall are absent when their denominators are zero.
//!
//! Corpora come in two shapes:
//!
//! * a synthetic JSON-lines corpus (see [`crate::synthetic`]), where labels
//!   and reference captions come from the world;
//! * a labels file, one JSON object per line with `path`, `is_attacked` and
//!   `references`; image paths are relative to the labels file.

use std::collections::BTreeMap;
use std::io::BufRead;
use std::path::{Path, PathBuf};

use futures::stream::{self, StreamExt};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clients::{ClientError, TextEmbedder};
use crate::detection::cosine_similarity;
use crate::pipeline::{Defender, PipelineError, PipelineResult, Route, StageStats};
use crate::raster::RasterImage;
use crate::synthetic::SyntheticCorpus;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("{predicted} predictions for {truth} labels")]
    LengthMismatch { predicted: usize, truth: usize },
    #[error("caption scoring needs at least one reference")]
    NoReferences,
    #[error("caption scoring: {0}")]
    Client(#[from] ClientError),
    #[error("corpus {path}: {reason}")]
    Corpus { path: String, reason: String },
    #[error("cannot write {path}: {source}")]
    Write {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct DetectionMetrics {
    pub true_positives: usize,
    pub false_positives: usize,
    pub true_negatives: usize,
    pub false_negatives: usize,
    pub accuracy: Option<f64>,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
}

impl DetectionMetrics {
    pub fn total(&self) -> usize {
        self.true_positives + self.false_positives + self.true_negatives + self.false_negatives
    }
}

fn ratio(num: usize, den: usize) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

/// Confusion counts over the positive label "adversarial".
pub fn detection_metrics(predicted: &[bool], truth: &[bool]) -> Result<DetectionMetrics, EvalError> {
    if predicted.len() != truth.len() {
        return Err(EvalError::LengthMismatch {
            predicted: predicted.len(),
            truth: truth.len(),
        });
    }
    let mut m = DetectionMetrics::default();
    for (&p, &t) in predicted.iter().zip(truth) {
        match (p, t) {
            (true, true) => m.true_positives += 1,
            (true, false) => m.false_positives += 1,
            (false, false) => m.true_negatives += 1,
            (false, true) => m.false_negatives += 1,
        }
    }
    m.accuracy = ratio(m.true_positives + m.true_negatives, m.total());
    m.precision = ratio(m.true_positives, m.true_positives + m.false_positives);
    m.recall = ratio(m.true_positives, m.true_positives + m.false_negatives);
    Ok(m)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreAggregation {
    #[default]
    Max,
    Mean,
}

/// Cosine similarity of `candidate` to the references, reduced by `aggregation`.
/// One embedder call covers the candidate and every reference.
pub async fn caption_score(
    candidate: &str,
    references: &[String],
    embedder: &dyn TextEmbedder,
    aggregation: ScoreAggregation,
) -> Result<f64, EvalError> {
    if references.is_empty() {
        return Err(EvalError::NoReferences);
    }
    let mut texts = Vec::with_capacity(references.len() + 1);
    texts.push(candidate.to_owned());
    texts.extend(references.iter().cloned());
    let vectors = embedder.embed_text(&texts).await?;
    if vectors.len() != texts.len() {
        return Err(ClientError::Protocol(format!(
            "embedder returned {} vectors for {} texts",
            vectors.len(),
            texts.len()
        ))
        .into());
    }
    let sims = vectors[1..]
        .iter()
        .map(|r| cosine_similarity(&vectors[0], r))
        .collect::<Result<Vec<f64>, _>>()
        .map_err(|e| ClientError::Protocol(e.to_string()))?;
    Ok(match aggregation {
        ScoreAggregation::Max => sims.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        ScoreAggregation::Mean => sims.iter().sum::<f64>() / sims.len() as f64,
    })
}

/// One labelled input. `image` holds the decode error for unreadable files.
#[derive(Debug, Clone)]
pub struct EvalEntry {
    pub id: String,
    pub image: Result<RasterImage, String>,
    pub is_attacked: bool,
    pub references: Vec<String>,
}

#[derive(Debug, Clone, Default)]
pub struct EvalCorpus {
    pub entries: Vec<EvalEntry>,
}

#[derive(Debug, Deserialize)]
struct LabelRecord {
    path: PathBuf,
    is_attacked: bool,
    #[serde(default)]
    references: Vec<String>,
}

impl EvalCorpus {
    pub fn from_synthetic(corpus: &SyntheticCorpus) -> Self {
        Self {
            entries: corpus
                .entries
                .iter()
                .map(|e| EvalEntry {
                    id: e.id.to_string(),
                    image: Ok(e.raster.clone()),
                    is_attacked: e.is_attacked,
                    references: vec![e.reference_caption()],
                })
                .collect(),
        }
    }

    /// Reads a labels file. Missing or undecodable images become entries
    /// whose `image` is an error.
    pub fn from_labels(path: impl AsRef<Path>) -> Result<Self, EvalError> {
        let path = path.as_ref();
        let shown = path.display().to_string();
        let corpus_err = |reason: String| EvalError::Corpus {
            path: shown.clone(),
            reason,
        };
        let file = std::fs::File::open(path).map_err(|e| corpus_err(e.to_string()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let mut entries = Vec::new();
        for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| corpus_err(e.to_string()))?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: LabelRecord =
                serde_json::from_str(&line).map_err(|e| corpus_err(format!("line {}: {e}", i + 1)))?;
            let image_path = base.join(&rec.path);
            entries.push(EvalEntry {
                id: rec.path.display().to_string(),
                image: RasterImage::open(&image_path).map_err(|e| e.to_string()),
                is_attacked: rec.is_attacked,
                references: rec.references,
            });
        }
        Ok(Self { entries })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub concurrency: usize,
    pub aggregation: ScoreAggregation,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            concurrency: 8,
            aggregation: ScoreAggregation::Max,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntryOutcome {
    pub id: String,
    pub is_attacked: bool,
    pub route: Route,
    pub early_score: f64,
    pub late_score: Option<f64>,
    pub caption_score: Option<f64>,
    pub final_text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Failure {
    pub id: String,
    pub stage: String,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub total: usize,
    pub route_counts: BTreeMap<String, usize>,
    /// Over inputs that completed the pipeline.
    pub detection: DetectionMetrics,
    pub mean_caption_score: Option<f64>,
    pub mean_stage_seconds: BTreeMap<String, f64>,
    pub mean_route_seconds: BTreeMap<String, f64>,
    pub failures: Vec<Failure>,
    pub entries: Vec<EntryOutcome>,
    pub config: serde_json::Value,
}

impl EvalReport {
    pub fn route_count(&self, route: Route) -> usize {
        self.route_counts.get(route.as_str()).copied().unwrap_or(0)
    }

    pub fn write_json(&self, path: impl AsRef<Path>) -> Result<(), EvalError> {
        let path = path.as_ref();
        let json = serde_json::to_vec_pretty(self).expect("report serializes");
        std::fs::write(path, json).map_err(|source| EvalError::Write {
            path: path.display().to_string(),
            source,
        })
    }

    /// One row per entry, failures included with an empty route.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<(), EvalError> {
        let path = path.as_ref();
        let err = |e: csv::Error| EvalError::Write {
            path: path.display().to_string(),
            source: e.into(),
        };
        let mut w = csv::Writer::from_path(path).map_err(err)?;
        w.write_record([
            "id",
            "is_attacked",
            "route",
            "early_score",
            "late_score",
            "caption_score",
            "error",
        ])
        .map_err(err)?;
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for e in &self.entries {
            w.write_record([
                e.id.clone(),
                e.is_attacked.to_string(),
                e.route.as_str().to_owned(),
                e.early_score.to_string(),
                opt(e.late_score),
                opt(e.caption_score),
                String::new(),
            ])
            .map_err(err)?;
        }
        for f in &self.failures {
            w.write_record([f.id.as_str(), "", "", "", "", "", f.error.as_str()])
                .map_err(err)?;
        }
        w.flush().map_err(|source| EvalError::Write {
            path: path.display().to_string(),
            source,
        })
    }

    /// Writes `report.json` and `summary.csv` into `dir`, creating it if needed.
    pub fn write_to_dir(&self, dir: impl AsRef<Path>) -> Result<(PathBuf, PathBuf), EvalError> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|source| EvalError::Write {
            path: dir.display().to_string(),
            source,
        })?;
        let json = dir.join("report.json");
        let csv = dir.join("summary.csv");
        self.write_json(&json)?;
        self.write_csv(&csv)?;
        Ok((json, csv))
    }
}

/// Defends every entry, then scores completed outputs against their
/// references. Per-entry errors land in the failures section.
pub async fn evaluate(
    corpus: &EvalCorpus,
    defender: &Defender,
    embedder: &dyn TextEmbedder,
    options: EvalOptions,
    config_echo: serde_json::Value,
) -> EvalReport {
    enum Outcome {
        Done(PipelineResult),
        Failed { stage: String, error: String },
    }
    let outcomes: Vec<Outcome> = stream::iter(&corpus.entries)
        .map(|entry| async move {
            match &entry.image {
                Err(e) => Outcome::Failed {
                    stage: "input".into(),
                    error: e.clone(),
                },
                Ok(img) => match defender.defend_default(img).await {
                    Ok(r) => Outcome::Done(r),
                    Err(e) => Outcome::Failed {
                        stage: e.stage().to_string(),
                        error: e.to_string(),
                    },
                },
            }
        })
        .buffered(options.concurrency.max(1))
        .collect()
        .await;

    let mut entries = Vec::new();
    let mut failures = Vec::new();
    let mut finished: Vec<Result<PipelineResult, PipelineError>> = Vec::new();
    let (mut predicted, mut truth) = (Vec::new(), Vec::new());
    for (entry, outcome) in corpus.entries.iter().zip(outcomes) {
        match outcome {
            Outcome::Failed { stage, error } => failures.push(Failure {
                id: entry.id.clone(),
                stage,
                error,
            }),
            Outcome::Done(r) => {
                let score = if entry.references.is_empty() {
                    None
                } else {
                    match caption_score(&r.final_text, &entry.references, embedder, options.aggregation).await
                    {
                        Ok(s) => Some(s),
                        Err(e) => {
                            log::warn!("entry {}: caption scoring failed: {e}", entry.id);
                            None
                        }
                    }
                };
                predicted.push(r.route.flagged());
                truth.push(entry.is_attacked);
                entries.push(EntryOutcome {
                    id: entry.id.clone(),
                    is_attacked: entry.is_attacked,
                    route: r.route,
                    early_score: r.early_score,
                    late_score: r.late_score,
                    caption_score: score,
                    final_text: r.final_text.clone(),
                });
                finished.push(Ok(r));
            }
        }
    }
    for f in &failures {
        log::warn!("entry {} failed at {}: {}", f.id, f.stage, f.error);
    }

    let stats = StageStats::from_results(&finished);
    let route_counts = Route::ALL
        .iter()
        .map(|&r| (r.as_str().to_owned(), stats.route_count(r)))
        .collect();
    let scores: Vec<f64> = entries.iter().filter_map(|e| e.caption_score).collect();
    EvalReport {
        total: corpus.len(),
        route_counts,
        detection: detection_metrics(&predicted, &truth).expect("equal lengths"),
        mean_caption_score: (!scores.is_empty()).then(|| scores.iter().sum::<f64>() / scores.len() as f64),
        mean_stage_seconds: stats.mean_stage_seconds,
        mean_route_seconds: stats.mean_route_seconds,
        failures,
        entries,
        config: config_echo,
    }
}
