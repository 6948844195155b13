//! Staged defense: early detection, response generation, late detection and
//! consolidation.
//!
//! 1. The original and its `K` views go to the vision encoder in one batch;
//!    the mean cosine distance is compared with `tau_early`.
//! 2. Early clean: only the original is captioned and returned.
//! 3. Otherwise all `K + 1` images are captioned concurrently, the responses
//!    embedded, and the maximum pairwise KL divergence compared with `tau_late`.
//! 4. Late clean: `r_0` is returned. Otherwise the consolidator LLM
//!    synthesizes the final caption. A consolidation failure is an error; the
//!    original caption is never substituted for it.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use futures::stream::{self, StreamExt};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::calibration::{CalibrationProfile, ProfileError};
use crate::clients::{CaptionRequest, ClientError, Clients, DEFAULT_INSTRUCTION};
use crate::consolidation::{consolidate, ConsolidationError, ParseError};
use crate::detection::{early_verdict, late_verdict, mean_transform_distance, MathError};
use crate::raster::RasterImage;
use crate::responses::{generate_responses, response_set_divergence, DivergenceError, ResponseSet};
use crate::transforms::{generate_transform_set, TransformError, TransformSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Route {
    EarlyClean,
    LateClean,
    Consolidated,
}

impl Route {
    pub const ALL: [Route; 3] = [Route::EarlyClean, Route::LateClean, Route::Consolidated];

    pub fn as_str(self) -> &'static str {
        match self {
            Route::EarlyClean => "early_clean",
            Route::LateClean => "late_clean",
            Route::Consolidated => "consolidated",
        }
    }

    /// Only inputs that reach consolidation count as detected attacks.
    pub fn flagged(self) -> bool {
        self == Route::Consolidated
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    EarlyDetection,
    ResponseGeneration,
    LateDetection,
    Consolidation,
}

impl Stage {
    pub const ALL: [Stage; 4] = [
        Stage::EarlyDetection,
        Stage::ResponseGeneration,
        Stage::LateDetection,
        Stage::Consolidation,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Stage::EarlyDetection => "early_detection",
            Stage::ResponseGeneration => "response_generation",
            Stage::LateDetection => "late_detection",
            Stage::Consolidation => "consolidation",
        }
    }
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

mod secs {
    use std::time::Duration;

    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(d: &Option<Duration>, s: S) -> Result<S::Ok, S::Error> {
        match d {
            Some(d) => s.serialize_some(&d.as_secs_f64()),
            None => s.serialize_none(),
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<Duration>, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.map(Duration::from_secs_f64))
    }
}

/// Wall-clock time per stage, in seconds when serialized. Stages a route
/// skipped are absent.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct StageTimings {
    #[serde(with = "secs", default, skip_serializing_if = "Option::is_none")]
    pub early_detection: Option<Duration>,
    #[serde(with = "secs", default, skip_serializing_if = "Option::is_none")]
    pub response_generation: Option<Duration>,
    #[serde(with = "secs", default, skip_serializing_if = "Option::is_none")]
    pub late_detection: Option<Duration>,
    #[serde(with = "secs", default, skip_serializing_if = "Option::is_none")]
    pub consolidation: Option<Duration>,
}

impl StageTimings {
    pub fn get(&self, stage: Stage) -> Option<Duration> {
        match stage {
            Stage::EarlyDetection => self.early_detection,
            Stage::ResponseGeneration => self.response_generation,
            Stage::LateDetection => self.late_detection,
            Stage::Consolidation => self.consolidation,
        }
    }

    pub fn total(&self) -> Duration {
        Stage::ALL.iter().filter_map(|s| self.get(*s)).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineResult {
    pub final_text: String,
    pub route: Route,
    pub early_score: f64,
    pub tau_early: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub late_score: Option<f64>,
    pub tau_late: f64,
    pub stage_timings: StageTimings,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub responses: Option<ResponseSet>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub explanation: Option<String>,
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("{stage}: {source}")]
    Client {
        stage: Stage,
        #[source]
        source: ClientError,
    },
    #[error("{stage}: {source}")]
    Math {
        stage: Stage,
        #[source]
        source: MathError,
    },
    #[error("early_detection: {0}")]
    Transform(#[from] TransformError),
    #[error("early_detection: encoder returned {got} embeddings for {expected} images")]
    BatchSize { expected: usize, got: usize },
    #[error("consolidation failed ({last_error}); refusing to fall back to the original response")]
    ConsolidationFailed {
        last_error: ParseError,
        last_raw: String,
    },
}

impl PipelineError {
    pub fn stage(&self) -> Stage {
        match self {
            PipelineError::Client { stage, .. } | PipelineError::Math { stage, .. } => *stage,
            PipelineError::Transform(_) | PipelineError::BatchSize { .. } => Stage::EarlyDetection,
            PipelineError::ConsolidationFailed { .. } => Stage::Consolidation,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Instruction for every caption query when the caller supplies none.
    pub instruction: String,
    /// Include `r_0` in the late-stage similarity matrix (`n = K + 1`).
    pub include_original_in_late: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            instruction: DEFAULT_INSTRUCTION.to_owned(),
            include_original_in_late: true,
        }
    }
}

/// Route counters and per-stage latency sums, rendered in the Prometheus
/// text exposition format.
#[derive(Debug, Default)]
pub struct Metrics {
    routes: [AtomicU64; 3],
    errors: [AtomicU64; 4],
    stage_nanos: [AtomicU64; 4],
    stage_count: [AtomicU64; 4],
}

fn route_slot(r: Route) -> usize {
    Route::ALL.iter().position(|x| *x == r).expect("listed")
}

fn stage_slot(s: Stage) -> usize {
    Stage::ALL.iter().position(|x| *x == s).expect("listed")
}

impl Metrics {
    fn record(&self, result: &Result<PipelineResult, PipelineError>) {
        match result {
            Ok(r) => {
                self.routes[route_slot(r.route)].fetch_add(1, Ordering::Relaxed);
                for s in Stage::ALL {
                    if let Some(d) = r.stage_timings.get(s) {
                        self.stage_nanos[stage_slot(s)].fetch_add(d.as_nanos() as u64, Ordering::Relaxed);
                        self.stage_count[stage_slot(s)].fetch_add(1, Ordering::Relaxed);
                    }
                }
            }
            Err(e) => {
                self.errors[stage_slot(e.stage())].fetch_add(1, Ordering::Relaxed);
            }
        }
    }

    pub fn route_count(&self, route: Route) -> u64 {
        self.routes[route_slot(route)].load(Ordering::Relaxed)
    }

    pub fn error_count(&self, stage: Stage) -> u64 {
        self.errors[stage_slot(stage)].load(Ordering::Relaxed)
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        out.push_str("# HELP vlm_guard_route_total Defended inputs by final route.\n");
        out.push_str("# TYPE vlm_guard_route_total counter\n");
        for r in Route::ALL {
            out.push_str(&format!(
                "vlm_guard_route_total{{route=\"{}\"}} {}\n",
                r.as_str(),
                self.route_count(r)
            ));
        }
        out.push_str("# HELP vlm_guard_errors_total Failed defenses by failing stage.\n");
        out.push_str("# TYPE vlm_guard_errors_total counter\n");
        for s in Stage::ALL {
            out.push_str(&format!(
                "vlm_guard_errors_total{{stage=\"{}\"}} {}\n",
                s.as_str(),
                self.error_count(s)
            ));
        }
        out.push_str("# HELP vlm_guard_stage_seconds Wall-clock time spent per stage.\n");
        out.push_str("# TYPE vlm_guard_stage_seconds summary\n");
        for s in Stage::ALL {
            let i = stage_slot(s);
            let secs = self.stage_nanos[i].load(Ordering::Relaxed) as f64 / 1e9;
            out.push_str(&format!(
                "vlm_guard_stage_seconds_sum{{stage=\"{}\"}} {secs}\n",
                s.as_str()
            ));
            out.push_str(&format!(
                "vlm_guard_stage_seconds_count{{stage=\"{}\"}} {}\n",
                s.as_str(),
                self.stage_count[i].load(Ordering::Relaxed)
            ));
        }
        out
    }
}

/// Per-route counts and mean timings for a corpus run.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StageStats {
    pub total: usize,
    pub early_clean: usize,
    pub late_clean: usize,
    pub consolidated: usize,
    pub failures: usize,
    /// Mean seconds per stage over the inputs that ran it.
    pub mean_stage_seconds: std::collections::BTreeMap<String, f64>,
    /// Mean end-to-end seconds per route.
    pub mean_route_seconds: std::collections::BTreeMap<String, f64>,
}

impl StageStats {
    pub fn from_results(results: &[Result<PipelineResult, PipelineError>]) -> Self {
        let mut stats = StageStats {
            total: results.len(),
            ..Default::default()
        };
        let mut stage_acc = std::collections::BTreeMap::<String, (f64, usize)>::new();
        let mut route_acc = std::collections::BTreeMap::<String, (f64, usize)>::new();
        for r in results {
            match r {
                Ok(r) => {
                    match r.route {
                        Route::EarlyClean => stats.early_clean += 1,
                        Route::LateClean => stats.late_clean += 1,
                        Route::Consolidated => stats.consolidated += 1,
                    }
                    for s in Stage::ALL {
                        if let Some(d) = r.stage_timings.get(s) {
                            let e = stage_acc.entry(s.as_str().to_owned()).or_default();
                            e.0 += d.as_secs_f64();
                            e.1 += 1;
                        }
                    }
                    let e = route_acc.entry(r.route.as_str().to_owned()).or_default();
                    e.0 += r.stage_timings.total().as_secs_f64();
                    e.1 += 1;
                }
                Err(_) => stats.failures += 1,
            }
        }
        let mean = |m: std::collections::BTreeMap<String, (f64, usize)>| {
            m.into_iter().map(|(k, (sum, n))| (k, sum / n as f64)).collect()
        };
        stats.mean_stage_seconds = mean(stage_acc);
        stats.mean_route_seconds = mean(route_acc);
        stats
    }

    pub fn route_count(&self, route: Route) -> usize {
        match route {
            Route::EarlyClean => self.early_clean,
            Route::LateClean => self.late_clean,
            Route::Consolidated => self.consolidated,
        }
    }
}

pub struct CorpusRun {
    pub results: Vec<Result<PipelineResult, PipelineError>>,
    pub stats: StageStats,
}

/// The configured pipeline. Cheap to share behind an `Arc`; `defend` may run
/// concurrently for different images.
pub struct Defender {
    clients: Clients,
    profile: CalibrationProfile,
    spec: TransformSpec,
    config: PipelineConfig,
    metrics: Arc<Metrics>,
}

impl Defender {
    /// Fails when the profile was calibrated under a different transform spec.
    pub fn new(
        clients: Clients,
        profile: CalibrationProfile,
        spec: TransformSpec,
        config: PipelineConfig,
    ) -> Result<Self, ProfileError> {
        profile.validate()?;
        profile.check_spec(&spec)?;
        spec.validate()
            .map_err(|e| ProfileError::Invalid(e.to_string()))?;
        Ok(Self {
            clients,
            profile,
            spec,
            config,
            metrics: Arc::new(Metrics::default()),
        })
    }

    pub fn profile(&self) -> &CalibrationProfile {
        &self.profile
    }

    pub fn spec(&self) -> &TransformSpec {
        &self.spec
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.config
    }

    pub fn metrics(&self) -> &Arc<Metrics> {
        &self.metrics
    }

    /// Defends one image with the configured default instruction.
    pub async fn defend_default(&self, image: &RasterImage) -> Result<PipelineResult, PipelineError> {
        let instruction = self.config.instruction.clone();
        self.defend(image, &instruction).await
    }

    pub async fn defend(
        &self,
        image: &RasterImage,
        instruction: &str,
    ) -> Result<PipelineResult, PipelineError> {
        let result = self.run(image, instruction).await;
        self.metrics.record(&result);
        result
    }

    async fn run(&self, image: &RasterImage, instruction: &str) -> Result<PipelineResult, PipelineError> {
        let mut timings = StageTimings::default();
        let client_err = |stage| move |source| PipelineError::Client { stage, source };

        let started = Instant::now();
        let views = generate_transform_set(image, &self.spec)?;
        let mut batch = Vec::with_capacity(views.len() + 1);
        batch.push(image.clone());
        batch.extend(views.iter().cloned());
        let embeddings = self
            .clients
            .encoder
            .encode_image_batch(&batch)
            .await
            .map_err(client_err(Stage::EarlyDetection))?;
        if embeddings.len() != batch.len() {
            return Err(PipelineError::BatchSize {
                expected: batch.len(),
                got: embeddings.len(),
            });
        }
        let distance = mean_transform_distance(&embeddings[0], &embeddings[1..]).map_err(|source| {
            PipelineError::Math {
                stage: Stage::EarlyDetection,
                source,
            }
        })?;
        let early = early_verdict(distance, self.profile.tau_early);
        timings.early_detection = Some(started.elapsed());

        let started = Instant::now();
        if early.is_clean() {
            let request = CaptionRequest::new(image.clone(), instruction)
                .map_err(client_err(Stage::ResponseGeneration))?;
            let text = self
                .clients
                .captioner
                .caption(&request)
                .await
                .map_err(client_err(Stage::ResponseGeneration))?;
            timings.response_generation = Some(started.elapsed());
            return Ok(PipelineResult {
                final_text: text,
                route: Route::EarlyClean,
                early_score: distance,
                tau_early: self.profile.tau_early,
                late_score: None,
                tau_late: self.profile.tau_late,
                stage_timings: timings,
                responses: None,
                explanation: None,
            });
        }

        let responses = generate_responses(self.clients.captioner.as_ref(), image, &views, instruction)
            .await
            .map_err(client_err(Stage::ResponseGeneration))?;
        timings.response_generation = Some(started.elapsed());

        let started = Instant::now();
        let divergences = response_set_divergence(
            &responses,
            self.clients.embedder.as_ref(),
            self.config.include_original_in_late,
        )
        .await
        .map_err(|e| match e {
            DivergenceError::Client(source) => PipelineError::Client {
                stage: Stage::LateDetection,
                source,
            },
            DivergenceError::Math(source) => PipelineError::Math {
                stage: Stage::LateDetection,
                source,
            },
        })?;
        let late = late_verdict(&divergences, self.profile.tau_late);
        timings.late_detection = Some(started.elapsed());

        let mut result = PipelineResult {
            final_text: responses.original().to_owned(),
            route: Route::LateClean,
            early_score: distance,
            tau_early: self.profile.tau_early,
            late_score: Some(late.score),
            tau_late: self.profile.tau_late,
            stage_timings: timings,
            responses: None,
            explanation: None,
        };
        if late.is_clean() {
            result.responses = Some(responses);
            return Ok(result);
        }

        let started = Instant::now();
        let consolidated = consolidate(&responses, self.clients.llm.as_ref())
            .await
            .map_err(|e| match e {
                ConsolidationError::Client(source) => PipelineError::Client {
                    stage: Stage::Consolidation,
                    source,
                },
                ConsolidationError::Failed { last_error, last_raw } => {
                    PipelineError::ConsolidationFailed { last_error, last_raw }
                }
            })?;
        result.stage_timings.consolidation = Some(started.elapsed());
        result.final_text = consolidated.final_caption;
        result.explanation = Some(consolidated.explanation);
        result.route = Route::Consolidated;
        result.responses = Some(responses);
        Ok(result)
    }

    /// Defends every image with at most `concurrency` in flight. Per-image
    /// errors are collected; results keep input order.
    pub async fn defend_corpus(&self, images: &[RasterImage], concurrency: usize) -> CorpusRun {
        let results: Vec<_> = stream::iter(images)
            .map(|img| self.defend_default(img))
            .buffered(concurrency.max(1))
            .collect()
            .await;
        let stats = StageStats::from_results(&results);
        CorpusRun { results, stats }
    }
}
