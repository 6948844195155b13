//! Deterministic stand-ins for the model clients, with ground-truth attack
//! labels.
//!
//! Each corpus entry is a 64x64 image of seeded noise, so every crop or mask
//! of it is recognizable by content. [`SyntheticWorld`] indexes the original
//! and all `K` views of every entry under one [`TransformSpec`] and answers
//! model queries for any raster it recognizes.
//!
//! Image embeddings (dimension [`IMAGE_DIM`]):
//!
//! * base: unit Gaussian direction seeded by the sorted scene objects
//! * every view: `+ jitter`, an isotropic Gaussian with expected norm `clean_jitter`
//! * attacked original: `+ epsilon * a`, where `a` is a unit attack direction per entry
//! * attacked view `k`: `+ view_offset_scale * epsilon * u_k`, a unit direction per view
//!
//! Captions: clean views describe the scene objects; an attacked original
//! returns its target caption; `round(corruption_rate * K)` attacked views
//! (seeded choice without replacement) append fragments of the target.
//!
//! Text embeddings are bag-of-token counts hashed into [`TEXT_DIM`] buckets,
//! so texts without shared tokens are orthogonal up to bucket collisions.

use std::collections::HashMap;
use std::io::{BufRead, Write};
use std::sync::Arc;

use async_trait::async_trait;
use base64::Engine;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::clients::{
    check_nonempty_images, check_texts, CaptionRequest, Captioner, ClientError, Clients, LlmClient,
    TextEmbedder, VisionEncoder,
};
use crate::detection::EmbeddingVector;
use crate::raster::RasterImage;
use crate::responses::ResponseOrigin;
use crate::transforms::{
    generate_transform_set, mask_positions, TransformError, TransformRng, TransformSpec,
};

/// Which view of an entry a query refers to.
pub type View = ResponseOrigin;

pub const IMAGE_SIZE: usize = 64;
pub const IMAGE_DIM: usize = 64;
pub const TEXT_DIM: usize = 1024;

/// Smallest attack strength for which every attacked entry is separated from
/// the clean calibration percentile under the default parameters.
pub const SEPARATION_EPSILON_MIN: f64 = 0.1;

const CORPUS_FORMAT: &str = "vlm-guard/synthetic-corpus/v1";

const OBJECTS: &[&str] = &[
    "dog",
    "frisbee",
    "bench",
    "tree",
    "bicycle",
    "umbrella",
    "cat",
    "sofa",
    "horse",
    "fence",
    "boat",
    "river",
    "kite",
    "beach",
    "bus",
    "clock",
    "tower",
    "pizza",
    "giraffe",
    "surfboard",
    "laptop",
    "train",
    "motorcycle",
    "elephant",
];

const TARGETS: &[&str] = &[
    "a red fire hydrant on a sidewalk",
    "a coconut beauty product on a shelf",
    "two men playing chess in a library",
    "a plate of sushi beside chopsticks",
    "an orange traffic cone near roadworks",
    "a violin resting on sheet music",
    "a snowy mountain peak under clouds",
    "a vintage typewriter with blank paper",
    "a bowl of ramen with boiled eggs",
    "a lighthouse glowing at dusk",
];

/// Words shared by template captions and targets; never counted as distinctive.
pub const FUNCTION_WORDS: &[&str] = &[
    "a", "an", "the", "with", "and", "of", "in", "on", "at", "to", "next", "photo", "image", "showing",
    "scene", "outdoors", "two", "under", "near", "beside",
];

const PREFIXES: &[&str] = &["", "a photo of ", "an image showing "];
const SUFFIXES: &[&str] = &["", " in the scene", " outdoors"];

#[derive(Debug, Error)]
pub enum SyntheticError {
    #[error("entry {id}: attacked entries need epsilon > 0 and a target caption")]
    AttackWithoutStrength { id: u64 },
    #[error("entry {id}: clean entries cannot carry an attack strength or target")]
    CleanWithAttack { id: u64 },
    #[error("entry {id}: scene needs at least one object")]
    NoObjects { id: u64 },
    #[error("epsilon must be finite and non-negative, got {0}")]
    Epsilon(f64),
    #[error("corpus line {line}: {reason}")]
    Format { line: usize, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Transform(#[from] TransformError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticImage {
    pub id: u64,
    pub raster: RasterImage,
    pub scene_objects: Vec<String>,
    pub is_attacked: bool,
    pub attack_strength: f64,
    pub target_caption: Option<String>,
}

impl SyntheticImage {
    pub fn validate(&self) -> Result<(), SyntheticError> {
        if self.scene_objects.is_empty() {
            return Err(SyntheticError::NoObjects { id: self.id });
        }
        if self.is_attacked {
            if self.attack_strength.is_nan() || self.attack_strength <= 0.0 || self.target_caption.is_none() {
                return Err(SyntheticError::AttackWithoutStrength { id: self.id });
            }
        } else if self.attack_strength != 0.0 || self.target_caption.is_some() {
            return Err(SyntheticError::CleanWithAttack { id: self.id });
        }
        Ok(())
    }

    /// Reference caption: the scene template without phrasing variation.
    pub fn reference_caption(&self) -> String {
        scene_caption(&self.scene_objects, "", "")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticCorpus {
    pub seed: u64,
    pub entries: Vec<SyntheticImage>,
}

/// Stable 64-bit digest of a labelled tuple.
fn digest(parts: &[&[u8]]) -> u64 {
    let mut h = Sha256::new();
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p);
    }
    u64::from_le_bytes(h.finalize()[..8].try_into().expect("8 bytes"))
}

fn rng_for(parts: &[&[u8]]) -> TransformRng {
    TransformRng::seed_from_u64(digest(parts))
}

fn noise_raster(seed: u64, id: u64) -> RasterImage {
    let mut rng = rng_for(&[b"pixels", &seed.to_le_bytes(), &id.to_le_bytes()]);
    let mut pixels = vec![0u8; IMAGE_SIZE * IMAGE_SIZE * 3];
    rng.fill(&mut pixels[..]);
    // keep every pixel distinguishable from a masked (black) one
    for p in pixels.chunks_mut(3) {
        p[0] |= 1;
    }
    RasterImage::new(IMAGE_SIZE, IMAGE_SIZE, pixels).expect("fixed size")
}

/// Deterministic corpus; entries are shuffled so clean and attacked interleave.
pub fn make_corpus(
    n_clean: usize,
    n_attacked: usize,
    epsilon: f64,
    seed: u64,
) -> Result<SyntheticCorpus, SyntheticError> {
    if !(epsilon.is_finite() && epsilon >= 0.0) {
        return Err(SyntheticError::Epsilon(epsilon));
    }
    if n_attacked > 0 && epsilon == 0.0 {
        return Err(SyntheticError::Epsilon(epsilon));
    }
    let mut rng = rng_for(&[b"corpus", &seed.to_le_bytes()]);
    let mut labels: Vec<bool> = std::iter::repeat_n(false, n_clean)
        .chain(std::iter::repeat_n(true, n_attacked))
        .collect();
    labels.shuffle(&mut rng);
    let entries = labels
        .into_iter()
        .enumerate()
        .map(|(i, attacked)| {
            let id = i as u64;
            let n_objects = rng.random_range(1..=3);
            let mut pool: Vec<&str> = OBJECTS.to_vec();
            let (chosen, _) = pool.partial_shuffle(&mut rng, n_objects);
            let scene_objects: Vec<String> = chosen.iter().map(|s| s.to_string()).collect();
            let target = TARGETS[rng.random_range(0..TARGETS.len())];
            SyntheticImage {
                id,
                raster: noise_raster(seed, id),
                scene_objects,
                is_attacked: attacked,
                attack_strength: if attacked { epsilon } else { 0.0 },
                target_caption: attacked.then(|| target.to_owned()),
            }
        })
        .collect();
    Ok(SyntheticCorpus { seed, entries })
}

#[derive(Serialize, Deserialize)]
struct CorpusHeader {
    format: String,
    seed: u64,
}

#[derive(Serialize, Deserialize)]
struct EntryRecord {
    id: u64,
    width: usize,
    height: usize,
    pixels_b64: String,
    scene_objects: Vec<String>,
    is_attacked: bool,
    attack_strength: f64,
    #[serde(default)]
    target_caption: Option<String>,
}

impl SyntheticCorpus {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// JSON-lines: a header line, then one entry per line.
    pub fn write_jsonl(&self, mut out: impl Write) -> Result<(), SyntheticError> {
        let header = CorpusHeader {
            format: CORPUS_FORMAT.into(),
            seed: self.seed,
        };
        writeln!(out, "{}", serde_json::to_string(&header).expect("serializable"))?;
        let b64 = base64::engine::general_purpose::STANDARD;
        for e in &self.entries {
            let rec = EntryRecord {
                id: e.id,
                width: e.raster.width(),
                height: e.raster.height(),
                pixels_b64: b64.encode(e.raster.as_bytes()),
                scene_objects: e.scene_objects.clone(),
                is_attacked: e.is_attacked,
                attack_strength: e.attack_strength,
                target_caption: e.target_caption.clone(),
            };
            writeln!(out, "{}", serde_json::to_string(&rec).expect("serializable"))?;
        }
        Ok(())
    }

    pub fn read_jsonl(input: impl BufRead) -> Result<Self, SyntheticError> {
        let mut lines = input.lines().enumerate();
        let (_, first) = lines.next().ok_or(SyntheticError::Format {
            line: 1,
            reason: "empty corpus file".into(),
        })?;
        let header: CorpusHeader = serde_json::from_str(&first?).map_err(|e| SyntheticError::Format {
            line: 1,
            reason: e.to_string(),
        })?;
        if header.format != CORPUS_FORMAT {
            return Err(SyntheticError::Format {
                line: 1,
                reason: format!("unsupported format {:?}", header.format),
            });
        }
        let b64 = base64::engine::general_purpose::STANDARD;
        let mut entries = Vec::new();
        for (i, line) in lines {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let bad = |reason: String| SyntheticError::Format { line: i + 1, reason };
            let rec: EntryRecord = serde_json::from_str(&line).map_err(|e| bad(e.to_string()))?;
            let pixels = b64.decode(&rec.pixels_b64).map_err(|e| bad(e.to_string()))?;
            let raster = RasterImage::new(rec.width, rec.height, pixels).map_err(|e| bad(e.to_string()))?;
            let entry = SyntheticImage {
                id: rec.id,
                raster,
                scene_objects: rec.scene_objects,
                is_attacked: rec.is_attacked,
                attack_strength: rec.attack_strength,
                target_caption: rec.target_caption,
            };
            entry.validate().map_err(|e| bad(e.to_string()))?;
            entries.push(entry);
        }
        Ok(Self {
            seed: header.seed,
            entries,
        })
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<(), SyntheticError> {
        let file = std::fs::File::create(path)?;
        let mut w = std::io::BufWriter::new(file);
        self.write_jsonl(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self, SyntheticError> {
        Self::read_jsonl(std::io::BufReader::new(std::fs::File::open(path)?))
    }
}

/// Knobs of the synthetic oracle. The defaults define it; tests do not tune them.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldParams {
    pub clean_jitter: f64,
    pub view_offset_scale: f64,
    pub corruption_rate: f64,
    /// Vary caption phrasing across views of the same scene.
    pub caption_variation: bool,
}

impl Default for WorldParams {
    fn default() -> Self {
        Self {
            clean_jitter: 0.02,
            view_offset_scale: 1.0,
            corruption_rate: 0.2,
            caption_variation: true,
        }
    }
}

fn gaussian(rng: &mut TransformRng, dim: usize) -> Vec<f64> {
    (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

fn unit(mut v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter_mut().for_each(|x| *x /= n);
    v
}

fn view_tag(view: View) -> [u8; 9] {
    let mut tag = [0u8; 9];
    if let View::Transform(k) = view {
        tag[0] = 1;
        tag[1..].copy_from_slice(&(k as u64).to_le_bytes());
    }
    tag
}

fn with_article(word: &str) -> String {
    let article = if word.starts_with(['a', 'e', 'i', 'o', 'u']) {
        "an"
    } else {
        "a"
    };
    format!("{article} {word}")
}

fn scene_caption(objects: &[String], prefix: &str, suffix: &str) -> String {
    let mut caption = String::from(prefix);
    for (i, o) in objects.iter().enumerate() {
        match i {
            0 => {}
            1 => caption.push_str(" with "),
            _ => caption.push_str(" and "),
        }
        caption.push_str(&with_article(o));
    }
    caption.push_str(suffix);
    caption
}

/// Lowercased alphanumeric tokens.
pub fn tokens(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// Tokens of `text` that are not [`FUNCTION_WORDS`].
pub fn distinctive_tokens(text: &str) -> Vec<String> {
    tokens(text)
        .into_iter()
        .filter(|t| !FUNCTION_WORDS.contains(&t.as_str()))
        .collect()
}

/// Count weight of a [`FUNCTION_WORDS`] token in [`synthetic_embed`].
pub const FUNCTION_WORD_WEIGHT: f64 = 0.2;

/// Bag-of-tokens count vector hashed into [`TEXT_DIM`] buckets. Function
/// words count [`FUNCTION_WORD_WEIGHT`] each, every other token counts 1.
pub fn synthetic_embed(text: &str) -> EmbeddingVector {
    let mut v = vec![0.0; TEXT_DIM];
    let toks = tokens(text);
    if toks.is_empty() {
        v[(digest(&[b"token", text.as_bytes()]) % TEXT_DIM as u64) as usize] = 1.0;
    }
    for t in toks {
        let weight = if FUNCTION_WORDS.contains(&t.as_str()) {
            FUNCTION_WORD_WEIGHT
        } else {
            1.0
        };
        v[(digest(&[b"token", t.as_bytes()]) % TEXT_DIM as u64) as usize] += weight;
    }
    EmbeddingVector::new(v).expect("finite counts")
}

/// The oracle: a corpus queried under one transform spec, with the raster of
/// every original and view indexed.
pub struct SyntheticWorld {
    seed: u64,
    params: WorldParams,
    spec: TransformSpec,
    entries: Vec<SyntheticImage>,
    index: HashMap<[u8; 32], (usize, View)>,
}

impl std::fmt::Debug for SyntheticWorld {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SyntheticWorld")
            .field("seed", &self.seed)
            .field("entries", &self.entries.len())
            .field("spec", &self.spec)
            .finish()
    }
}

fn raster_key(img: &RasterImage) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update((img.width() as u64).to_le_bytes());
    h.update((img.height() as u64).to_le_bytes());
    h.update(img.as_bytes());
    h.finalize().into()
}

impl SyntheticWorld {
    pub fn new(
        corpus: SyntheticCorpus,
        spec: TransformSpec,
        params: WorldParams,
    ) -> Result<Self, SyntheticError> {
        spec.validate()?;
        let mut index = HashMap::with_capacity(corpus.entries.len() * (spec.count + 1));
        for (i, e) in corpus.entries.iter().enumerate() {
            e.validate()?;
            index.insert(raster_key(&e.raster), (i, View::Original));
            for (k, v) in generate_transform_set(&e.raster, &spec)?.iter().enumerate() {
                index.entry(raster_key(v)).or_insert((i, View::Transform(k)));
            }
        }
        Ok(Self {
            seed: corpus.seed,
            params,
            spec,
            entries: corpus.entries,
            index,
        })
    }

    pub fn entries(&self) -> &[SyntheticImage] {
        &self.entries
    }

    pub fn spec(&self) -> &TransformSpec {
        &self.spec
    }

    pub fn params(&self) -> &WorldParams {
        &self.params
    }

    /// Identifies which entry and view a raster shows.
    pub fn resolve(&self, raster: &RasterImage) -> Option<(&SyntheticImage, View)> {
        self.index
            .get(&raster_key(raster))
            .map(|&(i, view)| (&self.entries[i], view))
    }

    fn base_direction(&self, img: &SyntheticImage) -> Vec<f64> {
        let mut objects = img.scene_objects.clone();
        objects.sort();
        let joined = objects.join("\u{1f}");
        unit(gaussian(
            &mut rng_for(&[b"base", &self.seed.to_le_bytes(), joined.as_bytes()]),
            IMAGE_DIM,
        ))
    }

    pub fn synthetic_encode(&self, img: &SyntheticImage, view: View) -> EmbeddingVector {
        let id = img.id.to_le_bytes();
        let seed = self.seed.to_le_bytes();
        let mut v = self.base_direction(img);
        let jitter_scale = self.params.clean_jitter / (IMAGE_DIM as f64).sqrt();
        let jitter = gaussian(&mut rng_for(&[b"jitter", &seed, &id, &view_tag(view)]), IMAGE_DIM);
        for (x, j) in v.iter_mut().zip(jitter) {
            *x += jitter_scale * j;
        }
        if img.is_attacked {
            let eps = img.attack_strength;
            let (direction, magnitude) = match view {
                View::Original => (
                    unit(gaussian(&mut rng_for(&[b"attack", &seed, &id]), IMAGE_DIM)),
                    eps,
                ),
                View::Transform(_) => (
                    unit(gaussian(
                        &mut rng_for(&[b"offset", &seed, &id, &view_tag(view)]),
                        IMAGE_DIM,
                    )),
                    self.params.view_offset_scale * eps,
                ),
            };
            for (x, d) in v.iter_mut().zip(direction) {
                *x += magnitude * d;
            }
        }
        EmbeddingVector::new(v).expect("finite")
    }

    /// Transform indices whose captions carry target fragments for an attacked entry.
    pub fn corrupted_views(&self, img: &SyntheticImage) -> Vec<usize> {
        if !img.is_attacked {
            return Vec::new();
        }
        let mut rng = rng_for(&[b"corrupt", &self.seed.to_le_bytes(), &img.id.to_le_bytes()]);
        let mut picked = mask_positions(
            self.spec.count,
            self.params.corruption_rate.min(0.999_999),
            &mut rng,
        )
        .expect("rate in range");
        picked.sort_unstable();
        picked
    }

    fn phrased_scene_caption(&self, img: &SyntheticImage, view: View) -> String {
        if !self.params.caption_variation {
            return img.reference_caption();
        }
        let mut rng = rng_for(&[
            b"phrase",
            &self.seed.to_le_bytes(),
            &img.id.to_le_bytes(),
            &view_tag(view),
        ]);
        let prefix = PREFIXES[rng.random_range(0..PREFIXES.len())];
        let suffix = SUFFIXES[rng.random_range(0..SUFFIXES.len())];
        scene_caption(&img.scene_objects, prefix, suffix)
    }

    pub fn synthetic_caption(&self, img: &SyntheticImage, view: View) -> String {
        let target = match (&img.target_caption, view) {
            (Some(t), View::Original) => return t.clone(),
            (Some(t), View::Transform(k)) if self.corrupted_views(img).contains(&k) => t,
            _ => return self.phrased_scene_caption(img, view),
        };
        let words: Vec<&str> = target.split_whitespace().collect();
        let fragment = words[..words.len().div_ceil(2)].join(" ");
        format!("{} next to {fragment}", self.phrased_scene_caption(img, view))
    }

    fn lookup(&self, raster: &RasterImage) -> Result<(&SyntheticImage, View), ClientError> {
        self.resolve(raster).ok_or_else(|| {
            ClientError::Protocol(format!(
                "unknown {}x{} image: not part of the synthetic corpus under this transform spec",
                raster.width(),
                raster.height()
            ))
        })
    }
}

/// Shares one world across the three synthetic client roles.
#[derive(Debug, Clone)]
pub struct SyntheticClient(pub Arc<SyntheticWorld>);

#[async_trait]
impl VisionEncoder for SyntheticClient {
    async fn encode_image_batch(&self, images: &[RasterImage]) -> Result<Vec<EmbeddingVector>, ClientError> {
        check_nonempty_images(images)?;
        images
            .iter()
            .map(|r| {
                self.0
                    .lookup(r)
                    .map(|(img, view)| self.0.synthetic_encode(img, view))
            })
            .collect()
    }
}

#[async_trait]
impl Captioner for SyntheticClient {
    async fn caption(&self, request: &CaptionRequest) -> Result<String, ClientError> {
        let (img, view) = self.0.lookup(&request.image)?;
        Ok(self.0.synthetic_caption(img, view))
    }
}

/// Stateless text embedder backed by [`synthetic_embed`].
#[derive(Debug, Clone, Copy, Default)]
pub struct HashingEmbedder;

#[async_trait]
impl TextEmbedder for HashingEmbedder {
    async fn embed_text(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>, ClientError> {
        check_texts(texts)?;
        Ok(texts.iter().map(|t| synthetic_embed(t)).collect())
    }
}

#[async_trait]
impl TextEmbedder for SyntheticClient {
    async fn embed_text(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>, ClientError> {
        HashingEmbedder.embed_text(texts).await
    }
}

impl SyntheticWorld {
    /// Model clients answering from this world, with `llm` as the consolidator.
    pub fn clients(self: &Arc<Self>, llm: Arc<dyn LlmClient>) -> Clients {
        let c = SyntheticClient(Arc::clone(self));
        Clients {
            encoder: Arc::new(c.clone()),
            captioner: Arc::new(c.clone()),
            embedder: Arc::new(c),
            llm,
        }
    }
}

/// Offline consolidator double: answers with the first transform response
/// found in the prompt. It performs no consolidation of its own.
#[derive(Debug, Clone, Copy, Default)]
pub struct FirstViewLlm;

#[async_trait]
impl LlmClient for FirstViewLlm {
    async fn complete(&self, prompt: &str) -> Result<String, ClientError> {
        let first = prompt
            .split_once("The crops captions are:\n1. ")
            .and_then(|(_, rest)| rest.lines().next())
            .ok_or_else(|| ClientError::Protocol("prompt lists no transform responses".into()))?;
        Ok(crate::consolidation::render_consolidation(
            first,
            "offline double: echoed the first transform response",
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detection::{cosine_similarity, mean_transform_distance};

    fn world(n_clean: usize, n_attacked: usize, eps: f64) -> SyntheticWorld {
        SyntheticWorld::new(
            make_corpus(n_clean, n_attacked, eps, 42).unwrap(),
            TransformSpec::default(),
            WorldParams::default(),
        )
        .unwrap()
    }

    #[test]
    fn corpus_shapes() {
        let c = make_corpus(10, 0, 0.0, 1).unwrap();
        assert_eq!(c.len(), 10);
        assert!(c
            .entries
            .iter()
            .all(|e| !e.is_attacked && e.target_caption.is_none()));
        let c = make_corpus(0, 5, 0.5, 1).unwrap();
        assert!(c
            .entries
            .iter()
            .all(|e| e.is_attacked && e.target_caption.is_some()));
        assert_eq!(
            make_corpus(3, 4, 0.2, 9).unwrap(),
            make_corpus(3, 4, 0.2, 9).unwrap()
        );
        assert!(make_corpus(0, 1, 0.0, 1).is_err());
    }

    #[test]
    fn targets_never_mention_scene_objects() {
        for t in TARGETS {
            for tok in tokens(t) {
                assert!(!OBJECTS.contains(&tok.as_str()), "{t} mentions {tok}");
            }
        }
    }

    #[test]
    fn zero_strength_attack_is_invalid() {
        let mut e = make_corpus(0, 1, 0.3, 1).unwrap().entries.remove(0);
        e.attack_strength = 0.0;
        assert!(matches!(
            e.validate(),
            Err(SyntheticError::AttackWithoutStrength { .. })
        ));
    }

    #[test]
    fn encoder_is_deterministic() {
        let w = world(2, 0, 0.0);
        let e = &w.entries()[0];
        assert_eq!(
            w.synthetic_encode(e, View::Transform(3)),
            w.synthetic_encode(e, View::Transform(3))
        );
    }

    #[test]
    fn clean_views_stay_close() {
        let w = world(20, 0, 0.0);
        for e in w.entries() {
            let z0 = w.synthetic_encode(e, View::Original);
            for k in 0..10 {
                let d = 1.0 - cosine_similarity(&z0, &w.synthetic_encode(e, View::Transform(k))).unwrap();
                // two jitters of expected norm 0.02 each
                assert!(d < 0.005, "distance {d}");
            }
        }
    }

    #[test]
    fn attacked_views_spread_out() {
        let w = world(0, 10, 0.5);
        for e in w.entries() {
            let z0 = w.synthetic_encode(e, View::Original);
            let zs: Vec<_> = (0..10)
                .map(|k| w.synthetic_encode(e, View::Transform(k)))
                .collect();
            assert!(mean_transform_distance(&z0, &zs).unwrap() > 0.05);
        }
    }

    #[test]
    fn caption_rules() {
        let w = world(0, 1, 0.5);
        let e = &w.entries()[0];
        assert_eq!(
            w.synthetic_caption(e, View::Original),
            e.target_caption.clone().unwrap()
        );
        let corrupted = w.corrupted_views(e);
        assert_eq!(corrupted.len(), 2);
        for k in 0..10 {
            let cap = w.synthetic_caption(e, View::Transform(k));
            assert_eq!(cap.contains(" next to "), corrupted.contains(&k), "{cap}");
        }
    }

    #[test]
    fn scene_template() {
        let objs = vec!["dog".to_owned(), "frisbee".to_owned()];
        assert_eq!(scene_caption(&objs, "", ""), "a dog with a frisbee");
        let objs = vec!["elephant".to_owned(), "tree".to_owned(), "river".to_owned()];
        assert_eq!(
            scene_caption(&objs, "a photo of ", " outdoors"),
            "a photo of an elephant with a tree and a river outdoors"
        );
    }

    #[test]
    fn embedder_examples() {
        let a = synthetic_embed("a dog with a frisbee");
        assert_eq!(a, synthetic_embed("a dog with a frisbee"));
        assert!((cosine_similarity(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        let b = synthetic_embed("violin sheet music");
        assert!(cosine_similarity(&synthetic_embed("dog frisbee park"), &b).unwrap() <= 0.1);
    }

    #[test]
    fn resolves_every_view() {
        let w = world(3, 1, 0.4);
        for e in w.entries() {
            assert_eq!(w.resolve(&e.raster).unwrap().1, View::Original);
            for v in generate_transform_set(&e.raster, w.spec()).unwrap() {
                let (found, view) = w.resolve(&v).unwrap();
                assert_eq!(found.id, e.id);
                assert!(matches!(view, View::Transform(_)));
            }
        }
        let stranger = RasterImage::new(64, 64, vec![7; 64 * 64 * 3]).unwrap();
        assert!(w.resolve(&stranger).is_none());
    }

    #[test]
    fn jsonl_round_trip() {
        let c = make_corpus(3, 2, 0.25, 5).unwrap();
        let mut buf = Vec::new();
        c.write_jsonl(&mut buf).unwrap();
        assert_eq!(buf.iter().filter(|b| **b == b'\n').count(), 6);
        assert_eq!(SyntheticCorpus::read_jsonl(&buf[..]).unwrap(), c);
        assert!(SyntheticCorpus::read_jsonl(&b"{\"format\":\"x\",\"seed\":1}\n"[..]).is_err());
    }
}
