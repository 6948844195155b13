#![allow(dead_code)]

use std::collections::HashMap;
use std::sync::Arc;

use vlm_guard::calibration::{calibrate_early, calibrate_late, collect_response_sets};
use vlm_guard::clients::mock::FnLlm;
use vlm_guard::clients::{Clients, Counting, LlmClient, DEFAULT_INSTRUCTION};
use vlm_guard::consolidation::render_consolidation;
use vlm_guard::synthetic::{distinctive_tokens, make_corpus, SyntheticWorld, WorldParams};
use vlm_guard::{CalibrationProfile, TransformSpec};

pub fn world(n_clean: usize, n_attacked: usize, eps: f64, seed: u64) -> Arc<SyntheticWorld> {
    world_with(
        n_clean,
        n_attacked,
        eps,
        seed,
        TransformSpec::default(),
        WorldParams::default(),
    )
}

pub fn world_with(
    n_clean: usize,
    n_attacked: usize,
    eps: f64,
    seed: u64,
    spec: TransformSpec,
    params: WorldParams,
) -> Arc<SyntheticWorld> {
    Arc::new(SyntheticWorld::new(make_corpus(n_clean, n_attacked, eps, seed).unwrap(), spec, params).unwrap())
}

/// Calibrates both thresholds on `n` clean images of a dedicated world.
pub async fn profile(n: usize, spec: TransformSpec) -> CalibrationProfile {
    let w = world_with(n, 0, 0.0, 9_001, spec, WorldParams::default());
    let c = w.clients(Arc::new(majority_llm()));
    let images: Vec<_> = w.entries().iter().map(|e| e.raster.clone()).collect();
    let early = calibrate_early(&images, c.encoder.as_ref(), &spec, 0.95, 16)
        .await
        .unwrap();
    let sets = collect_response_sets(&images, c.captioner.as_ref(), &spec, DEFAULT_INSTRUCTION, 16)
        .await
        .unwrap();
    let late = calibrate_late(&sets, c.embedder.as_ref(), 0.99, true, 16)
        .await
        .unwrap();
    CalibrationProfile::new(&early, &late, &spec).unwrap()
}

/// Numbered caption lines listed after the crops header of a consolidation prompt.
pub fn prompt_captions(prompt: &str) -> (String, Vec<String>) {
    let original = prompt
        .split_once("The original image caption is: ")
        .and_then(|(_, r)| r.split_once(".\n\nThe crops captions are:"))
        .map(|(o, _)| o.to_owned())
        .expect("original slot");
    let crops = prompt
        .split_once("The crops captions are:\n")
        .map(|(_, r)| r)
        .expect("crops slot")
        .lines()
        .map_while(|l| {
            let (n, text) = l.split_once(". ")?;
            n.parse::<usize>().ok()?;
            Some(text.to_owned())
        })
        .collect();
    (original, crops)
}

/// Test-only consolidator: answers with the first crop caption whose
/// distinctive tokens each occur in more than half of all captions.
pub fn majority_llm() -> FnLlm<impl Fn(&str) -> String + Send + Sync> {
    FnLlm(|prompt: &str| {
        let (original, crops) = prompt_captions(prompt);
        let all: Vec<&String> = std::iter::once(&original).chain(crops.iter()).collect();
        let mut support: HashMap<String, usize> = HashMap::new();
        for c in &all {
            let mut toks = distinctive_tokens(c);
            toks.sort();
            toks.dedup();
            for t in toks {
                *support.entry(t).or_default() += 1;
            }
        }
        let majority = |t: &String| 2 * support[t] > all.len();
        let chosen = crops
            .iter()
            .find(|c| distinctive_tokens(c).iter().all(majority))
            .unwrap_or(&crops[0]);
        render_consolidation(chosen, "kept the objects most crop captions agree on")
    })
}

pub struct Counted {
    pub clients: Clients,
    pub encoder: Arc<Counting<Arc<dyn vlm_guard::clients::VisionEncoder>>>,
    pub captioner: Arc<Counting<Arc<dyn vlm_guard::clients::Captioner>>>,
    pub embedder: Arc<Counting<Arc<dyn vlm_guard::clients::TextEmbedder>>>,
    pub llm: Arc<Counting<Arc<dyn LlmClient>>>,
}

/// Wraps every role of `base` in a call counter.
pub fn counted(base: Clients) -> Counted {
    let encoder = Counting::new(base.encoder);
    let captioner = Counting::new(base.captioner);
    let embedder = Counting::new(base.embedder);
    let llm = Counting::new(base.llm);
    Counted {
        clients: Clients {
            encoder: encoder.clone(),
            captioner: captioner.clone(),
            embedder: embedder.clone(),
            llm: llm.clone(),
        },
        encoder,
        captioner,
        embedder,
        llm,
    }
}

/// A profile with hand-picked thresholds.
pub fn fixed_profile(tau_early: f64, tau_late: f64, spec: TransformSpec) -> CalibrationProfile {
    use vlm_guard::ThresholdEstimate;
    CalibrationProfile::new(
        &ThresholdEstimate::from_samples(vec![tau_early], 0.95).unwrap(),
        &ThresholdEstimate::from_samples(vec![tau_late], 0.99).unwrap(),
        &spec,
    )
    .unwrap()
}
