//! Evaluates a calibrated defender on a 95/5 clean/attacked synthetic corpus
//! and writes `report.json` and `summary.csv`.
//!
//! cargo run --example eval_report -- [out_dir]

use std::sync::Arc;

use vlm_guard::calibration::{calibrate_early, calibrate_late, collect_response_sets};
use vlm_guard::clients::DEFAULT_INSTRUCTION;
use vlm_guard::eval::{evaluate, EvalCorpus, EvalOptions};
use vlm_guard::synthetic::{make_corpus, FirstViewLlm, SyntheticWorld, WorldParams};
use vlm_guard::{CalibrationProfile, Defender, PipelineConfig, Route, TransformSpec};

#[tokio::main]
async fn main() -> Result<(), Box<dyn std::error::Error>> {
    let out = std::env::args().nth(1).unwrap_or_else(|| "eval-out".into());
    let spec = TransformSpec::default();

    let calib = Arc::new(SyntheticWorld::new(
        make_corpus(400, 0, 0.0, 30)?,
        spec,
        WorldParams::default(),
    )?);
    let cc = calib.clients(Arc::new(FirstViewLlm));
    let images: Vec<_> = calib.entries().iter().map(|e| e.raster.clone()).collect();
    let early = calibrate_early(&images, cc.encoder.as_ref(), &spec, 0.95, 16).await?;
    let sets = collect_response_sets(&images, cc.captioner.as_ref(), &spec, DEFAULT_INSTRUCTION, 16).await?;
    let late = calibrate_late(&sets, cc.embedder.as_ref(), 0.99, true, 16).await?;
    let profile = CalibrationProfile::new(&early, &late, &spec)?;

    let corpus = make_corpus(190, 10, 0.5, 31)?;
    let world = Arc::new(SyntheticWorld::new(corpus.clone(), spec, WorldParams::default())?);
    let clients = world.clients(Arc::new(FirstViewLlm));
    let embedder = clients.embedder.clone();
    let defender = Defender::new(clients, profile, spec, PipelineConfig::default())?;

    let echo = serde_json::json!({ "transform": spec, "corpus_seed": corpus.seed });
    let report = evaluate(
        &EvalCorpus::from_synthetic(&corpus),
        &defender,
        embedder.as_ref(),
        EvalOptions::default(),
        echo,
    )
    .await;

    for route in Route::ALL {
        println!("{:<13} {}", route.as_str(), report.route_count(route));
    }
    let m = &report.detection;
    println!(
        "TP {} FP {} TN {} FN {}  accuracy {:?} precision {:?} recall {:?}",
        m.true_positives,
        m.false_positives,
        m.true_negatives,
        m.false_negatives,
        m.accuracy,
        m.precision,
        m.recall
    );
    println!("mean caption score {:?}", report.mean_caption_score);
    let (json, csv) = report.write_to_dir(&out)?;
    println!("wrote {} and {}", json.display(), csv.display());
    Ok(())
}
