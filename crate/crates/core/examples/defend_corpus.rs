//! Runs the full pipeline over a mixed synthetic corpus and prints route
//! counts with detection metrics.
//!
//! cargo run --example defend_corpus

use std::sync::Arc;

use vlm_guard::calibration::{calibrate_early, calibrate_late, collect_response_sets};
use vlm_guard::clients::DEFAULT_INSTRUCTION;
use vlm_guard::eval::detection_metrics;
use vlm_guard::synthetic::{make_corpus, FirstViewLlm, SyntheticWorld, WorldParams};
use vlm_guard::{CalibrationProfile, Defender, PipelineConfig, Route, TransformSpec};

#[tokio::main]
async fn main() -> Result<(), Box<dyn std::error::Error>> {
    let spec = TransformSpec::default();

    let calib = Arc::new(SyntheticWorld::new(
        make_corpus(500, 0, 0.0, 10)?,
        spec,
        WorldParams::default(),
    )?);
    let cc = calib.clients(Arc::new(FirstViewLlm));
    let images: Vec<_> = calib.entries().iter().map(|e| e.raster.clone()).collect();
    let early = calibrate_early(&images, cc.encoder.as_ref(), &spec, 0.95, 16).await?;
    let sets = collect_response_sets(&images, cc.captioner.as_ref(), &spec, DEFAULT_INSTRUCTION, 16).await?;
    let late = calibrate_late(&sets, cc.embedder.as_ref(), 0.99, true, 16).await?;
    let profile = CalibrationProfile::new(&early, &late, &spec)?;

    let world = Arc::new(SyntheticWorld::new(
        make_corpus(950, 50, 0.5, 11)?,
        spec,
        WorldParams::default(),
    )?);
    let defender = Defender::new(
        world.clients(Arc::new(FirstViewLlm)),
        profile,
        spec,
        PipelineConfig::default(),
    )?;
    let images: Vec<_> = world.entries().iter().map(|e| e.raster.clone()).collect();
    let run = defender.defend_corpus(&images, 16).await;

    for route in Route::ALL {
        println!("{:<13} {}", route.as_str(), run.stats.route_count(route));
    }
    println!("failures      {}", run.stats.failures);
    let predicted: Vec<bool> = run
        .results
        .iter()
        .map(|r| r.as_ref().map(|r| r.route.flagged()).unwrap_or(true))
        .collect();
    let truth: Vec<bool> = world.entries().iter().map(|e| e.is_attacked).collect();
    println!("{:?}", detection_metrics(&predicted, &truth)?);
    for (stage, secs) in &run.stats.mean_stage_seconds {
        println!("mean {stage:<20} {:.6}s", secs);
    }
    print!("{}", defender.metrics().render());
    Ok(())
}
