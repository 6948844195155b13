//! Calibrates both thresholds on a synthetic clean corpus, then checks the
//! held-out clean pass rate and how attacked images score against them.
//!
//! cargo run --example calibrate_synthetic

use std::sync::Arc;

use vlm_guard::calibration::{
    calibrate_early, calibrate_late, collect_response_sets, early_score, CalibrationProfile,
};
use vlm_guard::clients::DEFAULT_INSTRUCTION;
use vlm_guard::synthetic::{make_corpus, FirstViewLlm, SyntheticWorld, WorldParams};
use vlm_guard::TransformSpec;

#[tokio::main]
async fn main() -> Result<(), Box<dyn std::error::Error>> {
    let spec = TransformSpec::default();
    let calib = Arc::new(SyntheticWorld::new(
        make_corpus(1000, 0, 0.0, 1)?,
        spec,
        WorldParams::default(),
    )?);
    let clients = calib.clients(Arc::new(FirstViewLlm));
    let images: Vec<_> = calib.entries().iter().map(|e| e.raster.clone()).collect();

    let early = calibrate_early(&images, clients.encoder.as_ref(), &spec, 0.95, 16).await?;
    let sets = collect_response_sets(
        &images[..200],
        clients.captioner.as_ref(),
        &spec,
        DEFAULT_INSTRUCTION,
        16,
    )
    .await?;
    let late = calibrate_late(&sets, clients.embedder.as_ref(), 0.99, true, 16).await?;
    let profile = CalibrationProfile::new(&early, &late, &spec)?;
    println!(
        "tau_early = {:.6}  tau_late = {:.6}",
        profile.tau_early, profile.tau_late
    );
    println!("calibration-sample pass rate = {:.3}", early.pass_rate());

    let held_out = Arc::new(SyntheticWorld::new(
        make_corpus(1000, 0, 0.0, 2)?,
        spec,
        WorldParams::default(),
    )?);
    let c2 = held_out.clients(Arc::new(FirstViewLlm));
    let mut passed = 0;
    for e in held_out.entries() {
        if early_score(&e.raster, c2.encoder.as_ref(), &spec).await? <= profile.tau_early {
            passed += 1;
        }
    }
    println!("held-out clean pass rate = {:.3}", passed as f64 / 1000.0);

    for eps in [0.02, 0.05, 0.1, 0.2, 0.5] {
        let world = Arc::new(SyntheticWorld::new(
            make_corpus(0, 200, eps, 3)?,
            spec,
            WorldParams::default(),
        )?);
        let c = world.clients(Arc::new(FirstViewLlm));
        let mut min = f64::INFINITY;
        for e in world.entries() {
            min = min.min(early_score(&e.raster, c.encoder.as_ref(), &spec).await?);
        }
        println!(
            "epsilon {eps:>4}: min attacked early score {min:.6} ({})",
            if min > profile.tau_early {
                "all flagged"
            } else {
                "some pass"
            }
        );
    }
    Ok(())
}
