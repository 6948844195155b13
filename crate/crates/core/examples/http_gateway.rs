//! Serves a defender over HTTP on an ephemeral port and exercises every
//! endpoint with a client.
//!
//! cargo run --example http_gateway

use std::sync::Arc;

use base64::Engine;
use vlm_guard::calibration::{calibrate_early, calibrate_late, collect_response_sets};
use vlm_guard::clients::mock::FnLlm;
use vlm_guard::clients::DEFAULT_INSTRUCTION;
use vlm_guard::consolidation::render_consolidation;
use vlm_guard::serve::{serve, DefendRequest};
use vlm_guard::synthetic::{distinctive_tokens, make_corpus, FirstViewLlm, SyntheticWorld, WorldParams};
use vlm_guard::{CalibrationProfile, Defender, PipelineConfig, PipelineResult, TransformSpec};

/// Stand-in for a real consolidator model: returns the first crop caption
/// whose distinctive words each appear in more than half of all captions.
fn vote(prompt: &str) -> String {
    let original = prompt
        .split_once("The original image caption is: ")
        .and_then(|(_, r)| r.split_once(".\n\nThe crops captions are:"))
        .map(|(o, _)| o)
        .unwrap_or_default();
    let crops: Vec<&str> = prompt
        .split_once("The crops captions are:\n")
        .map(|(_, r)| r)
        .unwrap_or_default()
        .lines()
        .map_while(|l| {
            l.split_once(". ")
                .filter(|(n, _)| n.parse::<usize>().is_ok())
                .map(|(_, t)| t)
        })
        .collect();
    let all: Vec<&str> = std::iter::once(original).chain(crops.iter().copied()).collect();
    let support = |t: &String| all.iter().filter(|c| distinctive_tokens(c).contains(t)).count();
    let chosen = crops
        .iter()
        .find(|c| distinctive_tokens(c).iter().all(|t| 2 * support(t) > all.len()))
        .or(crops.first())
        .copied()
        .unwrap_or(original);
    render_consolidation(chosen, "kept the caption whose objects most captions agree on")
}

#[tokio::main]
async fn main() -> Result<(), Box<dyn std::error::Error>> {
    let spec = TransformSpec::default();
    let calib = Arc::new(SyntheticWorld::new(
        make_corpus(300, 0, 0.0, 40)?,
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
        make_corpus(4, 2, 0.5, 41)?,
        spec,
        WorldParams::default(),
    )?);
    let defender = Arc::new(Defender::new(
        world.clients(Arc::new(FnLlm(vote))),
        profile,
        spec,
        PipelineConfig::default(),
    )?);

    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await?;
    let base = format!("http://{}", listener.local_addr()?);
    let (stop, stopped) = tokio::sync::oneshot::channel::<()>();
    let server = tokio::spawn(serve(listener, defender, async {
        let _ = stopped.await;
    }));
    println!("serving on {base}");

    let http = reqwest::Client::new();
    println!(
        "GET /healthz -> {}",
        http.get(format!("{base}/healthz"))
            .send()
            .await?
            .text()
            .await?
            .trim()
    );
    for entry in world.entries() {
        let body = DefendRequest {
            image_base64: base64::engine::general_purpose::STANDARD.encode(entry.raster.to_png()?),
            instruction: None,
        };
        let resp = http.post(format!("{base}/v1/defend")).json(&body).send().await?;
        let status = resp.status();
        let result: PipelineResult = resp.json().await?;
        println!(
            "POST /v1/defend entry {} (attacked={}) -> {status} {:?}: {}",
            entry.id, entry.is_attacked, result.route, result.final_text
        );
    }
    let bad = http
        .post(format!("{base}/v1/defend"))
        .json(&serde_json::json!({ "image_base64": "not base64!" }))
        .send()
        .await?;
    println!(
        "POST /v1/defend with bad input -> {} {}",
        bad.status(),
        bad.text().await?
    );
    println!(
        "GET /metrics ->\n{}",
        http.get(format!("{base}/metrics")).send().await?.text().await?
    );

    let _ = stop.send(());
    server.await??;
    Ok(())
}
