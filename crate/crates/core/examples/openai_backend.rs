//! Drives the pipeline through the OpenAI-compatible HTTP clients. A small
//! in-process server speaks the `/embeddings` and `/chat/completions` wire
//! format and answers from the synthetic world, with a
//! majority-vote stand-in for the consolidator model. The clients are built from a
//! TOML config exactly as the CLI builds them.
//!
//! cargo run --example openai_backend

use std::sync::Arc;

use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::post;
use axum::{Json, Router};
use base64::Engine;
use serde_json::{json, Value};
use vlm_guard::calibration::{calibrate_early, calibrate_late, collect_response_sets};
use vlm_guard::clients::DEFAULT_INSTRUCTION;
use vlm_guard::config::{build_runtime, AppConfig};
use vlm_guard::consolidation::render_consolidation;
use vlm_guard::synthetic::{distinctive_tokens, make_corpus, synthetic_embed, SyntheticWorld, WorldParams};
use vlm_guard::{CalibrationProfile, Defender, RasterImage, TransformSpec};

fn decode(url: &str) -> Option<RasterImage> {
    let b64 = url.strip_prefix("data:image/png;base64,")?;
    RasterImage::decode(&base64::engine::general_purpose::STANDARD.decode(b64).ok()?).ok()
}

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

async fn embeddings(State(world): State<Arc<SyntheticWorld>>, Json(body): Json<Value>) -> Response {
    let Ok(inputs) = serde_json::from_value::<Vec<String>>(body["input"].clone()) else {
        return (StatusCode::BAD_REQUEST, "input must be a list of strings").into_response();
    };
    let mut data = Vec::with_capacity(inputs.len());
    for (i, input) in inputs.iter().enumerate() {
        let v = match decode(input) {
            Some(img) => match world.resolve(&img) {
                Some((entry, view)) => world.synthetic_encode(entry, view),
                None => return (StatusCode::BAD_REQUEST, "unknown image").into_response(),
            },
            None => synthetic_embed(input),
        };
        data.push(json!({ "object": "embedding", "index": i, "embedding": v.values() }));
    }
    Json(json!({ "object": "list", "data": data, "model": body["model"] })).into_response()
}

async fn chat(State(world): State<Arc<SyntheticWorld>>, Json(body): Json<Value>) -> Response {
    let content = &body["messages"][0]["content"];
    let text = match content {
        Value::String(prompt) => vote(prompt),
        Value::Array(parts) => {
            let url = parts
                .iter()
                .find_map(|p| p["image_url"]["url"].as_str())
                .unwrap_or_default();
            match decode(url).and_then(|img| world.resolve(&img).map(|(e, v)| world.synthetic_caption(e, v)))
            {
                Some(caption) => caption,
                None => return (StatusCode::BAD_REQUEST, "unknown image").into_response(),
            }
        }
        _ => return (StatusCode::BAD_REQUEST, "unsupported content").into_response(),
    };
    Json(json!({
        "object": "chat.completion",
        "choices": [{ "index": 0, "message": { "role": "assistant", "content": text }, "finish_reason": "stop" }]
    }))
    .into_response()
}

#[tokio::main]
async fn main() -> Result<(), Box<dyn std::error::Error>> {
    let spec = TransformSpec::default();
    let calib = make_corpus(200, 0, 0.0, 50)?;
    let mut entries = calib.entries.clone();
    let live = make_corpus(3, 2, 0.5, 51)?;
    entries.extend(live.entries.iter().cloned());
    let mut both = calib.clone();
    both.entries = entries;
    let world = Arc::new(SyntheticWorld::new(both, spec, WorldParams::default())?);

    let app = Router::new()
        .route("/v1/embeddings", post(embeddings))
        .route("/v1/chat/completions", post(chat))
        .with_state(world);
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await?;
    let endpoint = format!("http://{}/v1", listener.local_addr()?);
    tokio::spawn(async move { axum::serve(listener, app).await });

    let toml = format!(
        r#"
[backend]
kind = "http"

[backend.encoder]
endpoint = "{endpoint}"
model = "clip-vit-l-14"

[backend.captioner]
endpoint = "{endpoint}"
model = "llava-1.5-7b"

[backend.embedder]
endpoint = "{endpoint}"
model = "all-minilm-l6-v2"

[backend.llm]
endpoint = "{endpoint}"
model = "gpt-4o-mini"
max_in_flight = 2
"#
    );
    let mut config = AppConfig::from_toml(&toml)?;
    config.apply_env(|k| std::env::var(k).ok())?;
    let clients = build_runtime(&config, None)?.clients;
    println!("clients talk to {endpoint}");

    let images: Vec<_> = calib.entries.iter().map(|e| e.raster.clone()).collect();
    let early = calibrate_early(&images, clients.encoder.as_ref(), &spec, 0.95, 8).await?;
    let sets =
        collect_response_sets(&images, clients.captioner.as_ref(), &spec, DEFAULT_INSTRUCTION, 8).await?;
    let late = calibrate_late(&sets, clients.embedder.as_ref(), 0.99, true, 8).await?;
    let profile = CalibrationProfile::new(&early, &late, &spec)?;
    println!(
        "calibrated over HTTP: tau_early {:.6}, tau_late {:.6}",
        profile.tau_early, profile.tau_late
    );

    let defender = Defender::new(clients, profile, spec, config.pipeline.clone())?;
    for entry in &live.entries {
        let r = defender.defend_default(&entry.raster).await?;
        println!(
            "attacked={} -> {:?}: {}",
            entry.is_attacked, r.route, r.final_text
        );
    }
    Ok(())
}
