//! Acceptance suite. Prints one PASS or FAIL line per criterion and exits
//! nonzero if any criterion fails.

#![allow(clippy::needless_range_loop)]

mod common;

use std::collections::HashSet;
use std::panic::AssertUnwindSafe;
use std::sync::Arc;
use std::time::{Duration, Instant};

use futures::FutureExt;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vlm_guard::calibration::{calibrate_early, calibrate_late, collect_response_sets, early_score};
use vlm_guard::clients::DEFAULT_INSTRUCTION;
use vlm_guard::consolidation::{build_prompt, parse_consolidation, render_consolidation};
use vlm_guard::detection::{kl_divergence, response_divergence, row_normalize, similarity_matrix};
use vlm_guard::eval::detection_metrics;
use vlm_guard::synthetic::{distinctive_tokens, FirstViewLlm, WorldParams, SEPARATION_EPSILON_MIN};
use vlm_guard::transforms::generate_transform_set;
use vlm_guard::{
    CalibrationProfile, Defender, EmbeddingVector, PipelineConfig, RasterImage, ResponseSet, Route,
    TransformSpec,
};

const K: usize = 10;
const CHAIN_TOLERANCE: f64 = 1e-9;
const KL_SELF_TOLERANCE: f64 = 1e-9;
const KL_FLOOR: f64 = -1e-12;
const ROW_SUM_TOLERANCE: f64 = 1e-9;
const PASS_RATE_BAND: (f64, f64) = (0.92, 0.98);
const LLM_BUDGET_PER_CLEAN: f64 = 0.06;
const GOLDEN: &str = include_str!("golden/consolidation_prompt.txt");

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if $cond {
        } else {
            return Err(format!($($msg)+));
        }
    };
}

fn within(elapsed: Duration, limit_secs: u64) -> Outcome {
    if elapsed <= Duration::from_secs(limit_secs) {
        Ok(String::new())
    } else {
        Err(format!("took {:.2}s, limit {limit_secs}s", elapsed.as_secs_f64()))
    }
}

/// Late-stage chain computed from scratch: clamped cosine rows, L1 rows, natural-log KL.
fn oracle_chain(vectors: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = vectors.len();
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let p: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            let row: Vec<f64> = (0..n)
                .map(|j| {
                    let c = dot(&vectors[i], &vectors[j])
                        / (dot(&vectors[i], &vectors[i]).sqrt() * dot(&vectors[j], &vectors[j]).sqrt());
                    c.max(1e-6)
                })
                .collect();
            let total: f64 = row.iter().sum();
            row.into_iter().map(|v| v / total).collect()
        })
        .collect();
    (0..n)
        .map(|i| {
            (0..n)
                .map(|j| {
                    if i == j {
                        0.0
                    } else {
                        (0..n).map(|k| p[i][k] * (p[i][k] / p[j][k]).ln()).sum()
                    }
                })
                .collect()
        })
        .collect()
}

fn random_vector(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        if v.iter().any(|x: &f64| x.abs() > 1e-3) {
            return v;
        }
    }
}

const VOCAB: &[&str] = &[
    "a", "dog", "cat", "on", "the", "red", "bench", "snow", "tree", "with", "stop", "sign", "near", "river",
];

fn random_text(rng: &mut ChaCha8Rng) -> String {
    let n = rng.random_range(1..8);
    (0..n)
        .map(|_| VOCAB[rng.random_range(0..VOCAB.len())])
        .collect::<Vec<_>>()
        .join(" ")
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = 0.0f64;
    for case in 0..1000 {
        let n = rng.random_range(2..=6);
        let dim = rng.random_range(1..=32);
        let vectors: Vec<Vec<f64>> = (0..n).map(|_| random_vector(&mut rng, dim)).collect();
        let embedded: Vec<EmbeddingVector> = vectors
            .iter()
            .map(|v| EmbeddingVector::new(v.clone()).unwrap())
            .collect();
        let got = response_divergence(&embedded).map_err(|e| format!("case {case}: {e}"))?;
        let want = oracle_chain(&vectors);
        for i in 0..n {
            for j in 0..n {
                worst = worst.max((got.get(i, j) - want[i][j]).abs());
            }
        }
    }
    ensure!(worst <= CHAIN_TOLERANCE, "max deviation {worst:e}");
    within(start.elapsed(), 10)?;
    Ok(format!(
        "max deviation {worst:.1e} over 1000 sets in {:.2}s",
        start.elapsed().as_secs_f64()
    ))
}

fn criterion_2() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let dist = |rng: &mut ChaCha8Rng, len: usize| {
        let v: Vec<f64> = (0..len).map(|_| rng.random_range(1e-6..1.0)).collect();
        let s: f64 = v.iter().sum();
        v.into_iter().map(|x| x / s).collect::<Vec<f64>>()
    };
    let (mut worst_self, mut min_kl) = (0.0f64, f64::INFINITY);
    for _ in 0..10_000 {
        let len = rng.random_range(2..=12);
        let p = dist(&mut rng, len);
        let q = dist(&mut rng, len);
        worst_self = worst_self.max(kl_divergence(&p, &p).unwrap().abs());
        min_kl = min_kl.min(kl_divergence(&p, &q).unwrap());
    }
    ensure!(worst_self <= KL_SELF_TOLERANCE, "KL(P||P) reached {worst_self:e}");
    ensure!(min_kl >= KL_FLOOR, "KL reached {min_kl:e}");
    let mut worst_row = 0.0f64;
    for _ in 0..1000 {
        let n = rng.random_range(2..=6);
        let dim = rng.random_range(1..=32);
        let vs: Vec<EmbeddingVector> = (0..n)
            .map(|_| EmbeddingVector::new(random_vector(&mut rng, dim)).unwrap())
            .collect();
        for row in row_normalize(&similarity_matrix(&vs).unwrap()).rows() {
            worst_row = worst_row.max((row.iter().sum::<f64>() - 1.0).abs());
        }
    }
    ensure!(worst_row <= ROW_SUM_TOLERANCE, "row sum off by {worst_row:e}");
    Ok(format!(
        "max |KL(P||P)| {worst_self:.1e}, min KL {min_kl:.3e}, max row-sum error {worst_row:.1e}"
    ))
}

/// Calibrates on 1000 clean images and measures the held-out early pass rate.
async fn criterion_3(profile_out: &mut Option<CalibrationProfile>) -> Outcome {
    let start = Instant::now();
    let spec = TransformSpec::default();
    let calib = common::world(1000, 0, 0.0, 3_000);
    let c = calib.clients(Arc::new(FirstViewLlm));
    let images: Vec<RasterImage> = calib.entries().iter().map(|e| e.raster.clone()).collect();
    let early = calibrate_early(&images, c.encoder.as_ref(), &spec, 0.95, 16)
        .await
        .map_err(|e| e.to_string())?;
    let sets = collect_response_sets(&images, c.captioner.as_ref(), &spec, DEFAULT_INSTRUCTION, 16)
        .await
        .map_err(|e| e.to_string())?;
    let late = calibrate_late(&sets, c.embedder.as_ref(), 0.99, true, 16)
        .await
        .map_err(|e| e.to_string())?;
    let profile = CalibrationProfile::new(&early, &late, &spec).map_err(|e| e.to_string())?;

    let held_out = common::world(1000, 0, 0.0, 3_001);
    let h = held_out.clients(Arc::new(FirstViewLlm));
    let mut passed = 0usize;
    for e in held_out.entries() {
        let d = early_score(&e.raster, h.encoder.as_ref(), &spec)
            .await
            .map_err(|e| e.to_string())?;
        passed += usize::from(d <= profile.tau_early);
    }
    let rate = passed as f64 / 1000.0;
    *profile_out = Some(profile.clone());
    ensure!(
        (PASS_RATE_BAND.0..=PASS_RATE_BAND.1).contains(&rate),
        "held-out pass rate {rate:.3} outside [{}, {}]",
        PASS_RATE_BAND.0,
        PASS_RATE_BAND.1
    );
    within(start.elapsed(), 60)?;
    Ok(format!(
        "tau_early {:.6}, held-out pass rate {rate:.3}, {:.2}s",
        profile.tau_early,
        start.elapsed().as_secs_f64()
    ))
}

async fn criterion_4(profile: &CalibrationProfile) -> Outcome {
    let spec = TransformSpec::default();
    let world = common::world(0, 500, SEPARATION_EPSILON_MIN, 4_000);
    let d = Defender::new(
        world.clients(Arc::new(FirstViewLlm)),
        profile.clone(),
        spec,
        PipelineConfig::default(),
    )
    .map_err(|e| e.to_string())?;
    let images: Vec<RasterImage> = world.entries().iter().map(|e| e.raster.clone()).collect();
    let run = d.defend_corpus(&images, 16).await;
    ensure!(
        run.stats.failures == 0,
        "{} pipeline failures",
        run.stats.failures
    );
    let flagged = run.stats.consolidated;
    ensure!(
        flagged == 500,
        "{flagged}/500 attacked images flagged at eps {SEPARATION_EPSILON_MIN}"
    );
    Ok(format!(
        "500/500 flagged at eps {SEPARATION_EPSILON_MIN} (early suspect {}, consolidated {flagged})",
        500 - run.stats.early_clean
    ))
}

async fn criteria_5_and_6(profile: &CalibrationProfile) -> (Outcome, Outcome) {
    let spec = TransformSpec::default();
    let world = common::world(190, 10, 0.5, 5_000);
    let c = common::counted(world.clients(Arc::new(common::majority_llm())));
    let d = match Defender::new(
        c.clients.clone(),
        profile.clone(),
        spec,
        PipelineConfig::default(),
    ) {
        Ok(d) => d,
        Err(e) => return (Err(e.to_string()), Err(e.to_string())),
    };
    let mut leaks = 0usize;
    let mut batch_violations = 0usize;
    let mut early_clean = 0usize;
    for e in world.entries() {
        let (enc0, emb0, llm0) = (c.encoder.counts(), c.embedder.counts(), c.llm.counts());
        let r = match d.defend_default(&e.raster).await {
            Ok(r) => r,
            Err(err) => return (Err(err.to_string()), Err(err.to_string())),
        };
        let enc = c.encoder.counts();
        if enc.calls - enc0.calls != 1 || enc.last_batch != K + 1 {
            batch_violations += 1;
        }
        if r.route == Route::EarlyClean {
            early_clean += 1;
            if c.embedder.counts().calls != emb0.calls || c.llm.counts().calls != llm0.calls {
                leaks += 1;
            }
        }
    }
    let llm_calls = c.llm.counts().calls;
    let budget = 10.0 + LLM_BUDGET_PER_CLEAN * 190.0;
    let five = if llm_calls as f64 > budget {
        Err(format!(
            "{llm_calls} consolidator calls exceed budget {budget:.1}"
        ))
    } else if leaks > 0 {
        Err(format!(
            "{leaks} early-clean inputs reached the embedder or consolidator"
        ))
    } else {
        Ok(format!(
            "{llm_calls} consolidator calls (budget {budget:.1}), {early_clean} early-clean inputs with no downstream calls"
        ))
    };
    let total = c.encoder.counts();
    let six = if batch_violations > 0 {
        Err(format!("{batch_violations} defends broke the single-batch rule"))
    } else if total.calls != 200 || total.items != 200 * (K + 1) {
        Err(format!(
            "{} encoder calls carrying {} images for 200 defends",
            total.calls, total.items
        ))
    } else {
        Ok(format!("200 defends, 200 encoder calls, {} images each", K + 1))
    };
    (five, six)
}

fn criterion_7() -> Outcome {
    let set = ResponseSet::new(
        "a red fire hydrant on a sidewalk",
        [
            "a dog with a frisbee",
            "a photo of a dog with a frisbee in the scene",
            "a dog with a frisbee next to a red fire hydrant",
        ],
    )
    .map_err(|e| e.to_string())?;
    let prompt = build_prompt(&set);
    ensure!(
        prompt.as_bytes() == GOLDEN.as_bytes(),
        "prompt differs from the golden file"
    );
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for case in 0..500 {
        let caption = random_text(&mut rng);
        let explanation = if case % 5 == 0 {
            String::new()
        } else {
            random_text(&mut rng)
        };
        let parsed =
            parse_consolidation(&render_consolidation(&caption, &explanation)).map_err(|e| e.to_string())?;
        ensure!(
            parsed.final_caption == caption && parsed.explanation == explanation,
            "round trip changed {caption:?} / {explanation:?}"
        );
    }
    Ok(format!(
        "golden match ({} bytes), 500 parse round trips exact",
        GOLDEN.len()
    ))
}

fn criterion_8() -> Outcome {
    let rep = |n: usize, v: bool| std::iter::repeat_n(v, n);
    let clean = detection_metrics(
        &rep(35, true).chain(rep(965, false)).collect::<Vec<_>>(),
        &vec![false; 1000],
    )
    .map_err(|e| e.to_string())?;
    ensure!(
        clean.accuracy == Some(0.965) && clean.false_positives == 35,
        "clean fixture {clean:?}"
    );
    let attacked = detection_metrics(
        &rep(999, true).chain(rep(1, false)).collect::<Vec<_>>(),
        &vec![true; 1000],
    )
    .map_err(|e| e.to_string())?;
    ensure!(
        attacked.recall == Some(0.999) && attacked.precision == Some(1.0),
        "attacked fixture {attacked:?}"
    );
    let tiny = detection_metrics(&[false, false, true, true], &[false, false, true, true])
        .map_err(|e| e.to_string())?;
    ensure!(
        (tiny.accuracy, tiny.precision, tiny.recall) == (Some(1.0), Some(1.0), Some(1.0)),
        "tiny fixture {tiny:?}"
    );
    let mixed = detection_metrics(
        &[true, true, false, false, true],
        &[true, false, true, false, true],
    )
    .map_err(|e| e.to_string())?;
    ensure!(
        (
            mixed.true_positives,
            mixed.false_positives,
            mixed.true_negatives,
            mixed.false_negatives
        ) == (2, 1, 1, 1)
            && mixed.accuracy == Some(0.6)
            && mixed.precision == Some(2.0 / 3.0)
            && mixed.recall == Some(2.0 / 3.0),
        "mixed fixture {mixed:?}"
    );
    Ok("clean, attacked, tiny and mixed confusion matrices exact".into())
}

fn criterion_9() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for case in 0..1000 {
        let (w, h) = (rng.random_range(2..48), rng.random_range(2..48));
        let img =
            RasterImage::from_fn(w, h, |_, _| [rng.random(), rng.random(), rng.random::<u8>() | 1]).unwrap();
        let count = rng.random_range(1..=6);
        let seed: u64 = rng.random();
        let fail = |what: &str| Err(format!("case {case} ({w}x{h}, seed {seed}): {what}"));

        for spec in [
            TransformSpec::crop(1.0, count, seed),
            TransformSpec::mask(0.0, count, seed),
        ] {
            let views = generate_transform_set(&img, &spec).map_err(|e| e.to_string())?;
            if views.len() != count || views.iter().any(|v| v != &img) {
                return fail("identity spec altered the image");
            }
        }

        let fraction = rng.random_range(0.0..0.9);
        let mask = TransformSpec::mask(fraction, count, seed);
        let views = generate_transform_set(&img, &mask).map_err(|e| e.to_string())?;
        let expected = (fraction * (w * h) as f64).round() as usize;
        for v in &views {
            let black = v.as_bytes().chunks(3).filter(|p| p == &[0, 0, 0]).count();
            if black != expected {
                return fail(&format!("mask blacked {black} pixels, expected {expected}"));
            }
        }
        if views != generate_transform_set(&img, &mask).unwrap() {
            return fail("mask views not seed-deterministic");
        }

        let ratio = rng.random_range(0.5..=1.0);
        let crop = TransformSpec::crop(ratio, count, seed);
        let a = generate_transform_set(&img, &crop).map_err(|e| e.to_string())?;
        let dims: HashSet<_> = a.iter().map(|v| (v.width(), v.height())).collect();
        let want = (
            ((ratio * w as f64) + 1e-9).floor() as usize,
            ((ratio * h as f64) + 1e-9).floor() as usize,
        );
        if dims.len() != 1 || !dims.contains(&want) {
            return fail(&format!("crop sizes {dims:?}, expected {want:?}"));
        }
        if a != generate_transform_set(&img, &crop).unwrap() {
            return fail("crop views not seed-deterministic");
        }
    }
    Ok("1000 random (image, spec) pairs satisfy identity, cardinality and determinism".into())
}

async fn criterion_10(profile: &CalibrationProfile) -> Outcome {
    let start = Instant::now();
    let spec = TransformSpec::default();
    let llm = Arc::new(common::majority_llm());

    let clean = common::world(20, 0, 0.0, 10_000);
    let d = Defender::new(
        clean.clients(llm.clone()),
        profile.clone(),
        spec,
        PipelineConfig::default(),
    )
    .map_err(|e| e.to_string())?;
    let mut early_clean = None;
    for e in clean.entries() {
        let r = d.defend_default(&e.raster).await.map_err(|e| e.to_string())?;
        if r.route == Route::EarlyClean {
            early_clean = Some(r);
            break;
        }
    }
    ensure!(early_clean.is_some(), "no clean image took the early-clean route");

    let params = WorldParams {
        caption_variation: false,
        ..WorldParams::default()
    };
    let flat = common::world_with(200, 0, 0.0, 10_001, spec, params);
    let fc = flat.clients(llm.clone());
    let mut borderline = None;
    for e in flat.entries() {
        if early_score(&e.raster, fc.encoder.as_ref(), &spec)
            .await
            .map_err(|e| e.to_string())?
            > profile.tau_early
        {
            borderline = Some(e);
            break;
        }
    }
    let borderline = borderline.ok_or("no borderline image found")?;
    let d = Defender::new(fc, profile.clone(), spec, PipelineConfig::default()).map_err(|e| e.to_string())?;
    let r = d
        .defend_default(&borderline.raster)
        .await
        .map_err(|e| e.to_string())?;
    ensure!(
        r.route == Route::LateClean,
        "borderline image routed {:?}",
        r.route
    );
    let original = r
        .responses
        .as_ref()
        .map(|s| s.original().to_owned())
        .unwrap_or_default();
    ensure!(r.final_text == original, "late-clean answer is not r_0");

    let attacked = common::world(0, 1, 0.5, 10_002);
    let entry = &attacked.entries()[0];
    let d = Defender::new(
        attacked.clients(llm),
        profile.clone(),
        spec,
        PipelineConfig::default(),
    )
    .map_err(|e| e.to_string())?;
    let r = d.defend_default(&entry.raster).await.map_err(|e| e.to_string())?;
    ensure!(
        r.route == Route::Consolidated,
        "attacked image routed {:?}",
        r.route
    );
    let target = distinctive_tokens(entry.target_caption.as_deref().unwrap_or_default());
    let leaked: Vec<String> = distinctive_tokens(&r.final_text)
        .into_iter()
        .filter(|t| target.contains(t))
        .collect();
    ensure!(
        leaked.is_empty(),
        "final text {:?} keeps target tokens {leaked:?}",
        r.final_text
    );

    within(start.elapsed(), 5)?;
    Ok(format!(
        "early_clean, late_clean (r_0), consolidated ({:?}) in {:.2}s",
        r.final_text,
        start.elapsed().as_secs_f64()
    ))
}

fn guarded(f: impl FnOnce() -> Outcome) -> Outcome {
    std::panic::catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|_| Err("panicked".into()))
}

async fn guarded_async<F: std::future::Future<Output = Outcome>>(f: F) -> Outcome {
    AssertUnwindSafe(f)
        .catch_unwind()
        .await
        .unwrap_or_else(|_| Err("panicked".into()))
}

#[tokio::main]
async fn main() {
    let mut outcomes: Vec<(usize, &str, Outcome)> = Vec::new();
    outcomes.push((1, "divergence chain matches oracle", guarded(criterion_1)));
    outcomes.push((2, "KL axioms and row sums", guarded(criterion_2)));
    let mut profile = None;
    outcomes.push((
        3,
        "held-out clean pass rate",
        guarded_async(criterion_3(&mut profile)).await,
    ));
    match profile {
        Some(p) => {
            outcomes.push((
                4,
                "no false negatives at eps_min",
                guarded_async(criterion_4(&p)).await,
            ));
            let (five, six) = AssertUnwindSafe(criteria_5_and_6(&p))
                .catch_unwind()
                .await
                .unwrap_or_else(|_| (Err("panicked".into()), Err("panicked".into())));
            outcomes.push((5, "consolidator cost discipline", five));
            outcomes.push((6, "single encoder batch per defend", six));
            outcomes.push((7, "prompt fidelity", guarded(criterion_7)));
            outcomes.push((8, "detection metrics fixtures", guarded(criterion_8)));
            outcomes.push((9, "transform contracts", guarded(criterion_9)));
            outcomes.push((10, "end-to-end routes", guarded_async(criterion_10(&p)).await));
        }
        None => {
            for (n, name) in [
                (4, "no false negatives at eps_min"),
                (5, "consolidator cost discipline"),
                (6, "single encoder batch per defend"),
                (10, "end-to-end routes"),
            ] {
                outcomes.push((n, name, Err("no calibration profile".into())));
            }
            outcomes.push((7, "prompt fidelity", guarded(criterion_7)));
            outcomes.push((8, "detection metrics fixtures", guarded(criterion_8)));
            outcomes.push((9, "transform contracts", guarded(criterion_9)));
        }
    }
    outcomes.sort_by_key(|o| o.0);
    let mut failed = 0;
    for (n, name, outcome) in outcomes {
        match outcome {
            Ok(detail) => println!("PASS criterion {n:>2} {name}: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL criterion {n:>2} {name}: {detail}");
            }
        }
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
