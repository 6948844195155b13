//! Builds a small synthetic corpus, prints what the offline models report
//! for each view of a clean and an attacked entry, and round-trips the corpus
//! through its JSON-lines form.
//!
//! cargo run --example synthetic_world

use std::sync::Arc;

use vlm_guard::calibration::early_score;
use vlm_guard::synthetic::{make_corpus, FirstViewLlm, SyntheticCorpus, SyntheticWorld, View, WorldParams};
use vlm_guard::TransformSpec;

#[tokio::main]
async fn main() -> Result<(), Box<dyn std::error::Error>> {
    let spec = TransformSpec::default();
    let corpus = make_corpus(3, 1, 0.5, 21)?;

    let mut buf = Vec::new();
    corpus.write_jsonl(&mut buf)?;
    let reread = SyntheticCorpus::read_jsonl(buf.as_slice())?;
    println!(
        "corpus: {} entries, {} bytes as JSON lines",
        reread.len(),
        buf.len()
    );

    let world = Arc::new(SyntheticWorld::new(reread, spec, WorldParams::default())?);
    let clients = world.clients(Arc::new(FirstViewLlm));
    for entry in world.entries() {
        let score = early_score(&entry.raster, clients.encoder.as_ref(), &spec).await?;
        println!(
            "\nentry {} attacked={} early score {score:.6}",
            entry.id, entry.is_attacked
        );
        println!("  reference: {}", entry.reference_caption());
        if let Some(target) = &entry.target_caption {
            println!("  target:    {target}");
        }
        let corrupted = world.corrupted_views(entry);
        println!("  r0:  {}", world.synthetic_caption(entry, View::Original));
        for k in 0..spec.count {
            let mark = if corrupted.contains(&k) { "*" } else { " " };
            println!(
                "  r{:<2}{mark} {}",
                k + 1,
                world.synthetic_caption(entry, View::Transform(k))
            );
        }
    }
    Ok(())
}
