//! Builds the consolidation prompt for a caption set, feeds it to a scripted
//! model that first ignores the format and then complies, and prints the
//! parsed result.
//!
//! cargo run --example consolidation_prompt

use vlm_guard::clients::mock::ScriptedLlm;
use vlm_guard::consolidation::{build_prompt, consolidate, render_consolidation};
use vlm_guard::ResponseSet;

#[tokio::main]
async fn main() -> Result<(), Box<dyn std::error::Error>> {
    let set = ResponseSet::new(
        "a wooden bench covered in snow, a small bird on the armrest",
        [
            "a bench in the snow with trees behind it",
            "a snowy park bench surrounded by trees",
            "a black and white photo of a bench in snow",
            "a bench covered in snow next to a green object",
        ],
    )?;
    println!("{}", build_prompt(&set));
    println!("----");

    let llm = ScriptedLlm::new([
        "The bench and the snow appear everywhere, so the caption keeps them.".to_owned(),
        render_consolidation(
            "a wooden bench covered in snow with trees in the background",
            "bench, snow and trees appear in most captions; the bird, the green object and the black and white filter appear once",
        ),
    ]);
    let result = consolidate(&set, &llm).await?;
    println!("model calls: {}", llm.prompts().len());
    println!("final caption: {}", result.final_caption);
    println!("explanation:   {}", result.explanation);
    Ok(())
}
