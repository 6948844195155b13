//! Scores two caption sets with the late-stage statistic: one where all
//! captions agree and one where the first caption has been steered elsewhere.
//!
//! cargo run --example divergence_matrix

use vlm_guard::detection::{
    late_verdict, max_off_diagonal, response_divergence, row_normalize, similarity_matrix,
};
use vlm_guard::synthetic::synthetic_embed;

fn show(title: &str, captions: &[&str]) -> Result<(), Box<dyn std::error::Error>> {
    let vectors: Vec<_> = captions.iter().map(|c| synthetic_embed(c)).collect();
    let p = row_normalize(&similarity_matrix(&vectors)?);
    let d = response_divergence(&vectors)?;

    println!("== {title}");
    for (i, c) in captions.iter().enumerate() {
        println!("r{i}: {c}");
    }
    println!("row-normalized similarity:");
    for row in p.rows() {
        println!(
            "  {}",
            row.iter()
                .map(|x| format!("{x:.3}"))
                .collect::<Vec<_>>()
                .join(" ")
        );
    }
    println!("divergence (nats):");
    for row in d.rows() {
        println!(
            "  {}",
            row.iter()
                .map(|x| format!("{x:.3}"))
                .collect::<Vec<_>>()
                .join(" ")
        );
    }
    let n = d.size();
    let (i, j) = (0..n)
        .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
        .max_by(|a, b| d.get(a.0, a.1).total_cmp(&d.get(b.0, b.1)))
        .unwrap_or((0, 0));
    println!("max divergence {:.4} between r{i} and r{j}", max_off_diagonal(&d));
    println!("verdict at tau_late 0.05: {:?}\n", late_verdict(&d, 0.05).label);
    Ok(())
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    show(
        "consistent",
        &[
            "a red and white stop sign on a street corner",
            "a stop sign on a street corner",
            "a red stop sign near a street",
            "a red and white stop sign",
        ],
    )?;
    show(
        "steered original",
        &[
            "a plate of pasta with tomato sauce",
            "a stop sign on a street corner",
            "a red stop sign near a street",
            "a red and white stop sign",
        ],
    )
}
