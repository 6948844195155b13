//! Generates crop and mask views of one image and saves them as PNGs.
//!
//! cargo run --example transform_views -- [out_dir]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vlm_guard::transforms::generate_transform_set;
use vlm_guard::{RasterImage, TransformSpec};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let out = std::path::PathBuf::from(
        std::env::args()
            .nth(1)
            .unwrap_or_else(|| "transform-views".into()),
    );
    std::fs::create_dir_all(&out)?;

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let image = RasterImage::from_fn(96, 64, |x, y| {
        let r = (x * 255 / 95) as u8;
        let g = (y * 255 / 63) as u8;
        [r, g, rng.random_range(64..=255)]
    })?;
    image.save_png(out.join("original.png"))?;

    for (name, spec) in [
        ("crop", TransformSpec::crop(0.95, 4, 42)),
        ("mask", TransformSpec::mask(0.1, 4, 42)),
    ] {
        let views = generate_transform_set(&image, &spec)?;
        for (k, view) in views.iter().enumerate() {
            let masked = view.as_bytes().chunks(3).filter(|p| p == &[0, 0, 0]).count();
            println!(
                "{name} #{k}: {}x{} ({masked} black pixels)",
                view.width(),
                view.height()
            );
            view.save_png(out.join(format!("{name}-{k}.png")))?;
        }
        // Same spec, same views.
        assert_eq!(views, generate_transform_set(&image, &spec)?);
        println!("{name} fingerprint {}", spec.fingerprint());
    }
    println!("wrote views to {}", out.display());
    Ok(())
}
