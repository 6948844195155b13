//! Crop and mask contracts against straightforward reference implementations.

use proptest::prelude::*;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vlm_guard::transforms::{
    crop_dimensions, generate_transform_set, mask_positions, pixel_mask, random_crop,
};
use vlm_guard::{RasterImage, TransformSpec};

fn noise(w: usize, h: usize, seed: u64) -> RasterImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    RasterImage::from_fn(w, h, |_, _| [rng.random(), rng.random(), rng.random::<u8>() | 1]).unwrap()
}

/// Reference crop: integer arithmetic on percent-scaled ratios, explicit copy loop.
fn oracle_crop(img: &RasterImage, ratio_percent: usize, rng: &mut ChaCha8Rng) -> RasterImage {
    let cw = img.width() * ratio_percent / 100;
    let ch = img.height() * ratio_percent / 100;
    let x0 = rng.random_range(0..=img.width() - cw);
    let y0 = rng.random_range(0..=img.height() - ch);
    let mut bytes = Vec::new();
    for y in y0..y0 + ch {
        for x in x0..x0 + cw {
            bytes.extend_from_slice(&img.pixel(x, y));
        }
    }
    RasterImage::new(cw, ch, bytes).unwrap()
}

/// Reference mask: prefix of an index permutation built by the swap loop.
fn oracle_mask(img: &RasterImage, count: usize, rng: &mut ChaCha8Rng) -> RasterImage {
    let n = img.pixel_count();
    let mut perm: Vec<usize> = (0..n).collect();
    for i in 0..count {
        let j = rng.random_range(i..n);
        perm.swap(i, j);
    }
    let chosen: std::collections::HashSet<usize> = perm[..count].iter().copied().collect();
    let mut bytes = Vec::with_capacity(n * 3);
    for idx in 0..n {
        let (x, y) = (idx % img.width(), idx / img.width());
        bytes.extend_from_slice(&if chosen.contains(&idx) {
            [0, 0, 0]
        } else {
            img.pixel(x, y)
        });
    }
    RasterImage::new(img.width(), img.height(), bytes).unwrap()
}

fn black_pixels(img: &RasterImage) -> usize {
    img.as_bytes().chunks(3).filter(|p| p == &[0, 0, 0]).count()
}

#[test]
fn crop_matches_reference_at_whole_percent_ratios() {
    for (i, pct) in [50usize, 75, 90, 95, 99, 100].into_iter().enumerate() {
        let img = noise(37 + i, 23 + 2 * i, i as u64);
        let mut a = ChaCha8Rng::seed_from_u64(900 + i as u64);
        let mut b = a.clone();
        let got = random_crop(&img, pct as f64 / 100.0, &mut a).unwrap();
        assert_eq!(got, oracle_crop(&img, pct, &mut b), "ratio {pct}%");
    }
}

#[test]
fn documented_crop_sizes() {
    assert_eq!(crop_dimensions(100, 80, 0.95).unwrap(), (95, 76));
    assert_eq!(crop_dimensions(224, 224, 0.95).unwrap(), (212, 212));
    assert_eq!(crop_dimensions(10, 10, 1.0).unwrap(), (10, 10));
}

#[test]
fn ten_percent_mask_on_20x20_blacks_40() {
    let img = noise(20, 20, 5);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let out = pixel_mask(&img, 0.1, &mut rng).unwrap();
    assert_eq!(black_pixels(&out), 40);
}

#[test]
fn view_seeds_follow_the_seed_stream() {
    let spec = TransformSpec::crop(0.9, 4, 77);
    let mut stream = ChaCha8Rng::seed_from_u64(77);
    let expected: Vec<u64> = (0..4).map(|_| stream.next_u64()).collect();
    assert_eq!(spec.view_seeds(), expected);
    let img = noise(30, 30, 2);
    let views = generate_transform_set(&img, &spec).unwrap();
    for (view, seed) in views.iter().zip(expected) {
        assert_eq!(view, &oracle_crop(&img, 90, &mut ChaCha8Rng::seed_from_u64(seed)));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn mask_matches_reference(w in 1usize..40, h in 1usize..40, frac in 0.0f64..0.99, seed: u64, img_seed: u64) {
        let img = noise(w, h, img_seed);
        let mut a = ChaCha8Rng::seed_from_u64(seed);
        let mut b = a.clone();
        let count = (frac * (w * h) as f64).round() as usize;
        let got = pixel_mask(&img, frac, &mut a).unwrap();
        prop_assert_eq!(black_pixels(&got), count);
        prop_assert_eq!(got, oracle_mask(&img, count, &mut b));
    }

    #[test]
    fn mask_positions_are_distinct(n in 1usize..500, frac in 0.0f64..0.99, seed: u64) {
        let p = mask_positions(n, frac, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let set: std::collections::HashSet<_> = p.iter().collect();
        prop_assert_eq!(set.len(), p.len());
        prop_assert!(p.iter().all(|&i| i < n));
    }

    #[test]
    fn crop_window_lies_inside(w in 1usize..200, h in 1usize..200, ratio in 0.05f64..=1.0, seed: u64) {
        if let Ok((cw, ch)) = crop_dimensions(w, h, ratio) {
            prop_assert!(cw >= 1 && cw <= w && ch >= 1 && ch <= h);
            prop_assert_eq!(cw, ((ratio * w as f64) + 1e-9).floor() as usize);
            let img = noise(w, h, seed);
            let out = random_crop(&img, ratio, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            prop_assert_eq!((out.width(), out.height()), (cw, ch));
        }
    }

    #[test]
    fn identity_specs_return_copies(w in 1usize..30, h in 1usize..30, count in 1usize..6, seed: u64) {
        let img = noise(w, h, seed);
        for spec in [TransformSpec::crop(1.0, count, seed), TransformSpec::mask(0.0, count, seed)] {
            let views = generate_transform_set(&img, &spec).unwrap();
            prop_assert_eq!(views.len(), count);
            prop_assert!(views.iter().all(|v| v == &img));
        }
    }

    #[test]
    fn transform_sets_are_seed_deterministic(w in 4usize..40, h in 4usize..40, seed: u64, mask: bool) {
        let img = noise(w, h, seed ^ 1);
        let spec = if mask { TransformSpec::mask(0.1, 5, seed) } else { TransformSpec::crop(0.8, 5, seed) };
        prop_assert_eq!(generate_transform_set(&img, &spec).unwrap(), generate_transform_set(&img, &spec).unwrap());
    }
}
