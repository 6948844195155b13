//! Content-preserving image transformations: large random crops and sparse
//! pixel masks.
//!
//! All randomness flows through [`TransformRng`] (ChaCha8, seeded with
//! `seed_from_u64`), so a `(image, TransformSpec)` pair always reproduces the
//! same transform set on every platform. [`generate_transform_set`] draws one
//! `u64` per view from a stream seeded with `spec.seed`; view `k` is produced
//! by a fresh `TransformRng` seeded with the `k`-th draw.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::raster::RasterImage;

pub type TransformRng = ChaCha8Rng;

/// Slack under which `0.95 * 100` floors to 95 despite binary representation error.
const FLOOR_SLACK: f64 = 1e-9;

#[derive(Debug, Error, PartialEq)]
pub enum TransformError {
    #[error("crop ratio must be in (0, 1], got {0}")]
    CropRatio(f64),
    #[error("mask fraction must be in [0, 1), got {0}")]
    MaskFraction(f64),
    #[error("transform count must be at least 1")]
    ZeroCount,
    #[error("crop of {width}x{height} at ratio {ratio} has a zero-length side")]
    DegenerateSize { width: usize, height: usize, ratio: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransformKind {
    RandomCrop,
    PixelMask,
}

impl std::fmt::Display for TransformKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            TransformKind::RandomCrop => "random_crop",
            TransformKind::PixelMask => "pixel_mask",
        })
    }
}

/// Which views to generate and how to seed them.
///
/// For [`TransformKind::RandomCrop`] `param` scales each linear dimension;
/// for [`TransformKind::PixelMask`] it is the fraction of pixels blacked out.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TransformSpec {
    pub kind: TransformKind,
    pub param: f64,
    pub count: usize,
    pub seed: u64,
}

impl Default for TransformSpec {
    fn default() -> Self {
        Self {
            kind: TransformKind::RandomCrop,
            param: 0.95,
            count: 10,
            seed: 0,
        }
    }
}

impl TransformSpec {
    pub fn crop(ratio: f64, count: usize, seed: u64) -> Self {
        Self {
            kind: TransformKind::RandomCrop,
            param: ratio,
            count,
            seed,
        }
    }

    pub fn mask(fraction: f64, count: usize, seed: u64) -> Self {
        Self {
            kind: TransformKind::PixelMask,
            param: fraction,
            count,
            seed,
        }
    }

    pub fn validate(&self) -> Result<(), TransformError> {
        if self.count == 0 {
            return Err(TransformError::ZeroCount);
        }
        match self.kind {
            TransformKind::RandomCrop => check_ratio(self.param),
            TransformKind::PixelMask => check_fraction(self.param),
        }
    }

    /// Stable hex digest identifying this spec; stored in calibration profiles.
    pub fn fingerprint(&self) -> String {
        let canonical = format!(
            "transform-spec/v1|{}|{:016x}|{}|{}",
            self.kind,
            self.param.to_bits(),
            self.count,
            self.seed
        );
        hex::encode(Sha256::digest(canonical.as_bytes()))
    }

    /// Seeds for each of the `count` views, in order.
    pub fn view_seeds(&self) -> Vec<u64> {
        let mut stream = TransformRng::seed_from_u64(self.seed);
        (0..self.count).map(|_| stream.next_u64()).collect()
    }
}

fn check_ratio(ratio: f64) -> Result<(), TransformError> {
    if ratio > 0.0 && ratio <= 1.0 {
        Ok(())
    } else {
        Err(TransformError::CropRatio(ratio))
    }
}

fn check_fraction(fraction: f64) -> Result<(), TransformError> {
    if (0.0..1.0).contains(&fraction) {
        Ok(())
    } else {
        Err(TransformError::MaskFraction(fraction))
    }
}

/// Placement of a crop inside its source image.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CropWindow {
    pub x: usize,
    pub y: usize,
    pub width: usize,
    pub height: usize,
}

/// `(floor(ratio * width), floor(ratio * height))`.
pub fn crop_dimensions(width: usize, height: usize, ratio: f64) -> Result<(usize, usize), TransformError> {
    check_ratio(ratio)?;
    let scale = |d: usize| (ratio * d as f64 + FLOOR_SLACK).floor() as usize;
    let (cw, ch) = (scale(width).min(width), scale(height).min(height));
    if cw == 0 || ch == 0 {
        return Err(TransformError::DegenerateSize { width, height, ratio });
    }
    Ok((cw, ch))
}

/// Draws a crop window: the x offset first, then the y offset, each uniform
/// over all valid positions.
pub fn random_crop_window<R: Rng + ?Sized>(
    width: usize,
    height: usize,
    ratio: f64,
    rng: &mut R,
) -> Result<CropWindow, TransformError> {
    let (cw, ch) = crop_dimensions(width, height, ratio)?;
    let x = rng.random_range(0..=width - cw);
    let y = rng.random_range(0..=height - ch);
    Ok(CropWindow {
        x,
        y,
        width: cw,
        height: ch,
    })
}

pub fn random_crop<R: Rng + ?Sized>(
    image: &RasterImage,
    ratio: f64,
    rng: &mut R,
) -> Result<RasterImage, TransformError> {
    let w = random_crop_window(image.width(), image.height(), ratio, rng)?;
    Ok(image.window(w.x, w.y, w.width, w.height))
}

/// Chooses `round(fraction * pixel_count)` distinct pixel indices with a
/// partial Fisher-Yates shuffle: for `i` in `0..count`, swap slot `i` with a
/// uniform slot in `i..pixel_count`. Returned in selection order.
pub fn mask_positions<R: Rng + ?Sized>(
    pixel_count: usize,
    fraction: f64,
    rng: &mut R,
) -> Result<Vec<usize>, TransformError> {
    check_fraction(fraction)?;
    let count = ((fraction * pixel_count as f64).round() as usize).min(pixel_count);
    let mut slots: Vec<usize> = (0..pixel_count).collect();
    for i in 0..count {
        let j = rng.random_range(i..pixel_count);
        slots.swap(i, j);
    }
    slots.truncate(count);
    Ok(slots)
}

/// Sets `round(fraction * N)` uniformly chosen pixels to black.
pub fn pixel_mask<R: Rng + ?Sized>(
    image: &RasterImage,
    fraction: f64,
    rng: &mut R,
) -> Result<RasterImage, TransformError> {
    let positions = mask_positions(image.pixel_count(), fraction, rng)?;
    let mut out = image.clone();
    for p in positions {
        out.set_pixel_index(p, [0, 0, 0]);
    }
    Ok(out)
}

/// Applies a single view of `spec` using the supplied generator.
pub fn apply_transform<R: Rng + ?Sized>(
    image: &RasterImage,
    spec: &TransformSpec,
    rng: &mut R,
) -> Result<RasterImage, TransformError> {
    match spec.kind {
        TransformKind::RandomCrop => random_crop(image, spec.param, rng),
        TransformKind::PixelMask => pixel_mask(image, spec.param, rng),
    }
}

/// Produces the `spec.count` transformed views of `image`, in view order.
pub fn generate_transform_set(
    image: &RasterImage,
    spec: &TransformSpec,
) -> Result<Vec<RasterImage>, TransformError> {
    spec.validate()?;
    spec.view_seeds()
        .into_iter()
        .map(|seed| apply_transform(image, spec, &mut TransformRng::seed_from_u64(seed)))
        .collect()
}
