//! Fixed-size RGB raster used throughout the pipeline.

use std::io::Cursor;

use image::{ImageFormat, RgbImage};
use thiserror::Error;

/// Number of interleaved channels in a [`RasterImage`].
pub const CHANNELS: usize = 3;

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("image dimensions must be at least 1x1, got {width}x{height}")]
    EmptyDimensions { width: usize, height: usize },
    #[error("pixel buffer has {actual} bytes, expected {expected} for {width}x{height} RGB")]
    BufferLength {
        width: usize,
        height: usize,
        expected: usize,
        actual: usize,
    },
    #[error("failed to decode image: {0}")]
    Decode(String),
    #[error("failed to encode image: {0}")]
    Encode(String),
}

/// Decoded RGB image, 8 bits per channel, row-major with interleaved channels.
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct RasterImage {
    width: usize,
    height: usize,
    pixels: Vec<u8>,
}

impl std::fmt::Debug for RasterImage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("RasterImage")
            .field("width", &self.width)
            .field("height", &self.height)
            .finish_non_exhaustive()
    }
}

impl RasterImage {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self, ImageError> {
        if width == 0 || height == 0 {
            return Err(ImageError::EmptyDimensions { width, height });
        }
        let expected = width * height * CHANNELS;
        if pixels.len() != expected {
            return Err(ImageError::BufferLength {
                width,
                height,
                expected,
                actual: pixels.len(),
            });
        }
        Ok(Self {
            width,
            height,
            pixels,
        })
    }

    /// Builds an image by evaluating `f(x, y)` for every pixel.
    pub fn from_fn(
        width: usize,
        height: usize,
        mut f: impl FnMut(usize, usize) -> [u8; 3],
    ) -> Result<Self, ImageError> {
        let mut pixels = Vec::with_capacity(width * height * CHANNELS);
        for y in 0..height {
            for x in 0..width {
                pixels.extend_from_slice(&f(x, y));
            }
        }
        Self::new(width, height, pixels)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.pixels
    }

    pub fn into_bytes(self) -> Vec<u8> {
        self.pixels
    }

    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * CHANNELS;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    pub(crate) fn set_pixel_index(&mut self, index: usize, rgb: [u8; 3]) {
        let i = index * CHANNELS;
        self.pixels[i..i + CHANNELS].copy_from_slice(&rgb);
    }

    /// Copies the `width`x`height` window whose top-left corner is `(x, y)`.
    ///
    /// The window must lie inside the image.
    pub fn window(&self, x: usize, y: usize, width: usize, height: usize) -> Self {
        assert!(x + width <= self.width && y + height <= self.height);
        let mut pixels = Vec::with_capacity(width * height * CHANNELS);
        for row in y..y + height {
            let start = (row * self.width + x) * CHANNELS;
            pixels.extend_from_slice(&self.pixels[start..start + width * CHANNELS]);
        }
        Self {
            width,
            height,
            pixels,
        }
    }

    /// Decodes PNG or JPEG bytes (format sniffed from content) into RGB.
    pub fn decode(bytes: &[u8]) -> Result<Self, ImageError> {
        let decoded = image::load_from_memory(bytes).map_err(|e| ImageError::Decode(e.to_string()))?;
        let rgb = decoded.to_rgb8();
        let (w, h) = rgb.dimensions();
        Self::new(w as usize, h as usize, rgb.into_raw())
    }

    pub fn open(path: impl AsRef<std::path::Path>) -> Result<Self, ImageError> {
        let bytes = std::fs::read(path.as_ref())
            .map_err(|e| ImageError::Decode(format!("{}: {e}", path.as_ref().display())))?;
        Self::decode(&bytes)
    }

    /// Lossless PNG encoding, used for the wire format and fixtures.
    pub fn to_png(&self) -> Result<Vec<u8>, ImageError> {
        let buf = RgbImage::from_raw(self.width as u32, self.height as u32, self.pixels.clone())
            .ok_or_else(|| ImageError::Encode("buffer does not match dimensions".into()))?;
        let mut out = Cursor::new(Vec::new());
        buf.write_to(&mut out, ImageFormat::Png)
            .map_err(|e| ImageError::Encode(e.to_string()))?;
        Ok(out.into_inner())
    }

    pub fn save_png(&self, path: impl AsRef<std::path::Path>) -> Result<(), ImageError> {
        let png = self.to_png()?;
        std::fs::write(path.as_ref(), png)
            .map_err(|e| ImageError::Encode(format!("{}: {e}", path.as_ref().display())))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_buffers() {
        assert!(matches!(
            RasterImage::new(0, 4, vec![]),
            Err(ImageError::EmptyDimensions { .. })
        ));
        assert!(matches!(
            RasterImage::new(2, 2, vec![0; 11]),
            Err(ImageError::BufferLength { expected: 12, .. })
        ));
    }

    #[test]
    fn window_copies_rows() {
        let img = RasterImage::from_fn(4, 3, |x, y| [x as u8, y as u8, 0]).unwrap();
        let w = img.window(1, 1, 2, 2);
        assert_eq!(w.pixel(0, 0), [1, 1, 0]);
        assert_eq!(w.pixel(1, 1), [2, 2, 0]);
    }

    #[test]
    fn png_round_trip() {
        let img = RasterImage::from_fn(7, 5, |x, y| [x as u8 * 30, y as u8 * 40, 9]).unwrap();
        let back = RasterImage::decode(&img.to_png().unwrap()).unwrap();
        assert_eq!(img, back);
    }

    #[test]
    fn undecodable_bytes() {
        assert!(matches!(
            RasterImage::decode(b"not an image"),
            Err(ImageError::Decode(_))
        ));
    }
}
