//! Image decoding, luma conversion and the fixed patch grid.

use std::path::Path;

use image::{DynamicImage, ImageBuffer, Luma};

use crate::error::{contract, Error, Result};
use crate::tensor::{Real, Tensor};

/// Side of a square network patch.
pub const PATCH_SIZE: usize = 32;
/// Distance between neighbouring patch origins.
pub const PATCH_STRIDE: usize = 24;
const NORM_EPS: f64 = 1e-6;

/// Single-channel image with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    height: usize,
    width: usize,
    pixels: Vec<f64>,
}

impl GrayImage {
    pub fn new(height: usize, width: usize, pixels: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || pixels.len() != height * width {
            return Err(contract(format!("image {height}x{width} with {} pixels", pixels.len())));
        }
        if let Some(v) = pixels.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(contract(format!("pixel value {v} outside [0, 1]")));
        }
        Ok(Self { height, width, pixels })
    }

    /// Builds an image, clamping every value into `[0, 1]`.
    pub fn from_clamped(height: usize, width: usize, mut pixels: Vec<f64>) -> Result<Self> {
        for v in &mut pixels {
            *v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
        }
        Self::new(height, width, pixels)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.pixels[row * self.width + col]
    }

    /// Quantizes to 8 bits and writes a PNG.
    pub fn save_png(&self, path: &Path) -> Result<()> {
        let buf: ImageBuffer<Luma<u8>, Vec<u8>> = ImageBuffer::from_raw(
            self.width as u32,
            self.height as u32,
            self.pixels.iter().map(|&v| (v * 255.0).round() as u8).collect(),
        )
        .expect("buffer size matches dimensions");
        buf.save_with_format(path, image::ImageFormat::Png)?;
        Ok(())
    }
}

/// Converts interleaved 8-bit samples (1 or 3 channels) to luma in `[0, 1]`.
pub fn to_luma(samples: &[u8], height: usize, width: usize, channels: usize) -> Result<GrayImage> {
    if samples.len() != height * width * channels {
        return Err(contract(format!(
            "{} samples for {height}x{width}x{channels}",
            samples.len()
        )));
    }
    let pixels = match channels {
        1 => samples.iter().map(|&v| f64::from(v) / 255.0).collect(),
        3 => samples
            .chunks_exact(3)
            .map(|p| {
                let y = 0.299 * f64::from(p[0]) + 0.587 * f64::from(p[1]) + 0.114 * f64::from(p[2]);
                (y / 255.0).min(1.0)
            })
            .collect(),
        c => return Err(Error::Format(format!("unsupported channel count {c}"))),
    };
    GrayImage::new(height, width, pixels)
}

/// Decodes an 8-bit PNG or BMP and converts it to luma.
pub fn load_gray(path: &Path) -> Result<GrayImage> {
    let img = image::ImageReader::open(path)?.with_guessed_format()?.decode()?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    match img {
        DynamicImage::ImageLuma8(buf) => to_luma(buf.as_raw(), h, w, 1),
        DynamicImage::ImageRgb8(buf) => to_luma(buf.as_raw(), h, w, 3),
        DynamicImage::ImageRgba8(buf) => {
            let rgb: Vec<u8> = buf.as_raw().chunks_exact(4).flat_map(|p| [p[0], p[1], p[2]]).collect();
            to_luma(&rgb, h, w, 3)
        }
        DynamicImage::ImageLumaA8(buf) => {
            let g: Vec<u8> = buf.as_raw().chunks_exact(2).map(|p| p[0]).collect();
            to_luma(&g, h, w, 1)
        }
        other => Err(Error::Format(format!(
            "{}: only 8-bit gray or RGB rasters are accepted, got {:?}",
            path.display(),
            other.color()
        ))),
    }
}

/// Origins `(row, col)` of the 32×32 patches taken every 24 pixels.
pub fn extract_patch_grid(height: usize, width: usize) -> Result<Vec<(usize, usize)>> {
    if height < PATCH_SIZE || width < PATCH_SIZE {
        return Err(contract(format!(
            "image {height}x{width} is smaller than a {PATCH_SIZE}x{PATCH_SIZE} patch"
        )));
    }
    let axis = |extent: usize| (0..=extent - PATCH_SIZE).step_by(PATCH_STRIDE).collect::<Vec<_>>();
    let (rows, cols) = (axis(height), axis(width));
    Ok(rows.iter().flat_map(|&r| cols.iter().map(move |&c| (r, c))).collect())
}

/// Copies the patch at `origin` into a `[1, 32, 32]` tensor.
pub fn crop_patch<T: Real>(image: &GrayImage, origin: (usize, usize)) -> Result<Tensor<T>> {
    let (r0, c0) = origin;
    if r0 + PATCH_SIZE > image.height || c0 + PATCH_SIZE > image.width {
        return Err(contract(format!("patch at {origin:?} leaves the image")));
    }
    let mut data = Vec::with_capacity(PATCH_SIZE * PATCH_SIZE);
    for r in r0..r0 + PATCH_SIZE {
        let row = &image.pixels[r * image.width + c0..r * image.width + c0 + PATCH_SIZE];
        data.extend(row.iter().map(|&v| T::from_f64_lossy(v)));
    }
    Tensor::new(vec![1, PATCH_SIZE, PATCH_SIZE], data)
}

/// Per-patch standardization: `(x − mean) / (std + 1e-6)`.
pub fn normalize_patch<T: Real>(patch: &Tensor<T>) -> Tensor<T> {
    let n = patch.len() as f64;
    // shifted by the first sample so that constant patches give exact zeros
    let pivot = patch.data()[0].as_f64();
    let offset = patch.data().iter().map(|v| v.as_f64() - pivot).sum::<f64>() / n;
    let var = patch.data().iter().map(|v| (v.as_f64() - pivot - offset).powi(2)).sum::<f64>() / n;
    let denom = var.sqrt() + NORM_EPS;
    patch.map(|v| T::from_f64_lossy((v.as_f64() - pivot - offset) / denom))
}

/// Cropped and normalized co-located patches of both views.
pub fn patch_pairs<T: Real>(left: &GrayImage, right: &GrayImage) -> Result<Vec<(Tensor<T>, Tensor<T>)>> {
    if (left.height, left.width) != (right.height, right.width) {
        return Err(contract(format!(
            "views differ in size: {}x{} vs {}x{}",
            left.height, left.width, right.height, right.width
        )));
    }
    extract_patch_grid(left.height, left.width)?
        .into_iter()
        .map(|o| Ok((normalize_patch(&crop_patch(left, o)?), normalize_patch(&crop_patch(right, o)?))))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn luma_conversion() {
        assert_eq!(to_luma(&[255], 1, 1, 1).unwrap().pixels(), &[1.0]);
        assert_eq!(to_luma(&[255, 255, 255], 1, 1, 3).unwrap().pixels(), &[1.0]);
        assert!((to_luma(&[255, 0, 0], 1, 1, 3).unwrap().pixels()[0] - 0.299).abs() < 1e-15);
        assert!(matches!(to_luma(&[0, 0], 1, 1, 2), Err(Error::Format(_))));
    }

    #[test]
    fn patch_grid_counts() {
        assert_eq!(extract_patch_grid(64, 64).unwrap(), vec![(0, 0), (0, 24), (24, 0), (24, 24)]);
        assert_eq!(extract_patch_grid(360, 640).unwrap().len(), 26 * 14);
        assert_eq!(extract_patch_grid(32, 32).unwrap(), vec![(0, 0)]);
        assert!(extract_patch_grid(31, 64).is_err());
    }

    #[test]
    fn constant_patch_normalizes_to_zero() {
        let p = Tensor::<f64>::full(&[1, 32, 32], 0.4);
        assert!(normalize_patch(&p).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn unit_std_patch_keeps_unit_std() {
        // ±1 checkerboard has mean 0 and population std exactly 1.
        let data: Vec<f64> = (0..1024).map(|i| if (i / 32 + i % 32) % 2 == 0 { 1.0 } else { -1.0 }).collect();
        let out = normalize_patch(&Tensor::new(vec![1, 32, 32], data).unwrap());
        let m = out.data().iter().sum::<f64>() / 1024.0;
        let s = (out.data().iter().map(|v| (v - m) * (v - m)).sum::<f64>() / 1024.0).sqrt();
        assert!((s - 1.0).abs() < 1e-5);
    }

    #[test]
    fn mismatched_views_are_rejected() {
        let a = GrayImage::new(32, 32, vec![0.5; 1024]).unwrap();
        let b = GrayImage::new(32, 40, vec![0.5; 1280]).unwrap();
        assert!(patch_pairs::<f32>(&a, &b).is_err());
    }

    proptest! {
        #[test]
        fn normalized_patch_has_zero_mean_and_is_idempotent(vals in prop::collection::vec(0.0f64..1.0, 1024)) {
            let p = Tensor::new(vec![1, 32, 32], vals).unwrap();
            let once = normalize_patch(&p);
            let mean = once.data().iter().sum::<f64>() / 1024.0;
            prop_assert!(mean.abs() < 1e-6);
            let twice = normalize_patch(&once);
            for (a, b) in once.data().iter().zip(twice.data()) {
                prop_assert!((a - b).abs() <= 1e-5);
            }
        }

        #[test]
        fn grid_is_shared_and_in_bounds(h in 32usize..300, w in 32usize..300) {
            let grid = extract_patch_grid(h, w).unwrap();
            prop_assert_eq!(grid.len(), ((h - 32) / 24 + 1) * ((w - 32) / 24 + 1));
            prop_assert!(grid.iter().all(|&(r, c)| r + 32 <= h && c + 32 <= w && r % 24 == 0 && c % 24 == 0));
        }
    }
}
