//! Image decoding, perceptual hashing and tensor preprocessing.

use std::fs;
use std::path::Path;

use image::imageops::{self, FilterType};
use image::{DynamicImage, ImageFormat, RgbImage};

use crate::error::CorpusError;

/// Short side, in pixels, of images stored in a curated corpus.
pub const STORED_SHORT_SIDE: u32 = 128;

/// Decodes PNG or JPEG bytes; every other format is rejected.
pub fn decode(bytes: &[u8]) -> Result<RgbImage, String> {
    let format = image::guess_format(bytes).map_err(|e| e.to_string())?;
    if !matches!(format, ImageFormat::Png | ImageFormat::Jpeg) {
        return Err(format!("unsupported image format {format:?}"));
    }
    let img = image::load_from_memory_with_format(bytes, format).map_err(|e| e.to_string())?;
    Ok(img.to_rgb8())
}

pub fn open(path: &Path) -> Result<RgbImage, CorpusError> {
    let bytes = fs::read(path).map_err(|e| CorpusError::Load {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    decode(&bytes).map_err(|reason| CorpusError::Load {
        path: path.to_path_buf(),
        reason,
    })
}

/// 64-bit difference hash.
///
/// The image is reduced to 9x8 luma; bit `8*row + col` (most significant
/// first) is set when a pixel is brighter than its right neighbour.
pub fn dhash(img: &RgbImage) -> u64 {
    let gray = DynamicImage::ImageRgb8(img.clone()).to_luma8();
    let small = imageops::resize(&gray, 9, 8, FilterType::Triangle);
    let mut hash = 0u64;
    for y in 0..8 {
        for x in 0..8 {
            let left = small.get_pixel(x, y)[0];
            let right = small.get_pixel(x + 1, y)[0];
            hash = (hash << 1) | u64::from(left > right);
        }
    }
    hash
}

/// Resizes so the short side equals `short`, keeping the aspect ratio.
pub fn resize_short_side(img: &RgbImage, short: u32) -> RgbImage {
    let (w, h) = img.dimensions();
    let (nw, nh) = if w <= h {
        (short, ((h as u64 * short as u64 + w as u64 / 2) / w as u64).max(1) as u32)
    } else {
        (((w as u64 * short as u64 + h as u64 / 2) / h as u64).max(1) as u32, short)
    };
    if (nw, nh) == (w, h) {
        return img.clone();
    }
    imageops::resize(img, nw, nh, FilterType::Triangle)
}

/// Largest centred square crop.
pub fn center_crop_square(img: &RgbImage) -> RgbImage {
    let (w, h) = img.dimensions();
    let side = w.min(h);
    imageops::crop_imm(img, (w - side) / 2, (h - side) / 2, side, side).to_image()
}

/// Centre-crops to a square, resizes bilinearly to `size`x`size` and maps
/// 8-bit values to `[-1, 1]` via `(v/255 - 0.5) / 0.5`. Output is CHW, RGB.
pub fn to_tensor_data(img: &RgbImage, size: usize) -> Vec<f32> {
    let square = center_crop_square(img);
    let s = size as u32;
    let resized = if square.dimensions() == (s, s) {
        square
    } else {
        imageops::resize(&square, s, s, FilterType::Triangle)
    };
    let plane = size * size;
    let mut out = vec![0f32; 3 * plane];
    for (i, px) in resized.pixels().enumerate() {
        for c in 0..3 {
            out[c * plane + i] = normalize(px[c]);
        }
    }
    out
}

#[inline]
pub fn normalize(v: u8) -> f32 {
    (v as f32 / 255.0 - 0.5) / 0.5
}
