//! Image normalization: color constancy, training-time augmentation, resize and standardize.
//!
//! Images are `H x W x 3` arrays with values in `[0, 1]`.

mod augment;
mod color;
mod resize;

use std::path::Path;

use ndarray::{Array3, ArrayView3};

pub use augment::{augment, sample_rng, AugmentPolicy, Range, Toggle};
pub use color::{shades_of_gray, ColorConstancyConfig, ColorCorrection, NormOrder, ZeroChannelPolicy};
pub use resize::{resize_bilinear, standardize, to_chw};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Channel statistics of the ImageNet training set, used by pretrained backbones.
pub const IMAGENET_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
pub const IMAGENET_STD: [f64; 3] = [0.229, 0.224, 0.225];
pub const DEFAULT_SIDE: usize = 224;

pub(crate) fn check_rgb<T>(image: &ArrayView3<'_, T>) -> Result<()> {
    let (h, w, c) = image.dim();
    if c != 3 {
        return Err(Error::Image(format!("expected 3 channels, found {c}")));
    }
    if h == 0 || w == 0 {
        return Err(Error::Image(format!("degenerate image {h}x{w}")));
    }
    Ok(())
}

/// Loads an image file as RGB with values scaled to `[0, 1]`.
pub fn load_rgb<T: Scalar>(path: &Path) -> Result<Array3<T>> {
    let img = image::open(path)?.to_rgb8();
    let (w, h) = img.dimensions();
    let raw = img.into_raw();
    let data: Vec<T> = raw.iter().map(|&b| T::lit(b as f64 / 255.0)).collect();
    Array3::from_shape_vec((h as usize, w as usize, 3), data)
        .map_err(|e| Error::Image(e.to_string()))
}

/// Writes an 8-bit RGB image; the format follows the file extension.
pub fn save_rgb<T: Scalar>(image: &ArrayView3<'_, T>, path: &Path) -> Result<()> {
    check_rgb(image)?;
    let (h, w, _) = image.dim();
    let bytes: Vec<u8> = image
        .iter()
        .map(|v| (v.to_f64_lossy().clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    let buf = image::RgbImage::from_raw(w as u32, h as u32, bytes)
        .ok_or_else(|| Error::Image("buffer size mismatch".into()))?;
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    buf.save(path)?;
    Ok(())
}
