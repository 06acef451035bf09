use ndarray::{Array3, ArrayView3};

use super::check_rgb;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Bilinear sample at fractional pixel coordinates, clamping to the border.
pub(crate) fn sample_bilinear(img: &Array3<f64>, y: f64, x: f64, c: usize) -> f64 {
    let (h, w, _) = img.dim();
    let y = y.clamp(0.0, (h - 1) as f64);
    let x = x.clamp(0.0, (w - 1) as f64);
    let y0 = y.floor() as usize;
    let x0 = x.floor() as usize;
    let y1 = (y0 + 1).min(h - 1);
    let x1 = (x0 + 1).min(w - 1);
    let fy = y - y0 as f64;
    let fx = x - x0 as f64;
    let top = img[[y0, x0, c]] * (1.0 - fx) + img[[y0, x1, c]] * fx;
    let bottom = img[[y1, x0, c]] * (1.0 - fx) + img[[y1, x1, c]] * fx;
    top * (1.0 - fy) + bottom * fy
}

/// Resizes with half-pixel-centered bilinear interpolation (no antialiasing).
pub fn resize_bilinear<T: Scalar>(image: &ArrayView3<'_, T>, out_h: usize, out_w: usize) -> Result<Array3<T>> {
    check_rgb(image)?;
    if out_h == 0 || out_w == 0 {
        return Err(Error::Image(format!("target size {out_h}x{out_w} is empty")));
    }
    let (h, w, _) = image.dim();
    if (h, w) == (out_h, out_w) {
        return Ok(image.to_owned());
    }
    let src = image.mapv(|v| v.to_f64_lossy());
    let sy = h as f64 / out_h as f64;
    let sx = w as f64 / out_w as f64;
    Ok(Array3::from_shape_fn((out_h, out_w, 3), |(y, x, c)| {
        let fy = (y as f64 + 0.5) * sy - 0.5;
        let fx = (x as f64 + 0.5) * sx - 0.5;
        T::lit(sample_bilinear(&src, fy, fx, c))
    }))
}

/// Resizes to `side x side` and applies per-channel `(v - mean) / std`.
pub fn standardize<T: Scalar>(
    image: &ArrayView3<'_, T>,
    side: usize,
    mean: [f64; 3],
    std: [f64; 3],
) -> Result<Array3<T>> {
    if let Some(s) = std.iter().find(|&&s| !(s > 0.0)) {
        return Err(Error::Image(format!("std components must be positive, got {s}")));
    }
    let mut out = resize_bilinear(image, side, side)?;
    let mean = mean.map(T::lit);
    let inv_std = std.map(|s| T::lit(1.0 / s));
    for mut px in out.lanes_mut(ndarray::Axis(2)) {
        for c in 0..3 {
            px[c] = (px[c] - mean[c]) * inv_std[c];
        }
    }
    Ok(out)
}

/// `H x W x C` to `C x H x W`.
pub fn to_chw<T: Scalar>(image: &ArrayView3<'_, T>) -> Array3<T> {
    image.view().permuted_axes([2, 0, 1]).as_standard_layout().into_owned()
}
