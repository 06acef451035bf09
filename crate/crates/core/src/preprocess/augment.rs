use ndarray::{s, Array3, ArrayView3, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::resize::sample_bilinear;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Range {
    pub lo: f64,
    pub hi: f64,
}

impl Range {
    pub const fn new(lo: f64, hi: f64) -> Self {
        Range { lo, hi }
    }

    fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        if self.hi > self.lo {
            rng.random_range(self.lo..=self.hi)
        } else {
            self.lo
        }
    }
}

/// A transform parameter with an enable flag.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Toggle<V> {
    pub enabled: bool,
    pub value: V,
}

impl<V> Toggle<V> {
    pub const fn on(value: V) -> Self {
        Toggle {
            enabled: true,
            value,
        }
    }

    pub const fn off(value: V) -> Self {
        Toggle {
            enabled: false,
            value,
        }
    }

    fn get(&self) -> Option<&V> {
        self.enabled.then_some(&self.value)
    }
}

/// Random training-time transforms, applied in the order
/// color jitter (brightness, contrast, saturation, hue) -> flips -> affine warp -> noise -> blur.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentPolicy {
    /// Multiplicative brightness factor.
    pub brightness: Toggle<Range>,
    pub contrast: Toggle<Range>,
    pub saturation: Toggle<Range>,
    /// Hue shift as a fraction of a full turn.
    pub hue: Toggle<Range>,
    pub rotation_deg: Toggle<Range>,
    /// Maximum shift along each axis, as a fraction of the image side.
    pub translate: Toggle<f64>,
    pub scale: Toggle<Range>,
    pub shear_deg: Toggle<Range>,
    pub hflip: Toggle<f64>,
    pub vflip: Toggle<f64>,
    pub noise_std: Toggle<f64>,
    /// Gaussian blur sigma in pixels.
    pub blur_sigma: Toggle<Range>,
}

impl Default for AugmentPolicy {
    fn default() -> Self {
        AugmentPolicy {
            brightness: Toggle::on(Range::new(0.75, 1.25)),
            contrast: Toggle::on(Range::new(0.75, 1.25)),
            saturation: Toggle::on(Range::new(0.75, 1.25)),
            hue: Toggle::on(Range::new(-0.05, 0.05)),
            rotation_deg: Toggle::on(Range::new(-90.0, 90.0)),
            translate: Toggle::on(0.1),
            scale: Toggle::on(Range::new(0.8, 1.2)),
            shear_deg: Toggle::on(Range::new(-10.0, 10.0)),
            hflip: Toggle::on(0.5),
            vflip: Toggle::on(0.5),
            noise_std: Toggle::on(0.01),
            blur_sigma: Toggle::on(Range::new(0.0, 1.5)),
        }
    }
}

impl AugmentPolicy {
    /// Every transform disabled.
    pub fn identity() -> Self {
        let mut p = Self::default();
        p.set_all(false);
        p
    }

    pub fn set_all(&mut self, enabled: bool) {
        self.brightness.enabled = enabled;
        self.contrast.enabled = enabled;
        self.saturation.enabled = enabled;
        self.hue.enabled = enabled;
        self.rotation_deg.enabled = enabled;
        self.translate.enabled = enabled;
        self.scale.enabled = enabled;
        self.shear_deg.enabled = enabled;
        self.hflip.enabled = enabled;
        self.vflip.enabled = enabled;
        self.noise_std.enabled = enabled;
        self.blur_sigma.enabled = enabled;
    }

    pub fn is_identity(&self) -> bool {
        let mut p = *self;
        p.set_all(false);
        p == *self
    }

    pub fn validate(&self) -> Result<()> {
        let ranges = [
            ("brightness", self.brightness.value),
            ("contrast", self.contrast.value),
            ("saturation", self.saturation.value),
            ("hue", self.hue.value),
            ("rotation_deg", self.rotation_deg.value),
            ("scale", self.scale.value),
            ("shear_deg", self.shear_deg.value),
            ("blur_sigma", self.blur_sigma.value),
        ];
        for (name, r) in ranges {
            if !(r.lo <= r.hi) || !r.lo.is_finite() || !r.hi.is_finite() {
                return Err(Error::Image(format!("{name}: range [{}, {}] is not ordered", r.lo, r.hi)));
            }
        }
        for (name, r) in [
            ("brightness", self.brightness.value),
            ("contrast", self.contrast.value),
            ("saturation", self.saturation.value),
            ("blur_sigma", self.blur_sigma.value),
        ] {
            if r.lo < 0.0 {
                return Err(Error::Image(format!("{name}: lower bound must be >= 0")));
            }
        }
        if self.scale.value.lo <= 0.0 {
            return Err(Error::Image("scale: lower bound must be > 0".into()));
        }
        if self.hue.value.lo < -0.5 || self.hue.value.hi > 0.5 {
            return Err(Error::Image("hue: shift must lie in [-0.5, 0.5]".into()));
        }
        for (name, p) in [("hflip", self.hflip.value), ("vflip", self.vflip.value)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Image(format!("{name}: probability {p} outside [0, 1]")));
            }
        }
        if !(0.0..1.0).contains(&self.translate.value) {
            return Err(Error::Image("translate: fraction must lie in [0, 1)".into()));
        }
        if !(self.noise_std.value >= 0.0) {
            return Err(Error::Image("noise_std must be >= 0".into()));
        }
        Ok(())
    }

    fn any_affine(&self) -> bool {
        self.rotation_deg.enabled || self.translate.enabled || self.scale.enabled || self.shear_deg.enabled
    }
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Independent generator for one (seed, sample, epoch) triple.
pub fn sample_rng(seed: u64, sample: u64, epoch: u64) -> ChaCha8Rng {
    let h = splitmix64(splitmix64(splitmix64(seed) ^ sample) ^ epoch.rotate_left(32));
    ChaCha8Rng::seed_from_u64(h)
}

fn luminance(r: f64, g: f64, b: f64) -> f64 {
    0.299 * r + 0.587 * g + 0.114 * b
}

fn rgb_to_hsv(r: f64, g: f64, b: f64) -> (f64, f64, f64) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let d = max - min;
    let h = if d <= 0.0 {
        0.0
    } else if max == r {
        ((g - b) / d).rem_euclid(6.0) / 6.0
    } else if max == g {
        ((b - r) / d + 2.0) / 6.0
    } else {
        ((r - g) / d + 4.0) / 6.0
    };
    let s = if max <= 0.0 { 0.0 } else { d / max };
    (h, s, max)
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> (f64, f64, f64) {
    let h6 = h.rem_euclid(1.0) * 6.0;
    let i = h6.floor();
    let f = h6 - i;
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match i as i32 {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    }
}

fn map_pixels(img: &mut Array3<f64>, mut f: impl FnMut(f64, f64, f64) -> (f64, f64, f64)) {
    for mut px in img.lanes_mut(Axis(2)) {
        let (r, g, b) = f(px[0], px[1], px[2]);
        px[0] = r.clamp(0.0, 1.0);
        px[1] = g.clamp(0.0, 1.0);
        px[2] = b.clamp(0.0, 1.0);
    }
}

fn affine_warp(img: &Array3<f64>, rot_deg: f64, shear_deg: f64, scale: f64, tx: f64, ty: f64) -> Array3<f64> {
    let (h, w, _) = img.dim();
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let (sin, cos) = rot_deg.to_radians().sin_cos();
    let sh = shear_deg.to_radians().tan();
    // forward = R * [[1, sh], [0, 1]] * scale
    let m = [
        [cos * scale, (cos * sh - sin) * scale],
        [sin * scale, (sin * sh + cos) * scale],
    ];
    let det = m[0][0] * m[1][1] - m[0][1] * m[1][0];
    let inv = [
        [m[1][1] / det, -m[0][1] / det],
        [-m[1][0] / det, m[0][0] / det],
    ];
    let mut out = Array3::zeros((h, w, 3));
    for y in 0..h {
        for x in 0..w {
            let dx = x as f64 - cx - tx;
            let dy = y as f64 - cy - ty;
            let sx = inv[0][0] * dx + inv[0][1] * dy + cx;
            let sy = inv[1][0] * dx + inv[1][1] * dy + cy;
            for c in 0..3 {
                out[[y, x, c]] = sample_bilinear(img, sy, sx, c);
            }
        }
    }
    out
}

fn gaussian_blur(img: &Array3<f64>, sigma: f64) -> Array3<f64> {
    let radius = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let norm: f64 = kernel.iter().sum();
    let kernel: Vec<f64> = kernel.iter().map(|k| k / norm).collect();
    let (h, w, _) = img.dim();
    let clamp = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;

    let mut tmp = Array3::<f64>::zeros((h, w, 3));
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                tmp[[y, x, c]] = kernel
                    .iter()
                    .enumerate()
                    .map(|(k, &wgt)| wgt * img[[y, clamp(x as isize + k as isize - radius, w), c]])
                    .sum();
            }
        }
    }
    let mut out = Array3::zeros((h, w, 3));
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                out[[y, x, c]] = kernel
                    .iter()
                    .enumerate()
                    .map(|(k, &wgt)| wgt * tmp[[clamp(y as isize + k as isize - radius, h), x, c]])
                    .sum();
            }
        }
    }
    out
}

/// Applies one random draw of every enabled transform.
///
/// With every transform disabled the input is returned unchanged.
pub fn augment<T: Scalar, R: Rng + ?Sized>(image: &ArrayView3<'_, T>, policy: &AugmentPolicy, rng: &mut R) -> Array3<T> {
    if policy.is_identity() {
        return image.to_owned();
    }
    let mut img: Array3<f64> = image.mapv(|v| v.to_f64_lossy().clamp(0.0, 1.0));

    if let Some(r) = policy.brightness.get() {
        let f = r.draw(rng);
        map_pixels(&mut img, |r, g, b| (r * f, g * f, b * f));
    }
    if let Some(r) = policy.contrast.get() {
        let f = r.draw(rng);
        let n = (img.len() / 3) as f64;
        let mean = img
            .lanes(Axis(2))
            .into_iter()
            .map(|px| luminance(px[0], px[1], px[2]))
            .sum::<f64>()
            / n;
        map_pixels(&mut img, |r, g, b| {
            (mean + (r - mean) * f, mean + (g - mean) * f, mean + (b - mean) * f)
        });
    }
    if let Some(r) = policy.saturation.get() {
        let f = r.draw(rng);
        map_pixels(&mut img, |r, g, b| {
            let l = luminance(r, g, b);
            (l + (r - l) * f, l + (g - l) * f, l + (b - l) * f)
        });
    }
    if let Some(r) = policy.hue.get() {
        let d = r.draw(rng);
        map_pixels(&mut img, |r, g, b| {
            let (h, s, v) = rgb_to_hsv(r, g, b);
            hsv_to_rgb(h + d, s, v)
        });
    }

    if let Some(&p) = policy.hflip.get() {
        if rng.random_bool(p) {
            img = img.slice(s![.., ..;-1, ..]).to_owned();
        }
    }
    if let Some(&p) = policy.vflip.get() {
        if rng.random_bool(p) {
            img = img.slice(s![..;-1, .., ..]).to_owned();
        }
    }
    if policy.any_affine() {
        let (h, w, _) = img.dim();
        let rot = policy.rotation_deg.get().map_or(0.0, |r| r.draw(rng));
        let (tx, ty) = policy.translate.get().map_or((0.0, 0.0), |&f| {
            let tx = if f > 0.0 { rng.random_range(-f..=f) } else { 0.0 };
            let ty = if f > 0.0 { rng.random_range(-f..=f) } else { 0.0 };
            (tx * w as f64, ty * h as f64)
        });
        let scale = policy.scale.get().map_or(1.0, |r| r.draw(rng));
        let shear = policy.shear_deg.get().map_or(0.0, |r| r.draw(rng));
        img = affine_warp(&img, rot, shear, scale, tx, ty);
    }

    if let Some(&std) = policy.noise_std.get() {
        if std > 0.0 {
            let normal = Normal::new(0.0, std).expect("finite std");
            img.mapv_inplace(|v| v + normal.sample(rng));
        }
    }
    if let Some(r) = policy.blur_sigma.get() {
        let sigma = r.draw(rng);
        if sigma > 1e-3 {
            img = gaussian_blur(&img, sigma);
        }
    }

    img.mapv(|v| T::lit(v.clamp(0.0, 1.0)))
}
