use ndarray::{Array3, ArrayView3, Axis};
use serde::{Deserialize, Serialize};

use super::check_rgb;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Minkowski norm order of the illuminant estimate.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "NormOrderRepr", into = "NormOrderRepr")]
pub enum NormOrder {
    Finite(f64),
    /// Max-RGB ("white patch").
    Infinity,
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum NormOrderRepr {
    Num(f64),
    Name(String),
}

impl TryFrom<NormOrderRepr> for NormOrder {
    type Error = String;

    fn try_from(r: NormOrderRepr) -> Result<Self, String> {
        let p = match r {
            NormOrderRepr::Num(p) => NormOrder::Finite(p),
            NormOrderRepr::Name(s) if s.eq_ignore_ascii_case("infinity") || s.eq_ignore_ascii_case("inf") => {
                NormOrder::Infinity
            }
            NormOrderRepr::Name(s) => return Err(format!("invalid norm order `{s}`")),
        };
        p.validate()?;
        Ok(p)
    }
}

impl From<NormOrder> for NormOrderRepr {
    fn from(p: NormOrder) -> Self {
        match p {
            NormOrder::Finite(v) => NormOrderRepr::Num(v),
            NormOrder::Infinity => NormOrderRepr::Name("infinity".into()),
        }
    }
}

impl NormOrder {
    fn validate(&self) -> Result<(), String> {
        match *self {
            NormOrder::Finite(p) if !(p >= 1.0 && p.is_finite()) => {
                Err(format!("norm order must be >= 1, got {p}"))
            }
            _ => Ok(()),
        }
    }
}

impl std::str::FromStr for NormOrder {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let p = if s.eq_ignore_ascii_case("infinity") || s.eq_ignore_ascii_case("inf") {
            NormOrder::Infinity
        } else {
            NormOrder::Finite(s.parse().map_err(|_| format!("invalid norm order `{s}`"))?)
        };
        p.validate()?;
        Ok(p)
    }
}

/// What to do when a channel is entirely zero and its illuminant is undefined.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ZeroChannelPolicy {
    #[default]
    Identity,
    Error,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ColorConstancyConfig {
    pub p: NormOrder,
    pub output_gamma: Option<f64>,
    pub zero_channel: ZeroChannelPolicy,
}

impl Default for ColorConstancyConfig {
    fn default() -> Self {
        ColorConstancyConfig {
            p: NormOrder::Finite(6.0),
            output_gamma: None,
            zero_channel: ZeroChannelPolicy::Identity,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ColorCorrection<T> {
    pub image: Array3<T>,
    /// Estimated per-channel illuminant.
    pub illuminant: [f64; 3],
    /// Set when the input was passed through unchanged because a channel was all zero.
    pub warning: Option<String>,
}

fn illuminant<T: Scalar>(image: &ArrayView3<'_, T>, p: NormOrder) -> [f64; 3] {
    let mut e = [0.0; 3];
    for (c, slot) in e.iter_mut().enumerate() {
        let ch = image.index_axis(Axis(2), c);
        *slot = match p {
            NormOrder::Infinity => ch.iter().map(|v| v.to_f64_lossy()).fold(0.0, f64::max),
            NormOrder::Finite(p) => {
                let n = ch.len() as f64;
                let s: f64 = ch.iter().map(|v| v.to_f64_lossy().max(0.0).powf(p)).sum();
                (s / n).powf(1.0 / p)
            }
        };
    }
    e
}

/// Shades-of-gray color constancy.
///
/// Each channel's illuminant is its Minkowski `p`-mean; channels are rescaled
/// by `mean(e) / e_c` so the estimated illuminant becomes achromatic, then
/// clipped to `[0, 1]`.
pub fn shades_of_gray<T: Scalar>(
    image: &ArrayView3<'_, T>,
    config: &ColorConstancyConfig,
) -> Result<ColorCorrection<T>> {
    check_rgb(image)?;
    config.p.validate().map_err(Error::Image)?;
    let e = illuminant(image, config.p);

    if let Some(c) = e.iter().position(|&v| v <= 0.0) {
        return match config.zero_channel {
            ZeroChannelPolicy::Error => Err(Error::Image(format!(
                "channel {c} is all zero, illuminant undefined"
            ))),
            ZeroChannelPolicy::Identity => Ok(ColorCorrection {
                image: image.to_owned(),
                illuminant: e,
                warning: Some(format!(
                    "channel {c} is all zero; color constancy skipped"
                )),
            }),
        };
    }

    let mean = (e[0] + e[1] + e[2]) / 3.0;
    let scale = [mean / e[0], mean / e[1], mean / e[2]];
    let gamma = config.output_gamma;
    let mut out = image.to_owned();
    for mut px in out.lanes_mut(Axis(2)) {
        for (c, v) in px.iter_mut().enumerate() {
            let mut x = (v.to_f64_lossy() * scale[c]).clamp(0.0, 1.0);
            if let Some(g) = gamma {
                x = x.powf(1.0 / g);
            }
            *v = T::lit(x);
        }
    }
    Ok(ColorCorrection {
        image: out,
        illuminant: e,
        warning: None,
    })
}
