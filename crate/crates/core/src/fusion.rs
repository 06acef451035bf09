//! Combination-factor arithmetic and the reducer/classifier head.
//!
//! The image features are squeezed by a small nonlinear reducer to `N_img`
//! values chosen so that image features make up roughly the fraction `c_f` of
//! the classifier input, with the clinical width `N_cli` held fixed:
//! `N_img = ceil(N_cli / (1 - c_f) - N_cli)`, `T = N_img + N_cli`.

use std::fmt;
use std::str::FromStr;

use ndarray::{concatenate, s, Array2, ArrayView1, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::backbones::BackboneName;
use crate::data::{ClinicalVector, N_CLASSES, N_CLI};
use crate::error::{Error, Result};
use crate::nn::{join, Dropout, Linear, Param, Parameterized, Pass, Relu2};
use crate::scalar::Scalar;

/// Width of the extra hidden layer used in front of the reducer for VGG.
pub const VGG_INTERMEDIATE: usize = 1024;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    ImageOnly,
    Fused,
}

impl Scenario {
    pub const ALL: [Scenario; 2] = [Scenario::ImageOnly, Scenario::Fused];

    pub fn as_str(self) -> &'static str {
        match self {
            Scenario::ImageOnly => "image_only",
            Scenario::Fused => "fused",
        }
    }

    pub fn uses_clinical(self) -> bool {
        self == Scenario::Fused
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Scenario {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().replace('-', "_").as_str() {
            "image_only" | "image" => Ok(Scenario::ImageOnly),
            "fused" | "image_clinical" => Ok(Scenario::Fused),
            _ => Err(Error::Fusion(format!("unknown scenario `{s}` (expected image_only or fused)"))),
        }
    }
}

/// `ceil`, except that values within rounding noise of an integer snap to it.
/// `28 / (1 - 0.9)` evaluates to `280.00000000000006` in binary floating point.
fn ceil_snapped(x: f64) -> f64 {
    let r = x.round();
    if (x - r).abs() <= 1e-9 * x.abs().max(1.0) {
        r
    } else {
        x.ceil()
    }
}

fn check_factor(c_f: f64) -> Result<()> {
    if !(0.0..1.0).contains(&c_f) {
        return Err(Error::Fusion(format!("combination factor must be in [0, 1), got {c_f}")));
    }
    Ok(())
}

/// Reducer output width for `n_cli` clinical features at combination factor `c_f`.
pub fn reduced_image_features(n_cli: usize, c_f: f64) -> Result<usize> {
    check_factor(c_f)?;
    if n_cli == 0 {
        return Err(Error::Fusion("clinical width must be positive".into()));
    }
    let n = n_cli as f64;
    let n_img = ceil_snapped(n / (1.0 - c_f) - n);
    if n_img < 1.0 {
        return Err(Error::Fusion("reducer width must be positive".into()));
    }
    Ok(n_img as usize)
}

/// Classifier input width of the fused head, `N_img + n_cli`.
pub fn total_features(n_cli: usize, c_f: f64) -> Result<usize> {
    Ok(reduced_image_features(n_cli, c_f)? + n_cli)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FusionConfig {
    pub c_f: f64,
    pub n_cli: usize,
    pub backbone_dim: usize,
    pub scenario: Scenario,
    pub dropout: f64,
    pub vgg_intermediate: Option<usize>,
}

impl FusionConfig {
    /// Defaults for a registry backbone: 28 clinical features, dropout 0.5,
    /// and the 1024-wide intermediate layer for the VGG family.
    pub fn for_backbone(backbone: BackboneName, scenario: Scenario, c_f: f64) -> Self {
        FusionConfig {
            c_f,
            n_cli: N_CLI,
            backbone_dim: backbone.feature_dim(),
            scenario,
            dropout: 0.5,
            vgg_intermediate: backbone.is_vgg().then_some(VGG_INTERMEDIATE),
        }
    }

    pub fn n_img(&self) -> Result<usize> {
        reduced_image_features(self.n_cli, self.c_f)
    }

    pub fn total(&self) -> Result<usize> {
        total_features(self.n_cli, self.c_f)
    }
}

/// Self-describing head layout.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadSpec {
    pub scenario: Scenario,
    /// `(in, out)` widths; each layer is followed by ReLU and dropout.
    pub reducer_layers: Vec<(usize, usize)>,
    pub n_cli: usize,
    pub concat_width: usize,
    /// `(concat_width, 6)`, followed by softmax.
    pub classifier: (usize, usize),
    pub dropout: f64,
}

impl HeadSpec {
    pub fn backbone_dim(&self) -> usize {
        self.reducer_layers[0].0
    }

    pub fn n_img(&self) -> usize {
        self.reducer_layers.last().expect("non-empty reducer").1
    }
}

pub fn build_head(config: &FusionConfig) -> Result<HeadSpec> {
    if config.backbone_dim == 0 {
        return Err(Error::Fusion("backbone width must be positive".into()));
    }
    if !(0.0..1.0).contains(&config.dropout) {
        return Err(Error::Fusion(format!("dropout must be in [0, 1), got {}", config.dropout)));
    }
    let n_img = config.n_img()?;
    let mut reducer_layers = Vec::new();
    let mut width = config.backbone_dim;
    if let Some(mid) = config.vgg_intermediate {
        if mid == 0 {
            return Err(Error::Fusion("intermediate width must be positive".into()));
        }
        reducer_layers.push((width, mid));
        width = mid;
    }
    reducer_layers.push((width, n_img));
    let concat_width = match config.scenario {
        Scenario::Fused => n_img + config.n_cli,
        Scenario::ImageOnly => n_img,
    };
    Ok(HeadSpec {
        scenario: config.scenario,
        reducer_layers,
        n_cli: config.n_cli,
        concat_width,
        classifier: (concat_width, N_CLASSES),
        dropout: config.dropout,
    })
}

struct ReducerLayer<T> {
    linear: Linear<T>,
    relu: Relu2,
    dropout: Dropout<T>,
}

/// Output of a head forward pass; `probs` is the row-wise softmax of `logits`.
#[derive(Clone, Debug)]
pub struct HeadOutput<T> {
    pub logits: Array2<T>,
    pub probs: Array2<T>,
}

/// Trainable head built from a [`HeadSpec`]. Parameters are named
/// `reducer.<i>.weight|bias` and `classifier.weight|bias`.
pub struct FusionHead<T> {
    spec: HeadSpec,
    reducer: Vec<ReducerLayer<T>>,
    classifier: Linear<T>,
}

impl<T: Scalar> FusionHead<T> {
    pub fn new<R: Rng + ?Sized>(spec: HeadSpec, rng: &mut R) -> Result<Self> {
        if spec.reducer_layers.is_empty() {
            return Err(Error::Fusion("reducer needs at least one layer".into()));
        }
        for pair in spec.reducer_layers.windows(2) {
            if pair[0].1 != pair[1].0 {
                return Err(Error::Fusion(format!("reducer widths do not chain: {:?}", spec.reducer_layers)));
            }
        }
        let expected = match spec.scenario {
            Scenario::Fused => spec.n_img() + spec.n_cli,
            Scenario::ImageOnly => spec.n_img(),
        };
        if spec.concat_width != expected || spec.classifier.0 != expected || spec.classifier.1 != N_CLASSES {
            return Err(Error::Fusion(format!(
                "inconsistent head: concat {} / classifier {:?}, expected {expected} -> {N_CLASSES}",
                spec.concat_width, spec.classifier
            )));
        }
        let reducer = spec
            .reducer_layers
            .iter()
            .map(|&(i, o)| ReducerLayer {
                linear: Linear::new(i, o, rng),
                relu: Relu2::new(),
                dropout: Dropout::new(spec.dropout),
            })
            .collect();
        let classifier = Linear::new(spec.classifier.0, spec.classifier.1, rng);
        Ok(FusionHead {
            spec,
            reducer,
            classifier,
        })
    }

    pub fn spec(&self) -> &HeadSpec {
        &self.spec
    }

    /// `features` is `N x backbone_dim`; `clinical` is `N x n_cli` and must be
    /// present exactly when the scenario is fused. The rng drives dropout.
    pub fn forward<R: Rng + ?Sized>(
        &mut self,
        features: &Array2<T>,
        clinical: Option<&Array2<T>>,
        pass: Pass,
        rng: &mut R,
    ) -> Result<HeadOutput<T>> {
        if features.ncols() != self.spec.backbone_dim() {
            return Err(Error::Fusion(format!(
                "image features have width {}, head expects {}",
                features.ncols(),
                self.spec.backbone_dim()
            )));
        }
        match (self.spec.scenario, clinical) {
            (Scenario::Fused, None) => return Err(Error::Fusion("fused head needs clinical features".into())),
            (Scenario::ImageOnly, Some(_)) => {
                return Err(Error::Fusion("image-only head takes no clinical features".into()))
            }
            (_, Some(c)) if c.ncols() != self.spec.n_cli || c.nrows() != features.nrows() => {
                return Err(Error::Fusion(format!(
                    "clinical block is {}x{}, expected {}x{}",
                    c.nrows(),
                    c.ncols(),
                    features.nrows(),
                    self.spec.n_cli
                )))
            }
            _ => {}
        }
        let mut h = features.clone();
        for layer in &mut self.reducer {
            h = layer.linear.forward(&h, pass);
            h = layer.relu.forward(h, pass);
            h = layer.dropout.forward(h, pass, rng);
        }
        let combined = match clinical {
            Some(c) => concatenate(Axis(1), &[h.view(), c.view()]).expect("matching rows"),
            None => h,
        };
        let logits = self.classifier.forward(&combined, pass);
        let probs = softmax_rows(&logits);
        Ok(HeadOutput { logits, probs })
    }

    /// Gradient w.r.t. the image features of the last training forward,
    /// given the gradient w.r.t. the logits.
    pub fn backward(&mut self, grad_logits: &Array2<T>) -> Array2<T> {
        let g = self.classifier.backward(grad_logits);
        let mut g = g.slice(s![.., ..self.spec.n_img()]).to_owned();
        for layer in self.reducer.iter_mut().rev() {
            g = layer.dropout.backward(g);
            g = layer.relu.backward(g);
            g = layer.linear.backward(&g);
        }
        g
    }
}

impl<T: Scalar> Parameterized<T> for FusionHead<T> {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        for (i, layer) in self.reducer.iter_mut().enumerate() {
            layer.linear.visit(&join(prefix, &format!("reducer.{i}")), f);
        }
        self.classifier.visit(&join(prefix, "classifier"), f);
    }
}

pub fn softmax_rows<T: Scalar>(logits: &Array2<T>) -> Array2<T> {
    let mut out = logits.clone();
    for mut row in out.rows_mut() {
        let max = row.fold(T::neg_infinity(), |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let sum: T = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    out
}

/// Single-sample convenience wrapper around [`FusionHead::forward`].
pub fn fuse_forward<T: Scalar, R: Rng + ?Sized>(
    image_features: ArrayView1<'_, T>,
    clinical: Option<&ClinicalVector<T>>,
    head: &mut FusionHead<T>,
    pass: Pass,
    rng: &mut R,
) -> Result<[T; N_CLASSES]> {
    let f = image_features.to_owned().insert_axis(Axis(0));
    let c = clinical.map(|c| Array2::from_shape_vec((1, c.0.len()), c.0.to_vec()).expect("row"));
    let out = head.forward(&f, c.as_ref(), pass, rng)?;
    let mut p = [T::zero(); N_CLASSES];
    for (dst, &v) in p.iter_mut().zip(out.probs.row(0)) {
        *dst = v;
    }
    Ok(p)
}
