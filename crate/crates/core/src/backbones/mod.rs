//! Convolutional feature extractors with a uniform freeze / feature-width
//! contract.

mod blocks;
mod zoo;

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ndarray::{Array2, Array4};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{self, flatten, Layer, Param, Parameterized, Pass, Sequential};
use crate::scalar::Scalar;

/// Environment variable pointing at the pretrained-weight cache.
pub const CACHE_ENV: &str = "LESIONFUSE_CACHE";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackboneName {
    Resnet50,
    Resnet101,
    Googlenet,
    Vgg13bn,
    Vgg19bn,
    Mobilenet,
    /// Small randomly initialized stack for fast CPU runs.
    Tiny,
}

impl BackboneName {
    pub const ALL: [BackboneName; 7] = [
        BackboneName::Resnet50,
        BackboneName::Resnet101,
        BackboneName::Googlenet,
        BackboneName::Vgg13bn,
        BackboneName::Vgg19bn,
        BackboneName::Mobilenet,
        BackboneName::Tiny,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            BackboneName::Resnet50 => "resnet50",
            BackboneName::Resnet101 => "resnet101",
            BackboneName::Googlenet => "googlenet",
            BackboneName::Vgg13bn => "vgg13bn",
            BackboneName::Vgg19bn => "vgg19bn",
            BackboneName::Mobilenet => "mobilenet",
            BackboneName::Tiny => "tiny",
        }
    }

    pub fn feature_dim(self) -> usize {
        match self {
            BackboneName::Resnet50 | BackboneName::Resnet101 => 2048,
            BackboneName::Googlenet | BackboneName::Mobilenet => 1024,
            BackboneName::Vgg13bn | BackboneName::Vgg19bn => 25088,
            BackboneName::Tiny => 64,
        }
    }

    pub fn is_vgg(self) -> bool {
        matches!(self, BackboneName::Vgg13bn | BackboneName::Vgg19bn)
    }

    /// False only for the test backbone, which is kept out of comparison reports.
    pub fn is_reportable(self) -> bool {
        self != BackboneName::Tiny
    }
}

impl fmt::Display for BackboneName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for BackboneName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key = s.trim().to_ascii_lowercase().replace(['-', '_'], "");
        BackboneName::ALL
            .into_iter()
            .find(|b| b.as_str() == key)
            .ok_or_else(|| Error::UnknownBackbone(s.to_string()))
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneSpec {
    pub name: BackboneName,
    pub feature_dim: usize,
    pub pretrained: bool,
    pub trainable: bool,
}

/// Directory holding `<name>.safetensors` weight files.
pub fn weights_dir() -> PathBuf {
    if let Some(dir) = std::env::var_os(CACHE_ENV).filter(|v| !v.is_empty()) {
        return PathBuf::from(dir);
    }
    let home = std::env::var_os("HOME").map(PathBuf::from).unwrap_or_else(|| PathBuf::from("."));
    home.join(".cache").join("lesionfuse")
}

pub fn weights_path(name: BackboneName) -> PathBuf {
    weights_dir().join(format!("{name}.safetensors"))
}

/// A feature extractor: standardized `N x 3 x H x W` images in, flattened
/// `N x feature_dim` features out.
pub struct Extractor<T> {
    spec: BackboneSpec,
    net: Sequential<T>,
    out_shape: Option<(usize, usize, usize, usize)>,
}

/// Builds an extractor by registry name. With `pretrained` the weights are
/// read from [`weights_path`]; otherwise layers are randomly initialized from
/// `seed`.
pub fn create_extractor<T: Scalar>(name: &str, pretrained: bool, seed: u64) -> Result<Extractor<T>> {
    let name: BackboneName = name.parse()?;
    let mut ex = Extractor::random(name, seed);
    if pretrained {
        let path = weights_path(name);
        if !path.is_file() {
            return Err(Error::WeightsUnavailable {
                name: name.to_string(),
                path,
                hint: format!(
                    "export the weights with `python3 scripts/export_weights.py --out {}` or point {CACHE_ENV} at a directory containing {name}.safetensors",
                    weights_dir().display()
                ),
            });
        }
        ex.load_weights(&path)?;
    }
    Ok(ex)
}

impl<T: Scalar> Extractor<T> {
    pub fn random(name: BackboneName, seed: u64) -> Self {
        Self::build(name, false, seed)
    }

    /// Layer graph matching `spec` (including any input transform implied by
    /// pretrained weights), ready to receive saved tensors.
    pub fn skeleton(spec: &BackboneSpec) -> Self {
        Self::build(spec.name, spec.pretrained, 0)
    }

    fn build(name: BackboneName, pretrained: bool, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let net = match name {
            BackboneName::Resnet50 => zoo::resnet([3, 4, 6, 3], &mut rng),
            BackboneName::Resnet101 => zoo::resnet([3, 4, 23, 3], &mut rng),
            BackboneName::Googlenet => zoo::googlenet(pretrained, &mut rng),
            BackboneName::Vgg13bn => zoo::vgg_bn(&zoo::vgg13_cfg(), &mut rng),
            BackboneName::Vgg19bn => zoo::vgg_bn(&zoo::vgg19_cfg(), &mut rng),
            BackboneName::Mobilenet => zoo::mobilenet(&mut rng),
            BackboneName::Tiny => zoo::tiny(&mut rng),
        };
        Extractor {
            spec: BackboneSpec {
                name,
                feature_dim: name.feature_dim(),
                pretrained,
                trainable: true,
            },
            net,
            out_shape: None,
        }
    }

    /// Loads a weight file by parameter name; entries the extractor does not
    /// use (e.g. the source-task classifier) are ignored.
    pub fn load_weights(&mut self, path: &Path) -> Result<()> {
        if self.spec.name == BackboneName::Googlenet && !self.spec.pretrained {
            // Rebuild with the input transform the published weights expect.
            let trainable = self.spec.trainable;
            *self = Self::build(self.spec.name, true, 0);
            self.set_trainable(trainable);
        }
        let (tensors, _) = nn::read_tensors::<T>(path)?;
        nn::load_state(&mut self.net, "", &tensors)?;
        self.spec.pretrained = true;
        Ok(())
    }

    pub fn spec(&self) -> &BackboneSpec {
        &self.spec
    }

    pub fn feature_dim(&self) -> usize {
        self.spec.feature_dim
    }

    pub fn trainable(&self) -> bool {
        self.spec.trainable
    }

    /// Freezes (`false`) or unfreezes the extractor. Values are kept as-is.
    /// A frozen extractor runs in inference mode, so batch-norm statistics
    /// stay fixed as well.
    pub fn set_trainable(&mut self, flag: bool) {
        nn::set_trainable(&mut self.net, flag);
        self.spec.trainable = flag;
    }

    pub fn features(&mut self, images: Array4<T>, pass: Pass) -> Array2<T> {
        let pass = if self.spec.trainable { pass } else { Pass::Infer };
        let out = self.net.forward(images, pass);
        self.out_shape = (pass == Pass::Train).then(|| out.dim());
        flatten(out.into_dyn())
    }

    /// Backpropagates a gradient w.r.t. the features of the last training
    /// forward. No-op when frozen.
    pub fn backward(&mut self, grad: Array2<T>) {
        if !self.spec.trainable {
            return;
        }
        let shape = self.out_shape.take().expect("extractor backward without a training forward");
        let g = grad.into_shape_with_order(shape).expect("feature gradient shape");
        self.net.backward(g);
    }
}

impl<T: Scalar> Parameterized<T> for Extractor<T> {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.net.visit(prefix, f);
    }
}
