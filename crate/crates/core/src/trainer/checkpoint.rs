use std::collections::HashMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Model, TrainConfig};
use crate::backbones::{BackboneSpec, Extractor};
use crate::error::{Error, Result};
use crate::fusion::{FusionHead, HeadSpec};
use crate::nn;
use crate::scalar::Scalar;

const META_KEY: &str = "lesionfuse";

/// Everything needed to rebuild a trained model besides its tensors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    /// `None` when features were fed in directly.
    pub backbone: Option<BackboneSpec>,
    pub c_f: f64,
    pub head: HeadSpec,
    pub train: TrainConfig,
    pub fold: usize,
    pub seed: u64,
}

/// Writes all parameters and buffers plus `meta` (as JSON under the
/// `lesionfuse` metadata key) to a safetensors file.
pub fn save_checkpoint<T: Scalar>(path: &Path, model: &mut Model<T>, meta: &CheckpointMeta) -> Result<()> {
    let tensors = nn::snapshot(model, "");
    let meta = HashMap::from([(META_KEY.to_string(), serde_json::to_string(meta)?)]);
    nn::write_tensors(path, &tensors, meta)
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<(CheckpointMeta, Model<T>)> {
    let (tensors, meta) = nn::read_tensors::<T>(path)?;
    let raw = meta
        .get(META_KEY)
        .ok_or_else(|| Error::Tensors(format!("{} has no `{META_KEY}` metadata", path.display())))?;
    let meta: CheckpointMeta = serde_json::from_str(raw)?;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut model = Model {
        backbone: meta.backbone.as_ref().map(Extractor::skeleton),
        head: FusionHead::new(meta.head.clone(), &mut rng)?,
    };
    nn::load_state(&mut model, "", &tensors)?;
    model.set_backbone_trainable(false);
    Ok((meta, model))
}
