//! Experiment configuration, read from TOML.
//!
//! ```toml
//! manifest = "data/manifest.csv"
//! backbones = ["resnet50", "mobilenet"]
//! scenarios = ["image_only", "fused"]
//! c_f = 0.8               # or a sweep list: [0.5, 0.6, 0.7, 0.8, 0.9]
//! folds = 5
//! seed = 0
//!
//! [train]
//! phase1_epochs = 50
//! batch_size = 32
//! ```
//!
//! Every key is optional except `manifest`; defaults follow the reference
//! protocol (5 folds, two-phase Adam schedule, shades of gray with p = 6).

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use lesionfuse_core::backbones::BackboneName;
use lesionfuse_core::data::DEFAULT_AGE_SCALE;
use lesionfuse_core::fusion::{reduced_image_features, Scenario};
use lesionfuse_core::preprocess::{AugmentPolicy, ColorConstancyConfig, IMAGENET_MEAN, IMAGENET_STD};
use lesionfuse_core::stats::CompareOptions;
use lesionfuse_core::trainer::TrainConfig;
use serde::{Deserialize, Deserializer, Serialize};
use sha2::{Digest, Sha256};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub manifest: PathBuf,
    /// Directory image paths are resolved against; defaults to the manifest's directory.
    pub image_root: Option<PathBuf>,
    pub out_dir: PathBuf,
    pub backbones: Vec<String>,
    pub scenarios: Vec<Scenario>,
    #[serde(deserialize_with = "one_or_many")]
    pub c_f: Vec<f64>,
    pub folds: usize,
    pub seed: u64,
    /// Repetitions of the whole cross-validation with seeds `seed, seed + 1, ...`.
    pub repeats: usize,
    pub group_by_patient: bool,
    /// Load published ImageNet weights (ignored for the `tiny` test backbone).
    pub pretrained: bool,
    pub image_side: usize,
    pub age_scale: f64,
    pub head_dropout: f64,
    pub normalize_mean: [f64; 3],
    pub normalize_std: [f64; 3],
    pub color_constancy: bool,
    pub color: ColorConstancyConfig,
    pub augment: AugmentPolicy,
    pub train: TrainConfig,
    pub stats: StatsConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StatsConfig {
    /// Metric compared across treatments: one of acc, bacc, p, r, f1, auc.
    pub metric: String,
    pub alpha_friedman: f64,
    pub alpha_wilcoxon: f64,
    pub holm: bool,
}

impl Default for StatsConfig {
    fn default() -> Self {
        let o = CompareOptions::default();
        StatsConfig {
            metric: "bacc".into(),
            alpha_friedman: o.alpha_friedman,
            alpha_wilcoxon: o.alpha_wilcoxon,
            holm: o.holm,
        }
    }
}

impl StatsConfig {
    pub fn options(&self) -> CompareOptions {
        CompareOptions {
            alpha_friedman: self.alpha_friedman,
            alpha_wilcoxon: self.alpha_wilcoxon,
            holm: self.holm,
        }
    }

    /// Position of the metric in `METRIC_NAMES` order.
    pub fn metric_index(&self) -> Result<usize> {
        Ok(match self.metric.to_ascii_lowercase().as_str() {
            "acc" => 0,
            "bacc" => 1,
            "p" | "precision" => 2,
            "r" | "recall" => 3,
            "f1" => 4,
            "auc" => 5,
            other => bail!("unknown comparison metric `{other}`"),
        })
    }
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            manifest: PathBuf::from("manifest.csv"),
            image_root: None,
            out_dir: PathBuf::from("runs"),
            backbones: vec!["resnet50".into()],
            scenarios: Scenario::ALL.to_vec(),
            c_f: vec![0.8],
            folds: 5,
            seed: 0,
            repeats: 1,
            group_by_patient: true,
            pretrained: true,
            image_side: 224,
            age_scale: DEFAULT_AGE_SCALE,
            head_dropout: 0.5,
            normalize_mean: IMAGENET_MEAN,
            normalize_std: IMAGENET_STD,
            color_constancy: true,
            color: ColorConstancyConfig::default(),
            augment: AugmentPolicy::default(),
            train: TrainConfig::default(),
            stats: StatsConfig::default(),
        }
    }
}

fn one_or_many<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<Vec<f64>, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum OneOrMany {
        One(f64),
        Many(Vec<f64>),
    }
    Ok(match OneOrMany::deserialize(d)? {
        OneOrMany::One(v) => vec![v],
        OneOrMany::Many(v) => v,
    })
}

impl ExperimentConfig {
    /// Reads a config file; relative paths inside it resolve against the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let mut cfg: ExperimentConfig =
            toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        let parent = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
        let base = std::fs::canonicalize(parent).with_context(|| format!("resolving {}", parent.display()))?;
        let rebase = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        rebase(&mut cfg.manifest);
        rebase(&mut cfg.out_dir);
        if let Some(r) = cfg.image_root.as_mut() {
            rebase(r);
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string_pretty(self)?)
    }

    pub fn image_root(&self) -> PathBuf {
        self.image_root.clone().unwrap_or_else(|| {
            self.manifest.parent().map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from("."))
        })
    }

    pub fn seeds(&self) -> Vec<u64> {
        (0..self.repeats as u64).map(|r| self.seed + r).collect()
    }

    pub fn backbone_names(&self) -> Result<Vec<BackboneName>> {
        self.backbones
            .iter()
            .map(|b| b.parse::<BackboneName>().map_err(anyhow::Error::from))
            .collect()
    }

    /// Checks everything that can be checked before training starts.
    pub fn validate(&self) -> Result<()> {
        if !self.manifest.is_file() {
            bail!("manifest {} does not exist", self.manifest.display());
        }
        let root = self.image_root();
        if !root.is_dir() {
            bail!("image root {} does not exist", root.display());
        }
        if self.backbones.is_empty() || self.scenarios.is_empty() || self.c_f.is_empty() {
            bail!("backbones, scenarios and c_f must each list at least one value");
        }
        self.backbone_names()?;
        for &cf in &self.c_f {
            if !(0.0..1.0).contains(&cf) {
                bail!("c_f = {cf} is outside [0, 1)");
            }
            reduced_image_features(lesionfuse_core::data::N_CLI, cf)?;
        }
        if self.folds < 2 {
            bail!("folds must be at least 2, got {}", self.folds);
        }
        if self.repeats == 0 {
            bail!("repeats must be at least 1");
        }
        if self.image_side < 8 {
            bail!("image_side {} is too small", self.image_side);
        }
        if !(self.age_scale > 0.0) {
            bail!("age_scale must be positive");
        }
        if !(0.0..1.0).contains(&self.head_dropout) {
            bail!("head_dropout must be in [0, 1)");
        }
        if self.normalize_std.iter().any(|s| !(*s > 0.0)) {
            bail!("normalize_std entries must be positive");
        }
        for a in [self.stats.alpha_friedman, self.stats.alpha_wilcoxon] {
            if !(a > 0.0 && a < 1.0) {
                bail!("significance levels must be in (0, 1), got {a}");
            }
        }
        self.stats.metric_index()?;
        self.augment.validate()?;
        self.train.validate()?;
        Ok(())
    }

    /// Short content hash used in run directory names.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(json.as_bytes());
        digest.iter().take(5).map(|b| format!("{b:02x}")).collect()
    }
}
