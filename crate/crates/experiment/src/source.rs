use anyhow::{Context, Result};
use lesionfuse_core::data::{encode_clinical, ClinicalVector, DatasetManifest};
use lesionfuse_core::preprocess::{
    augment, load_rgb, resize_bilinear, sample_rng, shades_of_gray, standardize, to_chw, AugmentPolicy,
    ColorConstancyConfig,
};
use lesionfuse_core::trainer::SampleSource;
use ndarray::Array3;

use crate::config::ExperimentConfig;

#[derive(Clone, Debug)]
pub struct SourceOptions {
    pub side: usize,
    pub color: Option<ColorConstancyConfig>,
    pub age_scale: f64,
    pub augment: AugmentPolicy,
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl SourceOptions {
    pub fn from_config(cfg: &ExperimentConfig) -> Self {
        SourceOptions {
            side: cfg.image_side,
            color: cfg.color_constancy.then_some(cfg.color),
            age_scale: cfg.age_scale,
            augment: cfg.augment,
            mean: cfg.normalize_mean,
            std: cfg.normalize_std,
        }
    }
}

/// Color-corrects and resizes one image file to `side x side`.
pub fn prepare_image(path: &std::path::Path, side: usize, color: Option<&ColorConstancyConfig>) -> Result<Array3<f32>> {
    let img = load_rgb::<f32>(path)?;
    let img = match color {
        Some(c) => {
            let out = shades_of_gray(&img.view(), c)?;
            if let Some(w) = out.warning {
                log::warn!("{}: {w}", path.display());
            }
            out.image
        }
        None => img,
    };
    Ok(resize_bilinear(&img.view(), side, side)?)
}

/// Manifest images held in memory after color constancy and resizing;
/// augmentation and standardization happen per request.
pub struct ImageSource {
    labels: Vec<usize>,
    clinical: Vec<ClinicalVector<f32>>,
    images: Vec<Array3<f32>>,
    options: SourceOptions,
}

impl ImageSource {
    pub fn load(manifest: &DatasetManifest, options: SourceOptions) -> Result<Self> {
        let mut images = Vec::with_capacity(manifest.len());
        for i in 0..manifest.len() {
            let path = manifest.image_path(i);
            images.push(
                prepare_image(&path, options.side, options.color.as_ref())
                    .with_context(|| format!("preparing {}", path.display()))?,
            );
        }
        Ok(ImageSource {
            labels: manifest.records.iter().map(|r| r.diagnosis.index()).collect(),
            clinical: manifest.records.iter().map(|r| encode_clinical(r, options.age_scale)).collect(),
            images,
            options,
        })
    }
}

impl SampleSource<f32> for ImageSource {
    fn len(&self) -> usize {
        self.labels.len()
    }

    fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    fn clinical(&self, i: usize) -> ClinicalVector<f32> {
        self.clinical[i]
    }

    fn input(&self, i: usize, key: Option<(u64, u64)>) -> lesionfuse_core::Result<Array3<f32>> {
        let o = &self.options;
        let img = match key {
            Some((seed, epoch)) if !o.augment.is_identity() => {
                let mut rng = sample_rng(seed, i as u64, epoch);
                augment(&self.images[i].view(), &o.augment, &mut rng)
            }
            _ => self.images[i].clone(),
        };
        let std = standardize(&img.view(), o.side, o.mean, o.std)?;
        Ok(to_chw(&std.view()))
    }
}
