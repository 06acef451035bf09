//! Synthetic lesion dataset with controllable label signal per source.
//!
//! Each clinical field (body region, age, every finding) independently follows
//! the record's class profile with probability `informativeness.clinical` and
//! a label-independent distribution otherwise. Class profiles use disjoint
//! body regions and distinct finding patterns. The image carries one cue: with
//! probability `informativeness.image` the lesion is drawn with the record's
//! class color and size, otherwise with those of a uniformly random class.
//! Informativeness 0 therefore gives a source independent of the label, and 1
//! makes the source alone sufficient to classify.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use lesionfuse_core::data::{
    write_manifest, BodyRegion, ClinicalRecord, DatasetManifest, Diagnosis, Findings, N_CLASSES,
};
use lesionfuse_core::preprocess::save_rgb;
use ndarray::Array3;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

/// Class frequencies of the reference smartphone dataset (1612 lesions).
pub const PAD_COUNTS: [usize; N_CLASSES] = [543, 442, 67, 196, 149, 215];

/// Name of the marker file written next to a generated manifest.
pub const MARKER: &str = "synthetic.json";

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Informativeness {
    pub image: f64,
    pub clinical: f64,
}

impl Default for Informativeness {
    fn default() -> Self {
        Informativeness {
            image: 0.6,
            clinical: 0.6,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub size: usize,
    pub proportions: [f64; N_CLASSES],
    pub informativeness: Informativeness,
    pub seed: u64,
    /// Image side in pixels.
    pub side: usize,
    /// Mean number of lesions per patient.
    pub lesions_per_patient: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        let total: usize = PAD_COUNTS.iter().sum();
        SynthConfig {
            size: 600,
            proportions: PAD_COUNTS.map(|c| c as f64 / total as f64),
            informativeness: Informativeness::default(),
            seed: 0,
            side: 32,
            lesions_per_patient: 1.3,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.size == 0 {
            bail!("size must be positive");
        }
        if self.proportions.iter().any(|p| !p.is_finite() || *p < 0.0) {
            bail!("class proportions must be finite and non-negative: {:?}", self.proportions);
        }
        let sum: f64 = self.proportions.iter().sum();
        if (sum - 1.0).abs() > 1e-6 {
            bail!("class proportions sum to {sum}, expected 1");
        }
        if self.proportions.iter().filter(|&&p| p > 0.0).count() < 2 {
            bail!("class proportions must give at least two classes positive mass");
        }
        for (name, v) in [("image", self.informativeness.image), ("clinical", self.informativeness.clinical)] {
            if !(0.0..=1.0).contains(&v) {
                bail!("informativeness.{name} = {v} is outside [0, 1]");
            }
        }
        if self.side < 8 {
            bail!("side must be at least 8 pixels");
        }
        if !(self.lesions_per_patient >= 1.0) {
            bail!("lesions_per_patient must be at least 1");
        }
        Ok(())
    }
}

/// Per-class counts by largest remainder, so they sum to `size` exactly.
pub fn class_counts(size: usize, proportions: &[f64; N_CLASSES]) -> [usize; N_CLASSES] {
    let ideal = proportions.map(|p| p * size as f64);
    let mut counts = ideal.map(|v| v.floor() as usize);
    let mut left = size - counts.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..N_CLASSES).collect();
    order.sort_by(|&a, &b| {
        let fa = ideal[a] - ideal[a].floor();
        let fb = ideal[b] - ideal[b].floor();
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    for &c in order.iter().cycle() {
        if left == 0 {
            break;
        }
        if proportions[c] > 0.0 {
            counts[c] += 1;
            left -= 1;
        }
    }
    counts
}

const PALETTE: [[f64; 3]; N_CLASSES] = [
    [0.70, 0.22, 0.20],
    [0.25, 0.52, 0.28],
    [0.16, 0.16, 0.42],
    [0.62, 0.55, 0.16],
    [0.52, 0.20, 0.55],
    [0.22, 0.48, 0.55],
];

const FINDINGS: [[bool; 6]; N_CLASSES] = [
    [true, false, false, false, false, false],
    [false, true, true, false, false, true],
    [false, true, false, true, true, false],
    [false, false, false, false, false, false],
    [true, true, true, true, false, true],
    [true, false, false, false, false, true],
];

const MEAN_AGE: [f64; N_CLASSES] = [65.0, 62.0, 55.0, 30.0, 68.0, 60.0];

/// Each field independently follows the class profile with probability
/// `informativeness`, otherwise a label-independent draw.
fn clinical_fields(class: usize, informativeness: f64, rng: &mut ChaCha8Rng) -> (u32, BodyRegion, Findings) {
    let region = if rng.random_bool(informativeness) {
        BodyRegion::ALL[2 * class + rng.random_range(0..2)]
    } else {
        BodyRegion::ALL[rng.random_range(0..BodyRegion::ALL.len())]
    };
    let age = if rng.random_bool(informativeness) {
        let a = Normal::new(MEAN_AGE[class], 8.0).expect("valid normal").sample(rng);
        a.clamp(5.0, 100.0).round() as u32
    } else {
        rng.random_range(20..=90)
    };
    let flags = std::array::from_fn(|k| {
        if rng.random_bool(informativeness) {
            FINDINGS[class][k]
        } else {
            rng.random_bool(0.5)
        }
    });
    (age, region, Findings::from_array(flags))
}

/// Skin-toned background with one soft-edged lesion in the colors of `class`.
fn render(class: usize, side: usize, rng: &mut ChaCha8Rng) -> Array3<f64> {
    let tone = rng.random_range(0.85..1.05);
    let skin = [0.86 * tone, 0.69 * tone, 0.58 * tone];
    let color: Vec<f64> = PALETTE[class].iter().map(|v| v + rng.random_range(-0.04..0.04)).collect();
    let s = side as f64;
    let cy = s / 2.0 + rng.random_range(-s / 8.0..s / 8.0);
    let cx = s / 2.0 + rng.random_range(-s / 8.0..s / 8.0);
    let radius = s * (0.16 + 0.025 * class as f64) * rng.random_range(0.9..1.1);
    let noise = Normal::new(0.0, 0.02).expect("valid normal");
    Array3::from_shape_fn((side, side, 3), |(y, x, c)| {
        let d = ((y as f64 + 0.5 - cy).powi(2) + (x as f64 + 0.5 - cx).powi(2)).sqrt();
        let alpha = (radius + 0.5 - d).clamp(0.0, 1.0);
        let v = skin[c] * (1.0 - alpha) + color[c] * alpha;
        (v + noise.sample(&mut *rng)).clamp(0.0, 1.0)
    })
}

/// Generated dataset: the manifest plus where it was written.
pub struct SynthOutput {
    pub manifest: DatasetManifest,
    pub manifest_path: PathBuf,
}

/// Writes `images/*.png`, `manifest.csv` and the `synthetic.json` marker under `out`.
pub fn generate_synthetic(config: &SynthConfig, out: &Path) -> Result<SynthOutput> {
    config.validate()?;
    let counts = class_counts(config.size, &config.proportions);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut labels: Vec<usize> = counts.iter().enumerate().flat_map(|(c, &n)| std::iter::repeat_n(c, n)).collect();
    labels.shuffle(&mut rng);

    std::fs::create_dir_all(out.join("images")).with_context(|| format!("creating {}", out.display()))?;
    let mut records = Vec::with_capacity(labels.len());
    let mut patient = 0usize;
    let join = 1.0 - 1.0 / config.lesions_per_patient;
    for (i, &label) in labels.iter().enumerate() {
        if i > 0 && !rng.random_bool(join) {
            patient += 1;
        }
        let (age, region, findings) = clinical_fields(label, config.informativeness.clinical, &mut rng);
        let image_class = if rng.random_bool(config.informativeness.image) {
            label
        } else {
            rng.random_range(0..N_CLASSES)
        };
        let img = render(image_class, config.side, &mut rng);
        let rel = PathBuf::from(format!("images/SYN_{i:05}.png"));
        save_rgb(&img.view(), &out.join(&rel))?;
        records.push(ClinicalRecord {
            lesion_id: format!("SYN_{i:05}"),
            patient_id: format!("PAT_{patient:05}"),
            image_path: rel,
            diagnosis: Diagnosis::from_index(label).expect("label in range"),
            age,
            region,
            findings,
        });
    }
    let manifest_path = out.join("manifest.csv");
    let mut buf = Vec::new();
    write_manifest(&mut buf, &records)?;
    crate::io::write_atomic(&manifest_path, &buf)?;
    let marker = serde_json::json!({
        "note": "synthetic data generated by `lesionfuse synth`; not clinical images",
        "config": config,
    });
    crate::io::write_atomic(&out.join(MARKER), serde_json::to_string_pretty(&marker)?.as_bytes())?;
    Ok(SynthOutput {
        manifest: DatasetManifest::new(records, out)?,
        manifest_path,
    })
}

/// True when `manifest` sits next to a synthetic-data marker.
pub fn is_synthetic(manifest: &Path) -> bool {
    manifest.parent().is_some_and(|d| d.join(MARKER).is_file())
}
