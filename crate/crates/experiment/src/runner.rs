//! Cross-validated training of every configured (backbone, scenario, c_f) cell.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use lesionfuse_core::backbones::{create_extractor, BackboneName};
use lesionfuse_core::data::{load_manifest, make_folds, DatasetManifest, FoldAssignment};
use lesionfuse_core::evaluation::{evaluate, MetricsReport};
use lesionfuse_core::fusion::{build_head, FusionConfig, FusionHead, Scenario};
use lesionfuse_core::trainer::{load_checkpoint, save_checkpoint, train_two_phase, CheckpointMeta, Model, TrainConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::io::{write_atomic, write_json};
use crate::report::{emit_reports, ReportFiles};
use crate::source::{ImageSource, SourceOptions};

pub const RUN_INDEX: &str = "run.json";
pub const METRICS_FILE: &str = "metrics.json";
pub const HISTORY_FILE: &str = "history.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.safetensors";
pub const PREDICTIONS_FILE: &str = "predictions.csv";

/// One trained model: a (backbone, scenario, c_f) configuration on one fold of one seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub backbone: String,
    pub scenario: Scenario,
    pub c_f: f64,
    pub seed: u64,
    pub fold: usize,
    /// Relative to the run directory.
    pub dir: PathBuf,
    pub status: CellStatus,
}

impl Cell {
    /// Treatment label shared by all folds and seeds of a configuration.
    pub fn treatment(&self) -> String {
        format!("{}/{}/cf{}", self.backbone, self.scenario, self.c_f)
    }

    pub fn block(&self) -> String {
        format!("seed{}-fold{}", self.seed, self.fold)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "state", content = "detail")]
pub enum CellStatus {
    Completed,
    Failed(String),
}

/// Index of a run, persisted as `run.json` in the run directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunIndex {
    pub config: ExperimentConfig,
    pub config_hash: String,
    pub synthetic: bool,
    pub cells: Vec<Cell>,
}

#[derive(Clone, Debug)]
pub struct RunArtifacts {
    pub run_dir: PathBuf,
    pub index: RunIndex,
    pub reports: ReportFiles,
}

/// `<out_dir>/<UTC timestamp>-<config hash>`.
pub fn stamped_run_dir(config: &ExperimentConfig) -> PathBuf {
    let stamp = chrono::Utc::now().format("%Y%m%dT%H%M%SZ");
    config.out_dir.join(format!("{stamp}-{}", config.hash()))
}

pub fn cell_dir(backbone: &str, scenario: Scenario, c_f: f64, seed: Option<u64>, fold: usize) -> PathBuf {
    let mut p = PathBuf::from(backbone).join(scenario.as_str()).join(format!("cf{c_f}"));
    if let Some(s) = seed {
        p.push(format!("seed{s}"));
    }
    p.join(format!("fold{fold}"))
}

/// Builds an untrained model for one cell.
pub fn build_model(
    backbone: BackboneName,
    scenario: Scenario,
    c_f: f64,
    config: &ExperimentConfig,
    seed: u64,
) -> Result<Model<f32>> {
    let pretrained = config.pretrained && backbone != BackboneName::Tiny;
    let extractor = create_extractor::<f32>(backbone.as_str(), pretrained, seed)?;
    let mut fusion = FusionConfig::for_backbone(backbone, scenario, c_f);
    fusion.dropout = config.head_dropout;
    let spec = build_head(&fusion)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x4ead);
    Ok(Model {
        backbone: Some(extractor),
        head: FusionHead::new(spec, &mut rng)?,
    })
}

pub fn load_dataset(config: &ExperimentConfig) -> Result<DatasetManifest> {
    let manifest = load_manifest(&config.manifest, &config.image_root())
        .with_context(|| format!("loading {}", config.manifest.display()))?;
    Ok(manifest)
}

#[allow(clippy::too_many_arguments)]
fn run_cell(
    run_dir: &Path,
    dir: &Path,
    manifest: &DatasetManifest,
    source: &ImageSource,
    folds: &FoldAssignment,
    backbone: BackboneName,
    scenario: Scenario,
    c_f: f64,
    seed: u64,
    fold: usize,
    config: &ExperimentConfig,
) -> Result<MetricsReport> {
    let abs = run_dir.join(dir);
    let mut model = build_model(backbone, scenario, c_f, config, seed)?;
    let train = TrainConfig {
        seed,
        augment: config.train.augment && !config.augment.is_identity(),
        ..config.train.clone()
    };
    let outcome = train_two_phase(&mut model, source, folds, fold, &train)?;
    let mut history = Vec::new();
    outcome.history.write_csv(&mut history)?;
    write_atomic(&abs.join(HISTORY_FILE), &history)?;

    let meta = CheckpointMeta {
        backbone: model.backbone.as_ref().map(|b| b.spec().clone()),
        c_f,
        head: model.head.spec().clone(),
        train,
        fold,
        seed,
    };
    save_checkpoint(&abs.join(CHECKPOINT_FILE), &mut model, &meta)?;

    let test = folds.test_indices(fold);
    let probs = model.predict(source, &test, config.train.batch_size)?;
    let labels: Vec<usize> = test.iter().map(|&i| manifest.records[i].diagnosis.index()).collect();
    write_predictions(&abs.join(PREDICTIONS_FILE), manifest, &test, &probs)?;
    let report = evaluate(&probs, &labels)?;
    write_json(&abs.join(METRICS_FILE), &report)?;
    Ok(report)
}

fn write_predictions(path: &Path, manifest: &DatasetManifest, idx: &[usize], probs: &[Vec<f64>]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["lesion_id".to_string(), "diagnosis".to_string()];
    header.extend(lesionfuse_core::data::Diagnosis::ALL.iter().map(|d| format!("p_{}", d.abbrev())));
    w.write_record(&header)?;
    for (&i, row) in idx.iter().zip(probs) {
        let r = &manifest.records[i];
        let mut rec = vec![r.lesion_id.clone(), r.diagnosis.abbrev().to_string()];
        rec.extend(row.iter().map(|p| p.to_string()));
        w.write_record(&rec)?;
    }
    write_atomic(path, &w.into_inner()?)
}

/// Reads back the per-sample probabilities written for a cell.
pub fn read_predictions(path: &Path) -> Result<(Vec<usize>, Vec<Vec<f64>>)> {
    let mut rd = csv::Reader::from_path(path).with_context(|| format!("reading {}", path.display()))?;
    let mut labels = Vec::new();
    let mut probs = Vec::new();
    for rec in rd.records() {
        let rec = rec?;
        let d: lesionfuse_core::data::Diagnosis = rec[1].parse().map_err(anyhow::Error::msg)?;
        labels.push(d.index());
        probs.push(rec.iter().skip(2).map(str::parse).collect::<Result<Vec<f64>, _>>()?);
    }
    Ok((labels, probs))
}

/// Re-evaluates a saved cell checkpoint on its held-out fold, rebuilding the
/// folds from `config` and the seed stored in the checkpoint.
pub fn evaluate_checkpoint(config: &ExperimentConfig, checkpoint: &Path) -> Result<(MetricsReport, Vec<Vec<f64>>)> {
    let manifest = load_dataset(config)?;
    let (meta, mut model) = load_checkpoint::<f32>(checkpoint)?;
    let folds = make_folds(&manifest, config.folds, meta.seed, config.group_by_patient)?;
    if meta.fold >= folds.k {
        bail!("checkpoint fold {} does not exist with {} folds", meta.fold, folds.k);
    }
    let source = ImageSource::load(&manifest, SourceOptions::from_config(config))?;
    let test = folds.test_indices(meta.fold);
    let probs = model.predict(&source, &test, config.train.batch_size)?;
    let labels: Vec<usize> = test.iter().map(|&i| manifest.records[i].diagnosis.index()).collect();
    Ok((evaluate(&probs, &labels)?, probs))
}

/// Trains and evaluates every configured cell under `run_dir` (a fresh
/// stamped directory when `None`), then writes the aggregate reports.
/// A failing cell is recorded with its error and the run continues;
/// configuration problems abort before any training.
pub fn run_experiment(config: &ExperimentConfig, run_dir: Option<PathBuf>) -> Result<RunArtifacts> {
    config.validate()?;
    let backbones = config.backbone_names()?;
    let manifest = load_dataset(config)?;
    for &b in &backbones {
        if config.pretrained && b != BackboneName::Tiny {
            // Surface missing weights before spending time on anything else.
            create_extractor::<f32>(b.as_str(), true, 0)?;
        }
    }
    let run_dir = run_dir.unwrap_or_else(|| stamped_run_dir(config));
    std::fs::create_dir_all(&run_dir).with_context(|| format!("creating {}", run_dir.display()))?;
    write_atomic(&run_dir.join("config.toml"), config.to_toml()?.as_bytes())?;
    log::info!("run directory {}", run_dir.display());

    let source = ImageSource::load(&manifest, SourceOptions::from_config(config))?;
    let seeds = config.seeds();
    let multi_seed = seeds.len() > 1;
    let mut index = RunIndex {
        config: config.clone(),
        config_hash: config.hash(),
        synthetic: crate::synth::is_synthetic(&config.manifest),
        cells: Vec::new(),
    };
    for &seed in &seeds {
        let folds = make_folds(&manifest, config.folds, seed, config.group_by_patient)?;
        write_json(&run_dir.join(format!("folds-seed{seed}.json")), &folds)?;
        for &backbone in &backbones {
            for &scenario in &config.scenarios {
                for &c_f in &config.c_f {
                    for fold in 0..config.folds {
                        let dir = cell_dir(backbone.as_str(), scenario, c_f, multi_seed.then_some(seed), fold);
                        log::info!("training {}", dir.display());
                        let status = match run_cell(
                            &run_dir, &dir, &manifest, &source, &folds, backbone, scenario, c_f, seed, fold, config,
                        ) {
                            Ok(r) => {
                                log::info!("{}: bacc {:.4}", dir.display(), r.bacc);
                                CellStatus::Completed
                            }
                            Err(e) => {
                                let msg = format!("{e:#}");
                                log::error!("{}: {msg}", dir.display());
                                write_atomic(&run_dir.join(&dir).join("error.txt"), msg.as_bytes())?;
                                CellStatus::Failed(msg)
                            }
                        };
                        index.cells.push(Cell {
                            backbone: backbone.as_str().to_string(),
                            scenario,
                            c_f,
                            seed,
                            fold,
                            dir,
                            status,
                        });
                        write_json(&run_dir.join(RUN_INDEX), &index)?;
                    }
                }
            }
        }
    }
    write_json(&run_dir.join(RUN_INDEX), &index)?;
    let reports = emit_reports(&run_dir)?;
    Ok(RunArtifacts {
        run_dir,
        index,
        reports,
    })
}
