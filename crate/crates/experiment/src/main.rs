use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use lesionfuse_core::data::write_manifest;
use lesionfuse_core::fusion::Scenario;
use lesionfuse_core::preprocess::save_rgb;
use lesionfuse_core::stats::{compare_models, CompareOptions, ScoreMatrix};
use lesionfuse_experiment::config::ExperimentConfig;
use lesionfuse_experiment::io::{write_atomic, write_json};
use lesionfuse_experiment::runner::{evaluate_checkpoint, load_dataset, run_experiment};
use lesionfuse_experiment::source::prepare_image;
use lesionfuse_experiment::synth::{generate_synthetic, SynthConfig, MARKER};
use lesionfuse_experiment::emit_reports;

/// Skin-lesion classification from smartphone images and patient metadata.
///
/// Pretrained backbone weights are read from `$LESIONFUSE_CACHE/<name>.safetensors`
/// (default `~/.cache/lesionfuse`).
#[derive(Parser)]
#[command(name = "lesionfuse", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Color-correct and resize every manifest image into a new dataset directory.
    Preprocess(PreprocessArgs),
    /// Generate a synthetic dataset with controllable label signal.
    Synth(SynthArgs),
    /// Cross-validated training and evaluation of the configured cells.
    Train(RunArgs),
    /// Evaluate a saved checkpoint on its held-out fold.
    Evaluate(EvaluateArgs),
    /// Train over a list of combination factors.
    Sweep(SweepArgs),
    /// Friedman and pairwise Wilcoxon tests on a fold-score CSV.
    Stats(StatsArgs),
    /// Regenerate tables, comparison and figures for a finished run.
    Report(ReportArgs),
}

#[derive(Args)]
struct Overrides {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    backbone: Option<String>,
    /// image_only or fused
    #[arg(long)]
    scenario: Option<Scenario>,
    #[arg(long)]
    cf: Option<f64>,
    #[arg(long)]
    folds: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Parent directory for the run directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

impl Overrides {
    fn load(&self) -> Result<ExperimentConfig> {
        let mut cfg = ExperimentConfig::load(&self.config)?;
        if let Some(b) = &self.backbone {
            cfg.backbones = vec![b.clone()];
        }
        if let Some(s) = self.scenario {
            cfg.scenarios = vec![s];
        }
        if let Some(cf) = self.cf {
            cfg.c_f = vec![cf];
        }
        if let Some(k) = self.folds {
            cfg.folds = k;
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(o) = &self.out {
            cfg.out_dir = o.clone();
        }
        Ok(cfg)
    }
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    overrides: Overrides,
    /// Comma-separated combination factors.
    #[arg(long, value_delimiter = ',', default_values_t = [0.5, 0.6, 0.7, 0.8, 0.9])]
    cf_list: Vec<f64>,
}

#[derive(Args)]
struct PreprocessArgs {
    /// Experiment config supplying the manifest, image side and color settings.
    #[arg(long)]
    config: PathBuf,
    /// Output dataset directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SynthArgs {
    /// Optional TOML file with synthetic-data settings.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    size: Option<usize>,
    #[arg(long)]
    image_informativeness: Option<f64>,
    #[arg(long)]
    clinical_informativeness: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    side: Option<usize>,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Defaults to the `config.toml` of the run containing the checkpoint.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Directory for metrics.json; printed to stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct StatsArgs {
    /// CSV with one row per block and one column per treatment.
    #[arg(long)]
    input: PathBuf,
    #[arg(long, default_value_t = 0.05)]
    alpha_friedman: f64,
    #[arg(long, default_value_t = 0.01)]
    alpha_wilcoxon: f64,
    /// Holm-adjust the pairwise p-values.
    #[arg(long)]
    holm: bool,
    /// Write the report here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ReportArgs {
    #[arg(long)]
    run: PathBuf,
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Preprocess(a) => preprocess(&a),
        Command::Synth(a) => synth(&a),
        Command::Train(a) => train(a.overrides.load()?),
        Command::Sweep(a) => {
            let mut cfg = a.overrides.load()?;
            cfg.c_f = a.cf_list;
            if a.overrides.scenario.is_none() {
                cfg.scenarios = vec![Scenario::Fused];
            }
            train(cfg)
        }
        Command::Evaluate(a) => evaluate_cmd(&a),
        Command::Stats(a) => stats(&a),
        Command::Report(a) => {
            let files = emit_reports(&a.run)?;
            print!("{}", std::fs::read_to_string(&files.table_markdown)?);
            Ok(())
        }
    }
}

fn train(cfg: ExperimentConfig) -> Result<()> {
    let artifacts = run_experiment(&cfg, None)?;
    println!("run directory: {}", artifacts.run_dir.display());
    print!("{}", std::fs::read_to_string(&artifacts.reports.table_markdown)?);
    Ok(())
}

fn preprocess(a: &PreprocessArgs) -> Result<()> {
    let cfg = ExperimentConfig::load(&a.config)?;
    let manifest = load_dataset(&cfg)?;
    let color = cfg.color_constancy.then_some(cfg.color);
    for (i, r) in manifest.records.iter().enumerate() {
        let img = prepare_image(&manifest.image_path(i), cfg.image_side, color.as_ref())?;
        let rel = r.image_path.with_extension("png");
        save_rgb(&img.view(), &a.out.join(&rel))?;
    }
    let records: Vec<_> = manifest
        .records
        .iter()
        .map(|r| {
            let mut r = r.clone();
            r.image_path = r.image_path.with_extension("png");
            r
        })
        .collect();
    let mut buf = Vec::new();
    write_manifest(&mut buf, &records)?;
    write_atomic(&a.out.join("manifest.csv"), &buf)?;
    copy_marker(&cfg.manifest, &a.out)?;
    println!("wrote {} images to {}", records.len(), a.out.display());
    Ok(())
}

fn copy_marker(manifest: &Path, out: &Path) -> Result<()> {
    if let Some(marker) = manifest.parent().map(|d| d.join(MARKER)).filter(|m| m.is_file()) {
        std::fs::copy(&marker, out.join(MARKER))?;
    }
    Ok(())
}

fn synth(a: &SynthArgs) -> Result<()> {
    let mut cfg: SynthConfig = match &a.config {
        Some(p) => toml::from_str(&std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?)?,
        None => SynthConfig::default(),
    };
    if let Some(v) = a.size {
        cfg.size = v;
    }
    if let Some(v) = a.image_informativeness {
        cfg.informativeness.image = v;
    }
    if let Some(v) = a.clinical_informativeness {
        cfg.informativeness.clinical = v;
    }
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    if let Some(v) = a.side {
        cfg.side = v;
    }
    let out = generate_synthetic(&cfg, &a.out)?;
    println!("wrote {} records to {}", out.manifest.len(), out.manifest_path.display());
    Ok(())
}

fn evaluate_cmd(a: &EvaluateArgs) -> Result<()> {
    let config_path = match &a.config {
        Some(p) => p.clone(),
        None => a
            .checkpoint
            .ancestors()
            .skip(1)
            .map(|d| d.join("config.toml"))
            .find(|p| p.is_file())
            .context("no config.toml above the checkpoint; pass --config")?,
    };
    let cfg = ExperimentConfig::load(&config_path)?;
    let (report, _) = evaluate_checkpoint(&cfg, &a.checkpoint)?;
    match &a.out {
        Some(dir) => write_json(&dir.join("metrics.json"), &report)?,
        None => print_json(&report)?,
    }
    Ok(())
}

/// Writes pretty JSON to stdout; a closed pipe (e.g. `| head`) is not an error.
fn print_json<T: serde::Serialize>(value: &T) -> Result<()> {
    use std::io::Write;
    let mut out = std::io::stdout().lock();
    match writeln!(out, "{}", serde_json::to_string_pretty(value)?) {
        Err(e) if e.kind() == std::io::ErrorKind::BrokenPipe => Ok(()),
        r => Ok(r?),
    }
}

fn stats(a: &StatsArgs) -> Result<()> {
    let file = std::fs::File::open(&a.input).with_context(|| format!("opening {}", a.input.display()))?;
    let m = ScoreMatrix::from_csv(file)?;
    let report = compare_models(
        &m,
        &CompareOptions {
            alpha_friedman: a.alpha_friedman,
            alpha_wilcoxon: a.alpha_wilcoxon,
            holm: a.holm,
        },
    )?;
    match &a.out {
        Some(p) => write_json(p, &report)?,
        None => print_json(&report)?,
    }
    Ok(())
}
