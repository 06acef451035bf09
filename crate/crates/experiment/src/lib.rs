//! End-to-end experiments on top of `lesionfuse-core`: configuration,
//! synthetic data, cross-validated runs, reports and figures.

pub mod config;
pub mod io;
pub mod plots;
pub mod report;
pub mod runner;
pub mod source;
pub mod synth;

pub use config::ExperimentConfig;
pub use report::emit_reports;
pub use runner::{run_experiment, RunArtifacts};
pub use synth::{generate_synthetic, SynthConfig};
