pub mod backbones;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod fusion;
pub mod nn;
pub mod preprocess;
pub mod scalar;
pub mod stats;
pub mod trainer;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type ClinicalVector32 = data::ClinicalVector<f32>;
pub type ClinicalVector64 = data::ClinicalVector<f64>;
pub type Extractor32 = backbones::Extractor<f32>;
pub type Extractor64 = backbones::Extractor<f64>;
pub type FusionHead32 = fusion::FusionHead<f32>;
pub type FusionHead64 = fusion::FusionHead<f64>;
pub type Model32 = trainer::Model<f32>;
pub type Model64 = trainer::Model<f64>;
