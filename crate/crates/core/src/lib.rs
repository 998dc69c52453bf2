//! Latent diffusion generator for mixed-type tabular data.

pub mod config;
pub mod data;
pub mod decoder;
pub mod diffusion;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod nn;
pub mod optim;
pub mod pipeline;
pub mod rng;
pub mod store;
pub mod tokenizer;
pub mod toy;

pub use error::{Error, Result};
pub use config::RunConfig;
pub use data::{FeatureKind, FeatureSchema, PreprocessState, SplitPlan, TableDataset};
pub use diffusion::{NoiseSchedule, Preconditioner};
pub use eval::{EvalReport, OverfitReport};
pub use pipeline::{FitReport, GeneratorBundle, PretrainedWeights};
