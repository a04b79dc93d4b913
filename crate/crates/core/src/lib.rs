//! Sample-level boosting for angular-margin embedding learning.
//!
//! A sequence of embedding models is trained with a margin softmax loss in
//! which every sample carries a weight. After each round the weights of
//! samples the model found hard (low true-class probability) are raised, and
//! the next model concentrates on them. Models are combined by a weighted sum
//! of their cosine match scores.

pub mod boost;
pub mod cli;
pub mod codec;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod margin;
pub mod numeric;
pub mod rng;
pub mod trainer;

pub use boost::{adapt_scale, HardnessStats, SampleProbs, WeightTable};
pub use config::Config;
pub use data::{generate, Dataset, GenConfig, LabeledSample, Tier};
pub use error::{Error, Result};
pub use eval::{evaluate, Ensemble, EvalReport};
pub use margin::{MarginParams, MarginPreset};
pub use numeric::{Checkpoint, EmbeddingModel, SgdConfig};
pub use trainer::{boost_train, TrainConfig, Variant};
