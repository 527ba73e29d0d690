//! Multi-attention CNN + bidirectional LSTM network for multi-label
//! classification of multi-resolution scenes, with a small reverse-mode
//! autodiff engine, a synthetic dataset generator and a trainer.

pub mod attention;
pub mod birnn;
pub mod config;
pub mod dataset;
pub mod error;
pub mod graph;
pub mod head;
pub mod kbranch;
pub mod metrics;
pub mod model;
pub mod params;
pub mod tensor;
pub mod train;

pub use config::{BranchSpec, LayerSpec, LstmMode, ModelConfig, OptimizerKind, RunConfig, SubsetShape, TrainConfig};
pub use dataset::synth::{generate_synthetic, Profile, SynthParams};
pub use dataset::{Dataset, DatasetManifest, Sample, Split};
pub use error::{Error, FormatError, Result};
pub use graph::{Graph, OpKind, Var};
pub use kbranch::{split_patches, PatchSet};
pub use metrics::{MetricsReport, SampleMetrics};
pub use model::{Inference, Model};
pub use params::{ParamId, ParamStore};
pub use tensor::{Real, Tensor};
pub use train::checkpoint::Checkpoint;
pub use train::gradcheck::{gradcheck, GradcheckReport};
pub use train::{evaluate_model, train, Evaluation, TrainOutcome};
