//! Depth-aware adversarial domain adaptation for semantic segmentation.
//!
//! The numeric core is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below name the two concrete instantiations.

pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod error;
pub mod fusion;
pub mod gradcheck;
pub mod losses;
pub mod maps;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod params;
pub mod scalar;
pub mod synthdata;
pub mod tensor;
pub mod trainer;

pub use checkpoint::Checkpoint;
pub use dataset::{Dataset, DatasetRole};
pub use error::{Error, Result};
pub use metrics::{ConfusionMatrix, EvalReport};
pub use maps::{DepthAwareMap, DepthPrediction, LabelMap, SoftSegMap, SurprisalMap};
pub use model::{DiscriminatorConfig, DiscriminatorParams, ModelConfig, ModelParams};
pub use scalar::Scalar;
pub use synthdata::{DomainStyle, Scene, SceneSpec};
pub use tensor::Tensor;
pub use trainer::{AblationSetup, TrainConfig, TrainState};

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type ModelParams32 = ModelParams<f32>;
pub type ModelParams64 = ModelParams<f64>;
pub type DiscriminatorParams32 = DiscriminatorParams<f32>;
pub type DiscriminatorParams64 = DiscriminatorParams<f64>;
pub type TrainState32 = TrainState<f32>;
pub type TrainState64 = TrainState<f64>;
