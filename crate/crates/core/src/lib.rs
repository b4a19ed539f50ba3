pub mod autograd;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod nn;
pub mod param;
pub mod spatial;
pub mod temporal;
pub mod tensor;
pub mod training;

#[cfg(test)]
mod testutil;

pub use autograd::{Gradients, Tape, Var};
pub use error::{Error, Result};
pub use nn::{Ctx, Mode};
pub use param::{Checkpoint, ParamId, ParamKind, ParamStore};
pub use tensor::{DType, Scalar, Tensor};
pub use config::{
    AblationSpec, DataConfig, FusionVariant, ModelConfig, RunConfig, SpatialVariant,
    TemporalVariant, TrainConfig,
};
pub use data::{FeatureStats, PreparedData, SceneSequence, TurbineLayout, WakeConfig};
pub use eval::{Forecaster, MetricsReport, Persistence, Predictor};
pub use spatial::Windformer;
pub use training::{train, AdamW, TrainHistory, TrainOutcome};
