//! Loss, optimizer, the training loop and finite-difference gradient checks.

pub mod gradcheck;
pub mod loss;
pub mod optim;
pub mod trainer;

pub use gradcheck::{
    gradient_check, h_sweep, warm_batch_norm, CoordinateError, GradCheckConfig, GradCheckReport,
    Segmented,
};
pub use loss::{mae_metric, mse_loss, mse_metric, ErrorAccumulator};
pub use optim::AdamW;
pub use trainer::{train, EarlyStopping, EpochRecord, StopReason, TrainHistory, TrainOutcome};
