//! Differentiable blur-aware optimization: parameters, losses, analytic
//! gradients, Adam, density control, checkpoints and the training loop.

pub mod adam;
pub mod checkpoint;
pub mod density;
pub mod gradcheck;
pub mod loss;
pub mod model;
pub mod pipeline;
pub mod train;

pub use adam::{rates_at, Adam};
pub use checkpoint::{Checkpoint, CHECKPOINT_VERSION};
pub use density::{density_control, is_density_step, DensityOutcome, DensityStats};
pub use gradcheck::{gradcheck, GradcheckReport};
pub use loss::{photometric_loss, photometric_loss_grad, CameraLoss, LossReport};
pub use model::{Grads, Group, Model};
pub use pipeline::{loss, loss_and_grad, Evaluation, Settings, Target};
pub use train::{
    checkpoint_name, settings_for, train, LogEntry, TrainOptions, TrainOutcome, FINAL_CHECKPOINT, METRICS_LOG,
    TIMING_LOG,
};
