//! Metric fine-tuning: losses, analytic gradients and the Adam training loop.

mod backward;
pub mod loss;
mod train;

pub use backward::{batch_loss, forward_backward, MetricGradients};
pub use loss::LossBreakdown;
pub use train::{train, StepRecord, TrainConfig, TrainRun};
