//! Diffusion-denoising viseme classifier: forward noising, a time-conditional
//! 1-D U-Net, the conditional autoencoder wired into it, channel attention and
//! a spline (KAN) classification head.

pub mod checkpoint;
pub mod gradcheck;
pub mod model;
pub mod schedule;
pub mod tape;
pub mod train;

use thiserror::Error;

pub use checkpoint::Checkpoint;
pub use gradcheck::{grad_check, grad_check_attention, grad_check_kan, GradCheckReport};
pub use model::{apply_model, predict_logits, softmax, top_k, ArchConfig, Batch, ModelConfig, ModelOutput, ModelParams};
pub use schedule::{forward_diffuse, make_schedule, DiffusionSchedule};
pub use train::{
    loss, loss_and_grad, sample_batch, train, train_with, EpochLoss, LossComponents, LossWeights, LrSchedule, OptimizerKind,
    TrainConfig, TrainHistory,
};

#[derive(Debug, Error)]
pub enum DecoderError {
    #[error("config error: {0}")]
    Config(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("no trials to train on")]
    EmptyDataset,
    #[error("training diverged at epoch {epoch}, step {step}: {detail}")]
    Diverged { epoch: usize, step: usize, detail: String },
    #[error("bad checkpoint: {0}")]
    Checkpoint(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}
