//! Network assembly, joint loss, optimizer and checkpoints.

pub mod checkpoint;
mod config;
mod network;
mod train;

pub use config::{learning_rate_at, ModelConfig};
pub use network::{masked_l1, AirFormerModel, Batch, Block, Forward, LossRecord, LossVars, Mode};
pub use train::{clip_grad_norm, evaluate_loss, train_step, Adam};
pub mod check;
