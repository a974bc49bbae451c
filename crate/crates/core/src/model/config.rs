use serde::{Deserialize, Serialize};

use crate::dartboard::DartboardSpec;
use crate::error::{Error, Result};
use crate::numerics::Activation;

/// Hyperparameters of the network and its optimizer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Number of AirFormer blocks `L`.
    pub blocks: usize,
    /// Hidden width `C`.
    pub hidden: usize,
    pub heads: usize,
    /// Temporal window per block, bottom first.
    pub window_sizes: Vec<usize>,
    pub dartboard: DartboardSpec,
    /// Input steps `T`.
    pub input_steps: usize,
    /// Forecast steps `τ`.
    pub horizon: usize,
    /// Raw measurements `D`; the network sees `2D` channels (values plus
    /// observedness indicators).
    pub measurements: usize,
    /// Predicted measurements `D_out`, the leading entries of the measurement list.
    pub outputs: usize,
    pub learning_rate: f64,
    pub lr_halving_epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Weight on the negative ELBO in the joint loss.
    pub elbo_weight: f64,
    /// Global gradient-norm clip; `0` disables clipping.
    pub grad_clip: f64,
    pub activation: Activation,
    /// Ablation switch: without it blocks contain only temporal attention.
    pub use_dsmsa: bool,
    /// Ablation switch: without it the head sees deterministic states only.
    pub use_stochastic: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            blocks: 4,
            hidden: 32,
            heads: 2,
            window_sizes: vec![3, 6, 12, 24],
            dartboard: DartboardSpec::default(),
            input_steps: 24,
            horizon: 24,
            measurements: 4,
            outputs: 1,
            learning_rate: 5e-4,
            lr_halving_epochs: 3,
            batch_size: 16,
            seed: 0,
            elbo_weight: 1.0,
            grad_clip: 5.0,
            activation: Activation::Gelu,
            use_dsmsa: true,
            use_stochastic: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("blocks", self.blocks),
            ("hidden", self.hidden),
            ("heads", self.heads),
            ("input_steps", self.input_steps),
            ("horizon", self.horizon),
            ("measurements", self.measurements),
            ("outputs", self.outputs),
            ("lr_halving_epochs", self.lr_halving_epochs),
            ("batch_size", self.batch_size),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.hidden % self.heads != 0 {
            return Err(Error::Config(format!(
                "hidden width {} is not divisible by {} heads",
                self.hidden, self.heads
            )));
        }
        if self.window_sizes.len() != self.blocks {
            return Err(Error::Config(format!(
                "{} window sizes given for {} blocks",
                self.window_sizes.len(),
                self.blocks
            )));
        }
        if let Some(w) = self.window_sizes.iter().find(|&&w| w == 0 || self.input_steps % w != 0) {
            return Err(Error::Config(format!(
                "window size {w} does not divide input steps {}",
                self.input_steps
            )));
        }
        if self.outputs > self.measurements {
            return Err(Error::Config(format!(
                "{} outputs requested from {} measurements",
                self.outputs, self.measurements
            )));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if !(self.elbo_weight.is_finite() && self.elbo_weight >= 0.0) {
            return Err(Error::Config("elbo_weight must be non-negative".into()));
        }
        if !(self.grad_clip.is_finite() && self.grad_clip >= 0.0) {
            return Err(Error::Config("grad_clip must be non-negative".into()));
        }
        self.dartboard.validate()
    }

    /// Channels fed to the embedding.
    pub fn input_channels(&self) -> usize {
        2 * self.measurements
    }
}

/// `lr₀ · ½^⌊epoch / halving⌋` with zero-based epochs.
pub fn learning_rate_at(config: &ModelConfig, epoch: usize) -> f64 {
    let halvings = (epoch / config.lr_halving_epochs.max(1)) as i32;
    config.learning_rate * 0.5f64.powi(halvings)
}
