//! Losses and the two-stage training loop: translation/shape heads first,
//! then the pose denoiser conditioned on ground-truth translation.

mod losses;
mod trainer;

use serde::{Deserialize, Serialize};

pub use losses::{
    loss_2d, loss_3d, loss_beta, loss_collision, loss_orth, loss_simple, total_loss, LossReport, LossTerms,
    LossWeights, ReprojectionTarget, MIN_PROJECTION_DEPTH,
};
pub use trainer::{
    checkpoint_path, denoiser_batch_loss, evaluate_denoiser, heads_batch_loss, load_denoiser, load_heads,
    prepare_samples, simple_loss_on_grid, train, BatchNoise, Stage, TrainOutcome, TrainSample, METRICS_FILE,
};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Denoiser epochs.
    pub epochs: usize,
    pub head_epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Probability of dropping the observation feature of all joints of a
    /// sample.
    pub cond_dropout: f64,
    pub weights: LossWeights,
    /// Use only the first this-many training samples.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub train_limit: Option<usize>,
    /// Validation samples scored after each epoch.
    pub val_limit: usize,
    /// Score "validation" on the training samples (overfitting runs).
    pub validate_on_train: bool,
    /// A batch loss above this aborts training.
    pub divergence_threshold: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            head_epochs: 10,
            batch_size: 12,
            lr: 1e-3,
            cond_dropout: 0.05,
            weights: LossWeights::default(),
            train_limit: None,
            val_limit: 200,
            validate_on_train: false,
            divergence_threshold: 1e3,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("train: batch size must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.cond_dropout) {
            return Err(Error::Config("train: condition dropout must lie in [0, 1]".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) || !(self.divergence_threshold > 0.0) {
            return Err(Error::Config("train: learning rate and divergence threshold must be positive".into()));
        }
        if self.train_limit == Some(0) {
            return Err(Error::Config("train: train_limit must be positive".into()));
        }
        self.weights.validate()
    }
}
