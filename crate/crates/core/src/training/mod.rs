//! Losses, reverse-query batches, AdamW and the epoch loop.

mod batch;
pub mod loss;
mod optim;
mod trainer;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use batch::{build_batch, plan_batch, Batch, BatchPlan, Sample};
pub use loss::{batch_loss, info_nce, recall_surrogate, LossConfig, LossVariant};
pub use optim::{AdamW, AdamWConfig, LrSchedule};
pub use trainer::{batch_gradients, fit, train_epoch, EpochReport, Trainer};

use crate::model::{ModelError, Variant};
use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("triplet {qid}: image {image} not found")]
    MissingImage { qid: String, image: String },
    #[error("training diverged: non-finite gradient in block {block}")]
    Divergence { block: String },
    #[error("{0}")]
    Contract(String),
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Triplets per batch; with reverse queries the loss sees twice as many rows.
    pub batch_size: usize,
    pub seed: u64,
    pub rq_enabled: bool,
    pub variant: Variant,
    pub loss: LossConfig,
    pub optimizer: AdamWConfig,
    pub schedule: LrSchedule,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 64,
            seed: 0,
            rq_enabled: true,
            variant: Variant::Full,
            loss: LossConfig::default(),
            optimizer: AdamWConfig::default(),
            schedule: LrSchedule::default(),
        }
    }
}

impl TrainConfig {
    /// Settings that train the toy model from scratch in ten CPU epochs:
    /// InfoNCE at temperature 0.07 and a peak learning rate of 2e-3.
    pub fn toy() -> Self {
        Self {
            epochs: 10,
            loss: LossConfig {
                variant: LossVariant::Contrastive,
                ..LossConfig::default()
            },
            schedule: LrSchedule {
                lr0: 2e-3,
                ..LrSchedule::default()
            },
            ..Self::default()
        }
    }
}
