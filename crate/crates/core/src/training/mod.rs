//! Two-phase training: autoencoder first, then the flow by negative log-likelihood.

mod optimize;
mod pipeline;

pub(crate) use optimize::Phase;
pub use optimize::{plateau_reached, EpochRecord, PhaseConfig};
pub use pipeline::{
    nll_loss, read_training_log, train_pipeline, write_training_log, PipelineOutput, TrainConfig, AE_CHECKPOINT_FILE,
    FLOW_CHECKPOINT_FILE, TRAINING_LOG_FILE,
};
