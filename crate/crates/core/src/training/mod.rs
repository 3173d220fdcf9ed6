//! Training with mixed ground-truth/predicted decoder inputs and
//! consistency regularization across views.

pub mod checkpoint;
pub mod losses;
pub mod mixing;
pub mod trainer;

pub use checkpoint::{average_checkpoints, average_parameters, Checkpoint};
pub use losses::{
    consistency_losses, length_loss, nll_masked, symmetric_kl, total_loss, ConsistencySign,
    LossBreakdown,
};
pub use mixing::{
    refine_predict, refine_predict_batch, sample_mask, substitute, MaskedTarget, MixedSequence,
    Provenance,
};
pub use trainer::{
    checkpoint_path, CheckpointPolicy, Objective, TrainConfig, TrainSummary, Trainer, UpdateRecord,
    LOG_HEADER,
};
