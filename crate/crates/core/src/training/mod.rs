//! Optimizers, schedules, and the pre-training / fine-tuning loops.

mod batch;
mod finetune;
pub mod metrics;
pub mod optim;
mod pretrain;
pub mod schedule;

pub use batch::{
    bce_batch_loss, ce_batch_loss, images_to_batch, predict_classes, predict_masks, seg_batch_loss, BatchLoss,
    LoadedDataset, LoadedSample,
};
pub use finetune::{
    battery_seeds, run_battery_members, run_finetuning, run_finetuning_on, run_seed_battery, FinetuneData,
};
pub use metrics::{MetricsLog, Step};
pub use optim::{adam_update, sgd_update, AdamParams, OptimizerKind, OptimizerState};
pub use pretrain::{pretrain, run_pretraining, PretrainOutput};
pub use schedule::{exp_lr, poly_lr};
