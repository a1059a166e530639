//! Two-stage supernet training: the largest subnet first, then one random
//! subnet per step, both by masked distillation.

pub mod data;
pub mod optim;
mod train;

pub use data::{make_split, make_synthetic_dataset, Dataset};
pub use optim::{adam_step, lr_at, Adam, AdamConfig, AdamSlot};
pub use train::{
    build_teacher, copy_matching, init_student, stage1_train, stage2_train, teacher_pretext_loss,
    warm_up_teacher, Example, OfaInit, Sampling, Stage2Init, StepReport, TrainCache, TrainConfig,
    TrainLog, TrainOutcome, TrainRecord, Trainer, LOG_HEADER,
};
