//! Losses, learning-rate schedule, checkpoints and the staged training loop.

mod checkpoint;
pub mod gradcheck;
mod loss;
mod schedule;
mod stage;

pub use checkpoint::{Checkpoint, CheckpointMeta};
pub use loss::{
    loss_stage1, loss_stage2, loss_stage3, masked_frame_distance, masked_l1, masked_mse, LossBreakdown, LossTerms,
    Stage1Inputs, Stage3Weights, TERM_NAMES,
};
pub use schedule::{lr_schedule, LrSchedule, ScheduleKind};
pub use stage::{
    evaluate_loss, read_log, run_stage, stage_loss, teacher_states, DatasetSelector, LogEntry, LogKind, RunOptions,
    Stage, StageConfig, StageData, StageOutcome,
};
