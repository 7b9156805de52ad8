//! Hint-based distillation of a student encoder from a frozen teacher.

mod hints;
mod loss;
mod optim;
mod trainer;

pub use hints::{select_hint_layers, HintMode};
pub use loss::{loss_feat, loss_hint, loss_kd, loss_kd_graph, LossBreakdown};
pub use optim::{adamw_step, lr_at, warmup_steps, AdamWConfig, OptimizerState};
pub use trainer::{
    clip_loss_and_grads, default_threads, distill_run, distill_run_with_threads, distill_step,
    read_history_csv, save_history_csv, teacher_targets, write_history_csv, DistillConfig,
    DistillOutcome, StepRecord, HISTORY_HEADER, THREADS_ENV,
};
