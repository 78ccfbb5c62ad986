//! The windowed extract, propagate, inject loop, its loss, the two-stage
//! trainer and drift metrics.

mod checkpoint;
mod config;
mod drift;
mod loss;
mod model;
mod train;
mod windows;

pub use checkpoint::{load_checkpoint, save_checkpoint, MANIFEST_FILE, PARAMS_FILE};
pub use config::RunConfig;
pub use drift::{drift_report, evaluate_drift, DriftReport};
pub use loss::{loss_on_tape, multi_task_loss, pred_constants, LossTerms, LossVars};
pub use model::{
    baseline_step, baseline_window, global_step, run_baseline, run_stream, step_window, window_forward, Model, ModelParams,
    StreamOutput, SwmParams,
};
pub use train::{
    clip_global_norm, evaluate_loss, train, train_from, train_stage, write_log, AdamW, Dataset, Stage, StagePlan, StepLog,
    TrainOutcome,
};
pub use windows::{make_windows, WindowSchedule};
