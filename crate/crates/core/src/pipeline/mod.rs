//! Training orchestration: knowledge-teacher bootstrap, the guided-masking
//! training loop, AdamW, checkpoints and metrics.

mod checkpoint;
mod config;
mod eval;
mod gradcheck;
mod metrics;
mod optim;
mod run;
mod step;

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, rng_digest, save_checkpoint, Checkpoint,
    ParamEntry, FORMAT_VERSION, MAGIC,
};
pub use config::{GcTarget, KtInput, TrainConfig};
pub use eval::{gc_rank_correlation, GcEvalReport};
pub use gradcheck::{gradcheck_model, total_loss_gradcheck};
pub use metrics::{
    average_ranks, epoch_means, mean_defined, read_csv, spearman, to_csv, write_csv, StepMetrics,
    CSV_HEADER,
};
pub use optim::{adamw_step, cosine_lr, AdamState, AdamWConfig};
pub use run::{
    bootstrap_knowledge_teacher, epoch_order, resume_run, run_epochs, train_run, train_samples,
    RunOptions, RunOutput, CHECKPOINT_FILE, METRICS_FILE,
};
pub use step::{
    effective_weights, init_student, knowledge_targets, lr_at, prepare_sample, sample_objective,
    train_step, Mode, Objective, TrainState,
};
