use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;

use super::checkpoint::save_checkpoint;
use super::config::TrainConfig;
use super::metrics::{write_csv, StepMetrics};
use super::step::{train_step, Mode, TrainState};
use crate::data::{Dataset, Split};
use crate::error::{Error, Result};
use crate::geometry::PointCloud;
use crate::model::Gm3dParams;
use crate::seeding::{stream_rng, Purpose};

pub const CHECKPOINT_FILE: &str = "checkpoint.gm3d";
pub const METRICS_FILE: &str = "metrics.csv";

#[derive(Clone, Debug)]
pub struct RunOptions {
    /// Worker threads for per-sample evaluation. Results do not depend on it.
    pub threads: usize,
    /// Where checkpoints and metrics go; nothing is written when unset.
    pub out_dir: Option<PathBuf>,
    /// Stop once this many epochs are complete (simulates an interruption).
    pub stop_after_epoch: Option<usize>,
    /// Print a one-line summary per epoch to stderr.
    pub verbose: bool,
}

impl Default for RunOptions {
    fn default() -> Self {
        RunOptions {
            threads: 1,
            out_dir: None,
            stop_after_epoch: None,
            verbose: false,
        }
    }
}

#[derive(Clone, Debug)]
pub struct RunOutput {
    pub state: TrainState,
    pub metrics: Vec<StepMetrics>,
}

/// Training samples as `(dataset index, cloud)` pairs.
pub fn train_samples(ds: &Dataset) -> Vec<(usize, &PointCloud)> {
    ds.samples
        .iter()
        .enumerate()
        .filter(|(_, s)| s.split == Split::Train)
        .map(|(i, s)| (i, &s.cloud))
        .collect()
}

/// Visiting order of the training samples in `epoch`.
pub fn epoch_order(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut stream_rng(seed, Purpose::Shuffle, &[epoch as u64]));
    order
}

fn pool(threads: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
        .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))
}

fn write_outputs(dir: &Path, state: &TrainState, cfg: &TrainConfig, metrics: &[StepMetrics], prefix: &str) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    save_checkpoint(&dir.join(format!("{prefix}{CHECKPOINT_FILE}")), state, Some(cfg))?;
    write_csv(&dir.join(format!("{prefix}{METRICS_FILE}")), metrics)
}

/// Runs epochs from `state.epoch` until the mode's epoch budget (or the
/// interruption point) is reached, appending to `metrics`.
pub fn run_epochs(
    cfg: &TrainConfig,
    ds: &Dataset,
    state: &mut TrainState,
    metrics: &mut Vec<StepMetrics>,
    opts: &RunOptions,
) -> Result<()> {
    let samples = train_samples(ds);
    if samples.is_empty() {
        return Err(Error::InvalidArgument("dataset has no training samples".into()));
    }
    let total = state.mode.epochs(cfg);
    let end = opts.stop_after_epoch.map_or(total, |s| s.min(total));
    let iters = samples.len().div_ceil(cfg.batch_size);
    let prefix = match state.mode {
        Mode::Bootstrap => "bootstrap_",
        Mode::Gm3d => "",
    };
    let kt_digest = state.knowledge_teacher.digest();
    let workers = pool(opts.threads)?;
    while state.epoch < end {
        let order = epoch_order(cfg.seed, state.epoch, samples.len());
        for (it, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<(usize, &PointCloud)> = chunk.iter().map(|&i| samples[i]).collect();
            let m = workers.install(|| train_step(cfg, state, &batch, it, iters))?;
            metrics.push(m);
        }
        if opts.verbose {
            let rows = &metrics[metrics.len() - iters..];
            let mean = |f: fn(&StepMetrics) -> f64| rows.iter().map(f).sum::<f64>() / rows.len() as f64;
            eprintln!(
                "[{}] epoch {:>3}  l_rec_p {:.5}  l_rec_f {:.5}  l_gc {:.4}  rank_corr {:+.3}",
                state.mode.name(),
                state.epoch,
                mean(|r| r.l_rec_p),
                mean(|r| r.l_rec_f),
                mean(|r| r.l_gc),
                mean(|r| r.rank_corr),
            );
        }
        state.epoch += 1;
        if let Some(dir) = &opts.out_dir {
            let due = cfg.checkpoint_every > 0 && state.epoch.is_multiple_of(cfg.checkpoint_every);
            if due || state.epoch == end {
                write_outputs(dir, state, cfg, metrics, prefix)?;
            }
        }
    }
    if state.knowledge_teacher.digest() != kt_digest {
        return Err(Error::InvariantViolation("knowledge teacher changed during training".into()));
    }
    Ok(())
}

/// Trains a plain random-masking autoencoder and returns it frozen,
/// together with its per-step metrics.
pub fn bootstrap_knowledge_teacher(
    cfg: &TrainConfig,
    ds: &Dataset,
    opts: &RunOptions,
) -> Result<(Gm3dParams<f32>, Vec<StepMetrics>)> {
    let mut state = TrainState::new(Mode::Bootstrap, cfg, None)?;
    let mut metrics = Vec::new();
    let opts = RunOptions {
        stop_after_epoch: None,
        ..opts.clone()
    };
    run_epochs(cfg, ds, &mut state, &mut metrics, &opts)?;
    Ok((state.student, metrics))
}

/// Full training from scratch with the given frozen knowledge teacher.
pub fn train_run(
    cfg: &TrainConfig,
    ds: &Dataset,
    knowledge_teacher: Gm3dParams<f32>,
    opts: &RunOptions,
) -> Result<RunOutput> {
    let state = TrainState::new(Mode::Gm3d, cfg, Some(knowledge_teacher))?;
    resume_run(cfg, ds, state, Vec::new(), opts)
}

/// Continues training from a saved state and the metrics logged so far.
pub fn resume_run(
    cfg: &TrainConfig,
    ds: &Dataset,
    mut state: TrainState,
    mut metrics: Vec<StepMetrics>,
    opts: &RunOptions,
) -> Result<RunOutput> {
    cfg.validate()?;
    state.student.check_layout()?;
    if state.student.config != cfg.model {
        return Err(Error::Config("checkpoint model config differs from the run config".into()));
    }
    run_epochs(cfg, ds, &mut state, &mut metrics, opts)?;
    Ok(RunOutput { state, metrics })
}
