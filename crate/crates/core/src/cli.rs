//! `gm3d` command-line interface.

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::data::{load_pointcloud, synth_shape, write_ply, Dataset, ShapeKind};
use crate::diffcore::FdOptions;
use crate::error::{Error, Result};
use crate::geometry::{patchify, unit_sphere_normalize, PointCloud};
use crate::masking::{gc_guided_mask, n_sel};
use crate::model::{GcScores, Gm3dParams};
use crate::pipeline::{
    bootstrap_knowledge_teacher, init_student, load_checkpoint, read_csv, resume_run, save_checkpoint,
    total_loss_gradcheck, train_run, write_csv, Mode, RunOptions, TrainConfig, CHECKPOINT_FILE,
    METRICS_FILE,
};
use crate::probe::{run_probe, ProbeConfig};
use crate::seeding::{stream_rng, Purpose};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "gm3d", version, about = "Geometry-guided masked autoencoder pretraining for point clouds")]
pub struct Cli {
    /// Worker threads (results are identical for any value).
    #[arg(long, global = true, default_value_t = 1)]
    pub threads: usize,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, clap::Args)]
pub struct ConfigArgs {
    /// JSON training config; defaults apply when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override a top-level scalar config key, e.g. `--override epochs=5`.
    #[arg(long = "override", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Bootstrap the knowledge teacher (unless one is given), then run guided pretraining.
    Pretrain {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
        /// Use the student of this checkpoint as the knowledge teacher.
        #[arg(long)]
        knowledge_teacher: Option<PathBuf>,
        /// Continue from `<out>/checkpoint.gm3d` and `<out>/metrics.csv`.
        #[arg(long)]
        resume: bool,
        #[arg(long)]
        quiet: bool,
    },
    /// Train the plain random-masking autoencoder used as knowledge teacher.
    Bootstrap {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        quiet: bool,
    },
    /// Linear probe on frozen student encoder features.
    Probe {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset manifest with train and test splits.
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
    },
    /// Write a PLY colored by per-object normalized teacher complexity.
    GcExport {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Print the mask partition the curriculum would produce.
    MaskDemo {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        epoch: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Teacher to score patches with; a fresh initialization otherwise.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Point cloud file; a synthetic shape otherwise.
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long, default_value = "ridged-plane")]
        shape: String,
    },
    /// Finite-difference check of the full training objective.
    CheckGrad {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1e-3)]
        tolerance: f64,
    },
}

pub fn load_config(args: &ConfigArgs) -> Result<TrainConfig> {
    let mut cfg = match &args.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            TrainConfig::from_json(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
        }
        None => TrainConfig::default(),
    };
    for o in &args.overrides {
        let (k, v) = o
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override `{o}` is not KEY=VALUE")))?;
        cfg = cfg.with_override(k.trim(), v.trim())?;
    }
    Ok(cfg)
}

fn options(threads: usize, out: &Path, quiet: bool) -> RunOptions {
    RunOptions {
        threads,
        out_dir: Some(out.to_path_buf()),
        stop_after_epoch: None,
        verbose: !quiet,
    }
}

fn with_pool<T: Send>(threads: usize, f: impl FnOnce() -> Result<T> + Send) -> Result<T> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
        .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))?;
    pool.install(f)
}

/// Teacher scores colored red (highest) to blue (lowest), min-max normalized
/// within the object.
pub fn gc_colors(scores: &[f32]) -> Vec<[u8; 3]> {
    let lo = scores.iter().cloned().fold(f32::INFINITY, f32::min);
    let hi = scores.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
    scores
        .iter()
        .map(|&s| {
            let t = if hi > lo { ((s - lo) / (hi - lo)) as f64 } else { 0.0 };
            let r = (t * 255.0).round() as u8;
            [r, 0, 255 - r]
        })
        .collect()
}

fn demo_cloud(input: &Option<PathBuf>, shape: &str, n_points: usize, seed: u64) -> Result<PointCloud> {
    let raw = match input {
        Some(p) => load_pointcloud(p)?,
        None => synth_shape(shape.parse::<ShapeKind>()?, n_points, seed, 0.01)?,
    };
    Ok(unit_sphere_normalize(&raw))
}

fn execute(cli: Cli, out: &mut dyn Write) -> Result<()> {
    let threads = cli.threads;
    let say = |out: &mut dyn Write, s: String| writeln!(out, "{s}").map_err(|e| Error::io("<stdout>", e));
    match cli.command {
        Command::Pretrain {
            cfg,
            out: dir,
            knowledge_teacher,
            resume,
            quiet,
        } => {
            let cfg = load_config(&cfg)?;
            let ds = cfg.dataset.load()?;
            let opts = options(threads, &dir, quiet);
            let run = if resume {
                let ck = load_checkpoint(&dir.join(CHECKPOINT_FILE), Some(&cfg.model))?;
                if ck.state.mode != Mode::Gm3d {
                    return Err(Error::Config("resume checkpoint is not a pretraining checkpoint".into()));
                }
                let metrics = read_csv(&dir.join(METRICS_FILE))?;
                resume_run(&cfg, &ds, ck.state, metrics, &opts)?
            } else {
                let kt = match &knowledge_teacher {
                    Some(p) => load_checkpoint(p, Some(&cfg.model))?.state.student,
                    None if cfg.bootstrap_epochs > 0 => bootstrap_knowledge_teacher(&cfg, &ds, &opts)?.0,
                    None => init_student(&cfg)?,
                };
                train_run(&cfg, &ds, kt, &opts)?
            };
            std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            save_checkpoint(&dir.join(CHECKPOINT_FILE), &run.state, Some(&cfg))?;
            write_csv(&dir.join(METRICS_FILE), &run.metrics)?;
            say(out, format!("checkpoint={}", dir.join(CHECKPOINT_FILE).display()))?;
            say(out, format!("steps={}", run.metrics.len()))
        }
        Command::Bootstrap { cfg, out: dir, quiet } => {
            let cfg = load_config(&cfg)?;
            let ds = cfg.dataset.load()?;
            let (_, metrics) = bootstrap_knowledge_teacher(&cfg, &ds, &options(threads, &dir, quiet))?;
            say(out, format!("checkpoint={}", dir.join(format!("bootstrap_{CHECKPOINT_FILE}")).display()))?;
            say(out, format!("steps={}", metrics.len()))
        }
        Command::Probe {
            checkpoint,
            data,
            seed,
            epochs,
            lr,
        } => {
            let ck = load_checkpoint(&checkpoint, None)?;
            let ds = Dataset::from_manifest(&data)?;
            let mut pc = ProbeConfig::default();
            if let Some(e) = epochs {
                pc.epochs = e;
            }
            if let Some(l) = lr {
                pc.lr = l;
            }
            let report = with_pool(threads, || run_probe(&ck.state.student, &ds, &pc, seed))?;
            say(out, format!("train_accuracy={}", report.train_accuracy))?;
            say(out, format!("accuracy={}", report.test_accuracy))
        }
        Command::GcExport {
            checkpoint,
            input,
            out: path,
            seed,
        } => {
            let ck = load_checkpoint(&checkpoint, None)?;
            let teacher = &ck.state.teacher;
            let cloud = unit_sphere_normalize(&load_pointcloud(&input)?);
            let ps = patchify(&cloud, teacher.config.n_patches, teacher.config.patch_size, seed)?;
            let scores = GcScores::teacher(teacher, &teacher.layout(), &ps).values;
            let colors = gc_colors(&scores);
            let mut pts = Vec::with_capacity(ps.patches.len());
            let mut cols = Vec::with_capacity(ps.patches.len());
            for i in 0..ps.n() {
                let c = ps.centers[i];
                for p in ps.patch(i) {
                    pts.push([p[0] + c[0], p[1] + c[1], p[2] + c[2]]);
                    cols.push(colors[i]);
                }
            }
            write_ply(&path, &pts, Some(&cols))?;
            say(out, format!("wrote {} points in {} patches to {}", pts.len(), ps.n(), path.display()))
        }
        Command::MaskDemo {
            cfg,
            epoch,
            seed,
            checkpoint,
            input,
            shape,
        } => {
            let cfg = load_config(&cfg)?;
            let teacher: Gm3dParams<f32> = match &checkpoint {
                Some(p) => load_checkpoint(p, Some(&cfg.model))?.state.teacher,
                None => init_student(&cfg)?,
            };
            let n_points = match &cfg.dataset {
                crate::data::DatasetSpec::Synthetic(s) => s.n_points,
                _ => 128,
            };
            let cloud = demo_cloud(&input, &shape, n_points, seed)?;
            let m = &cfg.model;
            let ps = patchify(&cloud, m.n_patches, m.patch_size, seed)?;
            let scores = GcScores::teacher(&teacher, &teacher.layout(), &ps).values;
            let sel = n_sel(epoch, &cfg.curriculum, m.n_masked());
            let mut rng = stream_rng(seed, Purpose::Mask, &[epoch as u64]);
            let mask = gc_guided_mask(&scores, m.n_masked(), sel, &mut rng)?;
            let list = |v: &[usize]| v.iter().map(|i| i.to_string()).collect::<Vec<_>>().join(",");
            say(out, format!("epoch={epoch} n_masked={} n_sel={sel}", m.n_masked()))?;
            say(out, format!("masked={}", list(&mask.masked)))?;
            say(out, format!("visible={}", list(&mask.visible)))?;
            let sc: Vec<String> = scores.iter().map(|s| format!("{s:.4}")).collect();
            say(out, format!("scores={}", sc.join(",")))
        }
        Command::CheckGrad { seed, tolerance } => {
            let opts = FdOptions {
                tolerance,
                seed,
                ..Default::default()
            };
            let r = total_loss_gradcheck(seed, &opts)?;
            say(out, format!("checked={} max_rel_error={:e} pass_fraction={}", r.checked, r.max_rel_error, r.pass_fraction))?;
            if r.max_rel_error > tolerance {
                return Err(Error::InvariantViolation(format!(
                    "gradient check failed: max relative error {:e} at parameter {} coordinate {}",
                    r.max_rel_error, r.worst.0, r.worst.1
                )));
            }
            say(out, "gradient check passed".into())
        }
    }
}

/// Parses `argv` (including the program name) and runs the subcommand.
/// Returns 0 on success, 1 on usage errors and 2 on runtime failures.
pub fn run<I, S>(argv: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = write!(out, "{e}");
                    EXIT_OK
                }
                _ => {
                    let _ = write!(err, "{e}");
                    EXIT_USAGE
                }
            };
        }
    };
    if cli.threads == 0 {
        let _ = writeln!(err, "error: --threads must be at least 1");
        return EXIT_USAGE;
    }
    match execute(cli, out) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            EXIT_RUNTIME
        }
    }
}
