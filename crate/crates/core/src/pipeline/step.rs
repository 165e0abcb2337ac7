use rayon::prelude::*;

use super::config::{GcTarget, KtInput, TrainConfig};
use super::metrics::{mean_defined, spearman, StepMetrics};
use super::optim::{adamw_step, cosine_lr, AdamState};
use crate::data::augment;
use crate::diffcore::{Graph, Scalar, Tensor, Var};
use crate::error::{Error, Result};
use crate::geometry::{patchify, PatchSet, PointCloud};
use crate::losses::{loss_gc, loss_rec_f, loss_rec_p, total_loss, LossWeights, PerPatchLoss};
use crate::masking::{gc_guided_mask, n_sel, random_mask, MaskPartition};
use crate::model::{ema_update, infer, patch_tensor, GcScores, Gm3dParams, Layout, Net};
use crate::seeding::{stream_rng, stream_seed, Purpose};

/// Plain random-masking reconstruction, or the full method with teacher
/// guided masking, ranking loss and distillation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Bootstrap,
    Gm3d,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::Bootstrap => "bootstrap",
            Mode::Gm3d => "gm3d",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "bootstrap" => Some(Mode::Bootstrap),
            "gm3d" => Some(Mode::Gm3d),
            _ => None,
        }
    }

    pub fn epochs(self, cfg: &TrainConfig) -> usize {
        match self {
            Mode::Bootstrap => cfg.bootstrap_epochs,
            Mode::Gm3d => cfg.epochs,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub mode: Mode,
    pub student: Gm3dParams<f32>,
    pub teacher: Gm3dParams<f32>,
    pub knowledge_teacher: Gm3dParams<f32>,
    pub adam: AdamState,
    /// Next epoch to run.
    pub epoch: usize,
    /// Optimizer steps taken so far.
    pub step: u64,
}

/// Student initialization shared by both modes.
pub fn init_student(cfg: &TrainConfig) -> Result<Gm3dParams<f32>> {
    Gm3dParams::init(&cfg.model, stream_seed(cfg.seed, Purpose::Init, &[]))
}

impl TrainState {
    /// Fresh state; the teacher starts as a copy of the student.
    pub fn new(mode: Mode, cfg: &TrainConfig, knowledge_teacher: Option<Gm3dParams<f32>>) -> Result<Self> {
        cfg.validate()?;
        let student = init_student(cfg)?;
        let knowledge_teacher = match knowledge_teacher {
            Some(kt) => {
                if kt.config != cfg.model {
                    return Err(Error::Config(
                        "knowledge teacher was trained with a different model config".into(),
                    ));
                }
                kt
            }
            None => student.clone(),
        };
        Ok(TrainState {
            mode,
            adam: AdamState::zeros_like(&student),
            teacher: student.clone(),
            student,
            knowledge_teacher,
            epoch: 0,
            step: 0,
        })
    }
}

/// Augmented, patchified view of one training cloud at `epoch`.
pub fn prepare_sample(cfg: &TrainConfig, epoch: usize, id: usize, cloud: &PointCloud) -> Result<PatchSet> {
    let tags = [epoch as u64, id as u64];
    let cloud = if cfg.augment {
        augment(cloud, &mut stream_rng(cfg.seed, Purpose::Augment, &tags))
    } else {
        cloud.clone()
    };
    patchify(
        &cloud,
        cfg.model.n_patches,
        cfg.model.patch_size,
        stream_seed(cfg.seed, Purpose::Patchify, &tags),
    )
}

/// Row `i` of the result is token `order[i]`; this gives the inverse map.
fn inverse_order(mask: &MaskPartition) -> Vec<usize> {
    let mut inv = vec![0; mask.n];
    for (pos, &orig) in mask.token_order().iter().enumerate() {
        inv[orig] = pos;
    }
    inv
}

/// Distillation targets `[N, d]` in original patch order.
pub fn knowledge_targets(
    kt: &Gm3dParams<f32>,
    layout: &Layout,
    ps: &PatchSet,
    mask: &MaskPartition,
    input: KtInput,
) -> Tensor<f32> {
    match input {
        KtInput::Full => infer(kt, layout, |net, g| net.encode_full(g, ps)),
        KtInput::Visible => infer(kt, layout, |net, g| {
            let out = net.student(g, ps, mask);
            g.gather(out.decoded.output, &inverse_order(mask))
        }),
    }
}

struct SampleOutcome {
    grads: Vec<Option<Vec<f32>>>,
    l_gc: f64,
    l_rec_p: f64,
    l_rec_f: f64,
    l_total: f64,
    rank_corr: Option<f64>,
}

/// Weights actually applied in `mode`: bootstrap trains reconstruction only.
pub fn effective_weights(mode: Mode, cfg: &TrainConfig) -> LossWeights {
    match mode {
        Mode::Gm3d => cfg.loss.clone(),
        Mode::Bootstrap => LossWeights {
            alpha: 0.0,
            gamma: 0.0,
            ..cfg.loss.clone()
        },
    }
}

fn check_finite(name: &str, v: f64, epoch: usize, id: usize) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite(format!("{name} = {v} (epoch {epoch}, sample {id})")))
    }
}

/// Loss graph nodes of one sample plus the detached ranking ground truth.
pub struct Objective<T> {
    pub total: Var,
    pub l_gc: Var,
    pub l_rec_p: Var,
    pub l_rec_f: Var,
    /// Per-masked-patch ground truth for the ranking loss; empty without a
    /// knowledge teacher.
    pub combined: Vec<T>,
}

/// Builds the per-sample objective on a bound student. Without distillation
/// targets only the reconstruction term is formed, with zero constants in
/// place of the ranking and feature terms.
#[allow(clippy::too_many_arguments)]
pub fn sample_objective<T: Scalar>(
    g: &mut Graph<T>,
    net: &Net<'_>,
    ps: &PatchSet,
    mask: &MaskPartition,
    kt_target: Option<Tensor<T>>,
    cfg: &TrainConfig,
    weights: &LossWeights,
    epoch: usize,
) -> Result<Objective<T>> {
    let out = net.student(g, ps, mask);
    let truth = g.constant(patch_tensor(ps, &mask.masked));
    let (lp, per_p) = loss_rec_p(g, out.recon, truth)?;
    let (lgc, lf, combined) = match kt_target {
        None => {
            let z = g.constant(Tensor::scalar(T::zero()));
            (z, z, Vec::new())
        }
        Some(target) => {
            let target = g.constant(target);
            let student_feats = g.gather(out.decoded.output, &inverse_order(mask));
            let (lf, per_f) = loss_rec_f(g, target, student_feats, &mask.masked)?;
            let include_f = cfg.gc_target == GcTarget::Combined && cfg.loss.distill_active(epoch);
            let per = PerPatchLoss::new(
                g.value(per_p).data().to_vec(),
                g.value(per_f).data().to_vec(),
                include_f,
            );
            let nv = mask.visible.len();
            let masked_rows: Vec<usize> = (nv..mask.n).collect();
            let gc_masked = g.gather(out.gc, &masked_rows);
            let lgc = loss_gc(g, gc_masked, &per.combined, cfg.loss.drc_normalize)?;
            (lgc, lf, per.combined)
        }
    };
    let total = total_loss(g, weights, lgc, lp, lf, epoch);
    Ok(Objective {
        total,
        l_gc: lgc,
        l_rec_p: lp,
        l_rec_f: lf,
        combined,
    })
}

#[allow(clippy::too_many_arguments)]
fn sample_step(
    mode: Mode,
    cfg: &TrainConfig,
    state: &TrainState,
    layout: &Layout,
    epoch: usize,
    id: usize,
    cloud: &PointCloud,
    selected: usize,
    batch_len: usize,
) -> Result<SampleOutcome> {
    let ps = prepare_sample(cfg, epoch, id, cloud)?;
    let n = cfg.model.n_patches;
    let nm = cfg.model.n_masked();
    let mut mask_rng = stream_rng(cfg.seed, Purpose::Mask, &[epoch as u64, id as u64]);
    let (mask, teacher_scores) = match mode {
        Mode::Bootstrap => (random_mask(n, cfg.model.mask_ratio, &mut mask_rng)?, None),
        Mode::Gm3d => {
            let scores = GcScores::teacher(&state.teacher, layout, &ps).values;
            (gc_guided_mask(&scores, nm, selected, &mut mask_rng)?, Some(scores))
        }
    };

    let target = match mode {
        Mode::Bootstrap => None,
        Mode::Gm3d => Some(knowledge_targets(&state.knowledge_teacher, layout, &ps, &mask, cfg.kt_input)),
    };
    let mut g = Graph::<f32>::new();
    let net = Net::bind(&mut g, &state.student, layout, true);
    let weights = effective_weights(mode, cfg);
    let obj = sample_objective(&mut g, &net, &ps, &mask, target, cfg, &weights, epoch)?;
    let rank_corr = teacher_scores.as_ref().and_then(|s| {
        let t: Vec<f64> = mask.masked.iter().map(|&i| s[i] as f64).collect();
        let c: Vec<f64> = obj.combined.iter().map(|&v| v as f64).collect();
        spearman(&t, &c)
    });
    let (lgc, lp, lf, total) = (obj.l_gc, obj.l_rec_p, obj.l_rec_f, obj.total);
    let l_gc = check_finite("l_gc", g.value(lgc).item() as f64, epoch, id)?;
    let l_rec_p = check_finite("l_rec_p", g.value(lp).item() as f64, epoch, id)?;
    let l_rec_f = check_finite("l_rec_f", g.value(lf).item() as f64, epoch, id)?;
    let l_total = check_finite("l_total", g.value(total).item() as f64, epoch, id)?;

    let objective = g.scale(total, 1.0 / batch_len as f64);
    g.backward(objective)?;
    let grads = net.vars.iter().map(|&v| g.grad(v).map(|s| s.to_vec())).collect();
    Ok(SampleOutcome {
        grads,
        l_gc,
        l_rec_p,
        l_rec_f,
        l_total,
        rank_corr,
    })
}

/// Learning rate at `iter` of `iters_per_epoch` within `epoch`.
pub fn lr_at(mode: Mode, cfg: &TrainConfig, epoch: usize, iter: usize, iters_per_epoch: usize) -> f64 {
    let progress = epoch as f64 + iter as f64 / iters_per_epoch.max(1) as f64;
    cosine_lr(cfg.base_lr, progress, mode.epochs(cfg) as f64, cfg.cosine)
}

/// One optimizer step over `batch` (`(sample id, cloud)` pairs): teacher
/// scores, mask, student forward, distillation targets, losses, backward,
/// AdamW on the student, then the momentum update of the teacher.
pub fn train_step(
    cfg: &TrainConfig,
    state: &mut TrainState,
    batch: &[(usize, &PointCloud)],
    iter: usize,
    iters_per_epoch: usize,
) -> Result<StepMetrics> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let mode = state.mode;
    let epoch = state.epoch;
    let layout = state.student.layout();
    let selected = match mode {
        Mode::Gm3d => n_sel(epoch, &cfg.curriculum, cfg.model.n_masked()),
        Mode::Bootstrap => 0,
    };
    let lr = lr_at(mode, cfg, epoch, iter, iters_per_epoch);

    let shared: &TrainState = state;
    let outcomes: Vec<SampleOutcome> = batch
        .par_iter()
        .map(|&(id, cloud)| sample_step(mode, cfg, shared, &layout, epoch, id, cloud, selected, batch.len()))
        .collect::<Result<_>>()?;

    let mut grads: Vec<Option<Vec<f32>>> = vec![None; layout.len()];
    for o in &outcomes {
        for (acc, g) in grads.iter_mut().zip(&o.grads) {
            if let Some(g) = g {
                match acc {
                    Some(a) => a.iter_mut().zip(g).for_each(|(x, y)| *x += y),
                    None => *acc = Some(g.clone()),
                }
            }
        }
    }
    adamw_step(&mut state.student, &layout, &mut state.adam, &grads, lr, &cfg.adamw())?;
    if mode == Mode::Gm3d && cfg.ema_enabled {
        ema_update(&mut state.teacher, &state.student, cfg.momentum)?;
    }
    if !state.student.is_finite() {
        return Err(Error::NonFinite(format!("student parameters after step {}", state.step)));
    }

    let b = outcomes.len() as f64;
    let mean = |f: fn(&SampleOutcome) -> f64| outcomes.iter().map(f).sum::<f64>() / b;
    let metrics = StepMetrics {
        epoch,
        iter: state.step,
        l_gc: mean(|o| o.l_gc),
        l_rec_p: mean(|o| o.l_rec_p),
        l_rec_f: mean(|o| o.l_rec_f),
        l_total: mean(|o| o.l_total),
        n_sel: selected,
        lr,
        rank_corr: mean_defined(outcomes.iter().map(|o| o.rank_corr)),
    };
    state.step += 1;
    Ok(metrics)
}
