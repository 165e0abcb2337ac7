use super::config::TrainConfig;
use super::step::{effective_weights, sample_objective, Mode};
use crate::data::{synth_shape, ShapeKind};
use crate::diffcore::{finite_diff_check, FdOptions, FdReport, Graph, Tensor, Var};
use crate::error::Result;
use crate::geometry::{patchify, unit_sphere_normalize, PatchSet};
use crate::masking::{gc_guided_mask, MaskPartition};
use crate::model::{infer, GcScores, Gm3dParams, ModelConfig, Net};
use crate::seeding::{stream_rng, Purpose};

/// Small model used for whole-objective gradient checks.
pub fn gradcheck_model() -> ModelConfig {
    ModelConfig {
        embed_dim: 16,
        encoder_depth: 1,
        decoder_depth: 1,
        heads: 2,
        mlp_ratio: 2,
        patch_size: 4,
        n_patches: 8,
        mask_ratio: 0.5,
        ..Default::default()
    }
}

struct Case {
    ps: PatchSet,
    mask: MaskPartition,
    target: Tensor<f64>,
}

/// Finite-difference check of the full weighted objective (ranking,
/// reconstruction and distillation terms, all active) summed over two
/// samples, against every student parameter.
pub fn total_loss_gradcheck(seed: u64, opts: &FdOptions) -> Result<FdReport> {
    let model = gradcheck_model();
    let cfg = TrainConfig {
        model: model.clone(),
        seed,
        ..Default::default()
    };
    let epoch = cfg.loss.warmup_epochs + 1;
    let student = Gm3dParams::init(&model, seed)?;
    let teacher = Gm3dParams::init(&model, seed ^ 0x5eed)?;
    let kt = Gm3dParams::init(&model, seed ^ 0xfeed)?.cast::<f64>();
    let layout = student.layout();
    let nm = model.n_masked();

    let mut cases = Vec::new();
    for (i, kind) in [ShapeKind::Sphere, ShapeKind::RidgedPlane].into_iter().enumerate() {
        let cloud = unit_sphere_normalize(&synth_shape(kind, 48, seed + i as u64, 0.01)?);
        let ps = patchify(&cloud, model.n_patches, model.patch_size, seed + i as u64)?;
        let scores = GcScores::teacher(&teacher, &layout, &ps).values;
        let mut rng = stream_rng(seed, Purpose::Mask, &[i as u64]);
        let mask = gc_guided_mask(&scores, nm, nm / 2, &mut rng)?;
        let target = infer(&kt, &layout, |net, g| net.encode_full(g, &ps));
        cases.push(Case { ps, mask, target });
    }

    let weights = effective_weights(Mode::Gm3d, &cfg);
    let params: Vec<Tensor<f64>> = student.cast::<f64>().tensors;
    let build = |g: &mut Graph<f64>, vars: &[Var]| -> Result<Var> {
        let net = Net {
            config: &model,
            layout: &layout,
            vars: vars.to_vec(),
        };
        let mut total = None;
        for c in &cases {
            let o = sample_objective(g, &net, &c.ps, &c.mask, Some(c.target.clone()), &cfg, &weights, epoch)?;
            total = Some(match total {
                None => o.total,
                Some(t) => g.add(t, o.total),
            });
        }
        Ok(total.expect("two cases"))
    };
    finite_diff_check(build, &params, opts)
}
