use rayon::prelude::*;

use super::config::TrainConfig;
use super::metrics::{mean_defined, spearman};
use super::step::{effective_weights, knowledge_targets, sample_objective, Mode, TrainState};
use crate::data::{Dataset, Split};
use crate::diffcore::Graph;
use crate::error::Result;
use crate::geometry::patchify;
use crate::masking::random_mask;
use crate::model::{GcScores, Net};
use crate::seeding::{stream_rng, stream_seed, Purpose};

#[derive(Clone, Debug, PartialEq)]
pub struct GcEvalReport {
    /// Mean Spearman correlation over samples where it is defined.
    pub mean_rho: f64,
    pub n_samples: usize,
    pub n_defined: usize,
}

/// Rank agreement between teacher complexity scores and the per-patch
/// reconstruction loss the student actually incurs, on unaugmented clouds of
/// `split` under a seeded random mask. The per-patch loss uses the
/// post-warmup definition (Chamfer plus feature term when configured).
pub fn gc_rank_correlation(
    cfg: &TrainConfig,
    state: &TrainState,
    ds: &Dataset,
    split: Split,
    seed: u64,
) -> Result<GcEvalReport> {
    let layout = state.student.layout();
    let m = &cfg.model;
    let epoch = cfg.epochs.max(cfg.loss.warmup_epochs + 1);
    let weights = effective_weights(Mode::Gm3d, cfg);
    let rows: Vec<usize> = (0..ds.samples.len()).filter(|&i| ds.samples[i].split == split).collect();
    let rhos = rows
        .par_iter()
        .map(|&i| -> Result<Option<f64>> {
            let fps = stream_seed(seed, Purpose::Patchify, &[u64::MAX, i as u64]);
            let ps = patchify(&ds.samples[i].cloud, m.n_patches, m.patch_size, fps)?;
            let mut rng = stream_rng(seed, Purpose::Mask, &[u64::MAX, i as u64]);
            let mask = random_mask(m.n_patches, m.mask_ratio, &mut rng)?;
            let scores = GcScores::teacher(&state.teacher, &layout, &ps).values;
            let target = knowledge_targets(&state.knowledge_teacher, &layout, &ps, &mask, cfg.kt_input);
            let mut g = Graph::<f32>::new();
            let net = Net::bind(&mut g, &state.student, &layout, false);
            let obj = sample_objective(&mut g, &net, &ps, &mask, Some(target), cfg, &weights, epoch)?;
            let t: Vec<f64> = mask.masked.iter().map(|&j| scores[j] as f64).collect();
            let c: Vec<f64> = obj.combined.iter().map(|&v| v as f64).collect();
            Ok(spearman(&t, &c))
        })
        .collect::<Result<Vec<_>>>()?;
    let n_defined = rhos.iter().flatten().count();
    Ok(GcEvalReport {
        mean_rho: mean_defined(rhos),
        n_samples: rows.len(),
        n_defined,
    })
}
