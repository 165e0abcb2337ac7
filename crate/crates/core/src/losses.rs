//! Training objectives: Chamfer reconstruction, feature distillation,
//! pairwise difficulty ranking and their weighted sum.

use serde::{Deserialize, Serialize};

use crate::diffcore::{Graph, Scalar, Tensor, Var};
use crate::error::{invalid, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    /// Ranking loss weight.
    pub alpha: f64,
    /// Chamfer reconstruction weight.
    pub beta: f64,
    /// Feature distillation weight, active from `warmup_epochs` on.
    pub gamma: f64,
    pub warmup_epochs: usize,
    /// Divide the ranking loss by the number of contributing pairs.
    pub drc_normalize: bool,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            alpha: 1.0,
            beta: 1000.0,
            gamma: 10.0,
            warmup_epochs: 15,
            drc_normalize: true,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta), ("gamma", self.gamma)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(invalid!("loss weight {name} = {v} must be finite and >= 0"));
            }
        }
        Ok(())
    }

    /// Whether the feature term is active at `epoch`.
    pub fn distill_active(&self, epoch: usize) -> bool {
        epoch >= self.warmup_epochs
    }

    pub fn gamma_at(&self, epoch: usize) -> f64 {
        if self.distill_active(epoch) {
            self.gamma
        } else {
            0.0
        }
    }
}

/// Per-masked-patch losses. `combined` is the ranking ground truth and never
/// carries gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct PerPatchLoss<T = f32> {
    pub chamfer: Vec<T>,
    pub feature_mse: Vec<T>,
    pub combined: Vec<T>,
}

impl<T: Scalar> PerPatchLoss<T> {
    pub fn new(chamfer: Vec<T>, feature_mse: Vec<T>, include_feature: bool) -> Self {
        let combined = if include_feature {
            chamfer.iter().zip(&feature_mse).map(|(&a, &b)| a + b).collect()
        } else {
            chamfer.clone()
        };
        PerPatchLoss {
            chamfer,
            feature_mse,
            combined,
        }
    }
}

/// Per-set Chamfer distance between batched point sets `[B, n, 3]` and
/// `[B, m, 3]`, using squared distances summed in both directions. Returns `[B]`.
pub fn chamfer_batched<T: Scalar>(g: &mut Graph<T>, a: Var, b: Var) -> Result<Var> {
    let (sa, sb) = (g.shape(a).to_vec(), g.shape(b).to_vec());
    if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != 3 || sb[2] != 3 {
        return Err(invalid!("chamfer: incompatible shapes {sa:?} and {sb:?}"));
    }
    if sa[1] == 0 || sb[1] == 0 {
        return Err(invalid!("chamfer: point sets must be nonempty"));
    }
    let d = g.pairwise_sq_dist(a, b);
    let fwd = g.min_axis(d, 2);
    let fwd = g.sum_axis(fwd, 1);
    let bwd = g.min_axis(d, 1);
    let bwd = g.sum_axis(bwd, 1);
    Ok(g.add(fwd, bwd))
}

/// Chamfer distance between two point sets `[n, 3]` and `[m, 3]`.
pub fn chamfer<T: Scalar>(g: &mut Graph<T>, a: Var, b: Var) -> Result<Var> {
    let (sa, sb) = (g.shape(a).to_vec(), g.shape(b).to_vec());
    if sa.len() != 2 || sb.len() != 2 {
        return Err(invalid!("chamfer: expected [n, 3] sets, got {sa:?} and {sb:?}"));
    }
    let a3 = g.reshape(a, &[1, sa[0], sa[1]]);
    let b3 = g.reshape(b, &[1, sb[0], sb[1]]);
    let c = chamfer_batched(g, a3, b3)?;
    Ok(g.reshape(c, &[]))
}

fn zero_scalar<T: Scalar>(g: &mut Graph<T>) -> Var {
    g.constant(Tensor::scalar(T::zero()))
}

/// Mean Chamfer over masked patches. Returns `(mean, per-patch [N^m])`.
pub fn loss_rec_p<T: Scalar>(g: &mut Graph<T>, predicted: Var, target: Var) -> Result<(Var, Var)> {
    if g.shape(predicted) != g.shape(target) {
        return Err(invalid!(
            "reconstruction shape {:?} != target shape {:?}",
            g.shape(predicted),
            g.shape(target)
        ));
    }
    if g.shape(predicted)[0] == 0 {
        let empty = g.constant(Tensor::zeros(&[0]));
        return Ok((zero_scalar(g), empty));
    }
    let per = chamfer_batched(g, target, predicted)?;
    Ok((g.mean(per), per))
}

/// Feature-space distillation over masked patches: squared error averaged
/// over the feature dimension per patch, then over patches. Both feature
/// sets are `[N, d]` in original patch order.
pub fn loss_rec_f<T: Scalar>(
    g: &mut Graph<T>,
    target_features: Var,
    student_features: Var,
    masked: &[usize],
) -> Result<(Var, Var)> {
    let (st, ss) = (g.shape(target_features).to_vec(), g.shape(student_features).to_vec());
    if st.len() != 2 || st != ss {
        return Err(invalid!("feature shapes {st:?} and {ss:?} must match and be 2-D"));
    }
    if let Some(&bad) = masked.iter().find(|&&m| m >= st[0]) {
        return Err(invalid!("masked index {bad} out of range {}", st[0]));
    }
    if masked.is_empty() {
        let empty = g.constant(Tensor::zeros(&[0]));
        return Ok((zero_scalar(g), empty));
    }
    let t = g.gather(target_features, masked);
    let s = g.gather(student_features, masked);
    let sq = g.sq_diff(s, t);
    let per = g.mean_axis(sq, 1);
    Ok((g.mean(per), per))
}

/// Ordered pairs `(winner, loser)` where the winner has the strictly larger
/// ground-truth loss. Each unordered pair with distinct losses appears twice,
/// once from each side of the sum.
pub fn ranking_pairs<T: Scalar>(truth: &[T]) -> (Vec<usize>, Vec<usize>) {
    let mut win = Vec::new();
    let mut lose = Vec::new();
    for k in 0..truth.len() {
        for l in 0..truth.len() {
            if k == l {
                continue;
            }
            if truth[k] > truth[l] {
                win.push(k);
                lose.push(l);
            } else if truth[k] < truth[l] {
                win.push(l);
                lose.push(k);
            }
        }
    }
    (win, lose)
}

/// Pairwise logistic ranking loss on predicted complexity scores:
/// `-sum log sigmoid(s_win - s_lose)` over ordered pairs whose ground-truth
/// losses differ. `truth` is plain data, so no gradient reaches it.
pub fn loss_gc<T: Scalar>(g: &mut Graph<T>, scores: Var, truth: &[T], normalize: bool) -> Result<Var> {
    let s = g.shape(scores).to_vec();
    if s.len() != 1 || s[0] != truth.len() {
        return Err(invalid!(
            "score shape {s:?} does not match {} ground-truth values",
            truth.len()
        ));
    }
    let (win, lose) = ranking_pairs(truth);
    if win.is_empty() {
        return Ok(zero_scalar(g));
    }
    let hi = g.gather(scores, &win);
    let lo = g.gather(scores, &lose);
    let margin = g.sub(hi, lo);
    let ll = g.log_sigmoid(margin);
    let total = if normalize { g.mean(ll) } else { g.sum(ll) };
    Ok(g.scale(total, -1.0))
}

/// `alpha * gc + beta * rec_p + gamma * rec_f`, with gamma zero before warmup ends.
pub fn total_loss<T: Scalar>(
    g: &mut Graph<T>,
    weights: &LossWeights,
    l_gc: Var,
    l_rec_p: Var,
    l_rec_f: Var,
    epoch: usize,
) -> Var {
    let a = g.scale(l_gc, weights.alpha);
    let b = g.scale(l_rec_p, weights.beta);
    let c = g.scale(l_rec_f, weights.gamma_at(epoch));
    let ab = g.add(a, b);
    g.add(ab, c)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn pts(g: &mut Graph<f64>, p: &[[f64; 3]]) -> Var {
        g.param(Tensor::from_rows(p))
    }

    fn chamfer_value(a: &[[f64; 3]], b: &[[f64; 3]]) -> f64 {
        let mut g = Graph::new();
        let (x, y) = (pts(&mut g, a), pts(&mut g, b));
        let c = chamfer(&mut g, x, y).unwrap();
        g.value(c).item()
    }

    // Brute-force double loop.
    fn chamfer_oracle(a: &[[f64; 3]], b: &[[f64; 3]]) -> f64 {
        let d = |p: &[f64; 3], q: &[f64; 3]| (0..3).map(|i| (p[i] - q[i]).powi(2)).sum::<f64>();
        let one = |s: &[[f64; 3]], t: &[[f64; 3]]| {
            s.iter()
                .map(|p| t.iter().map(|q| d(p, q)).fold(f64::INFINITY, f64::min))
                .sum::<f64>()
        };
        one(a, b) + one(b, a)
    }

    fn random_set(rng: &mut ChaCha8Rng, n: usize) -> Vec<[f64; 3]> {
        (0..n).map(|_| [0; 3].map(|_: i32| rng.random_range(-1.0..1.0))).collect()
    }

    #[test]
    fn chamfer_examples() {
        let s = [[0.0, 0.0, 0.0], [2.0, 0.0, 0.0]];
        assert_eq!(chamfer_value(&s, &s), 0.0);
        assert_eq!(chamfer_value(&[[0.0; 3]], &[[1.0, 0.0, 0.0]]), 2.0);
        assert_eq!(chamfer_value(&s, &[[1.0, 0.0, 0.0]]), 3.0);
    }

    #[test]
    fn chamfer_rejects_empty() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::zeros(&[0, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        assert!(chamfer(&mut g, a, b).is_err());
    }

    #[test]
    fn chamfer_matches_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..100 {
            let (n, m) = (rng.random_range(1..=16), rng.random_range(1..=16));
            let a = random_set(&mut rng, n);
            let b = random_set(&mut rng, m);
            let (got, want) = (chamfer_value(&a, &b), chamfer_oracle(&a, &b));
            assert!((got - want).abs() <= 1e-6 * want.abs().max(1e-12));
        }
    }

    #[test]
    fn rec_p_mean_and_perfect() {
        let mut g = Graph::<f64>::new();
        // patch 0: {0, 2x} vs {0, x} -> 1 + 1
        // patch 1: {0, x} vs {0, y+z} -> 1 + 2
        let gt = g.constant(
            Tensor::new(vec![2, 2, 3], vec![0., 0., 0., 2., 0., 0., 0., 0., 0., 1., 0., 0.]).unwrap(),
        );
        let pred = g.param(
            Tensor::new(vec![2, 2, 3], vec![0., 0., 0., 1., 0., 0., 0., 0., 0., 0., 1., 1.]).unwrap(),
        );
        let (mean, per) = loss_rec_p(&mut g, pred, gt).unwrap();
        assert_eq!(g.value(per).data(), &[2.0, 3.0]);
        assert_eq!(g.value(mean).item(), 2.5);

        let (mean, per) = loss_rec_p(&mut g, gt, gt).unwrap();
        assert_eq!(g.value(mean).item(), 0.0);
        assert!(g.value(per).data().iter().all(|&v| v == 0.0));

        let bad = g.constant(Tensor::zeros(&[1, 2, 3]));
        assert!(loss_rec_p(&mut g, bad, gt).is_err());

        let none = g.constant(Tensor::zeros(&[0, 2, 3]));
        let (mean, _) = loss_rec_p(&mut g, none, none).unwrap();
        assert_eq!(g.value(mean).item(), 0.0);
    }

    #[test]
    fn rec_f_examples() {
        let mut g = Graph::<f64>::new();
        let t = g.constant(Tensor::zeros(&[3, 4]));
        let mut sd = vec![0.0; 12];
        sd[4..8].copy_from_slice(&[1.0; 4]);
        let s = g.param(Tensor::new(vec![3, 4], sd).unwrap());
        let (mean, per) = loss_rec_f(&mut g, t, s, &[1]).unwrap();
        assert_eq!(g.value(per).data(), &[1.0]);
        assert_eq!(g.value(mean).item(), 1.0);

        let (mean, _) = loss_rec_f(&mut g, t, t, &[0, 2]).unwrap();
        assert_eq!(g.value(mean).item(), 0.0);

        let (mean, per) = loss_rec_f(&mut g, t, s, &[]).unwrap();
        assert_eq!(g.value(mean).item(), 0.0);
        assert_eq!(g.value(per).numel(), 0);

        assert!(loss_rec_f(&mut g, t, s, &[3]).is_err());
    }

    fn gc_value(scores: &[f64], truth: &[f64]) -> f64 {
        let mut g = Graph::new();
        let s = g.param(Tensor::new(vec![scores.len()], scores.to_vec()).unwrap());
        let l = loss_gc(&mut g, s, truth, true).unwrap();
        g.value(l).item()
    }

    #[test]
    fn gc_examples() {
        assert!((gc_value(&[0.0, 0.0], &[1.0, 2.0]) - std::f64::consts::LN_2).abs() < 1e-12);
        let ordered = gc_value(&[0.0, 10.0, 20.0], &[1.0, 2.0, 3.0]);
        assert!(ordered <= 1e-4, "{ordered}");
        assert_eq!(gc_value(&[1.0, 2.0], &[1.0, 1.0]), 0.0);

        let mut g = Graph::<f64>::new();
        let s = g.param(Tensor::zeros(&[3]));
        assert!(loss_gc(&mut g, s, &[1.0, 2.0], true).is_err());
    }

    #[test]
    fn gc_unnormalized_sums_pairs() {
        let mut g = Graph::<f64>::new();
        let s = g.param(Tensor::zeros(&[2]));
        let l = loss_gc(&mut g, s, &[1.0, 2.0], false).unwrap();
        assert!((g.value(l).item() - 2.0 * std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn gc_truth_carries_no_gradient() {
        let mut g = Graph::<f64>::new();
        let truth_node = g.param(Tensor::new(vec![3], vec![1.0, 3.0, 2.0]).unwrap());
        let s = g.param(Tensor::new(vec![3], vec![0.2, -0.1, 0.4]).unwrap());
        let truth = g.value(truth_node).data().to_vec();
        let l = loss_gc(&mut g, s, &truth, true).unwrap();
        g.backward(l).unwrap();
        assert!(g.grad(truth_node).unwrap().iter().all(|&v| v == 0.0));
        assert!(g.grad(s).unwrap().iter().any(|&v| v != 0.0));
    }

    #[test]
    fn total_loss_examples() {
        let w = LossWeights::default();
        let mut g = Graph::<f64>::new();
        let (a, b, c) = (
            g.constant(Tensor::scalar(0.5)),
            g.constant(Tensor::scalar(0.002)),
            g.constant(Tensor::scalar(0.01)),
        );
        let t = total_loss(&mut g, &w, a, b, c, 20);
        assert!((g.value(t).item() - 2.6).abs() < 1e-12);
        let early = total_loss(&mut g, &w, a, b, c, 0);
        assert!((g.value(early).item() - 2.5).abs() < 1e-12);
        let z = g.constant(Tensor::scalar(0.0));
        let t0 = total_loss(&mut g, &w, z, z, z, 20);
        assert_eq!(g.value(t0).item(), 0.0);
    }

    #[test]
    fn per_patch_combined() {
        let p = PerPatchLoss::new(vec![1.0, 2.0], vec![0.5, 0.25], true);
        assert_eq!(p.combined, vec![1.5, 2.25]);
        let p = PerPatchLoss::new(vec![1.0, 2.0], vec![0.5, 0.25], false);
        assert_eq!(p.combined, vec![1.0, 2.0]);
    }

    #[test]
    fn loss_gradients_pass_finite_differences() {
        use crate::diffcore::{finite_diff_check, FdOptions};
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let a = Tensor::new(vec![2, 5, 3], (0..30).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let b = Tensor::new(vec![2, 5, 3], (0..30).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let r = finite_diff_check(
            |g, v| Ok(loss_rec_p(g, v[0], v[1])?.0),
            &[a.clone(), b.clone()],
            &FdOptions::default(),
        )
        .unwrap();
        assert!(r.max_rel_error <= 1e-3, "{r:?}");

        let fa = Tensor::new(vec![4, 3], (0..12).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let fb = Tensor::new(vec![4, 3], (0..12).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let r = finite_diff_check(|g, v| Ok(loss_rec_f(g, v[0], v[1], &[0, 3])?.0), &[fa, fb], &FdOptions::default())
            .unwrap();
        assert!(r.max_rel_error <= 1e-3, "{r:?}");

        let s = Tensor::new(vec![5], (0..5).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap();
        let truth = [0.3, 0.1, 0.9, 0.1, 0.5];
        let r = finite_diff_check(|g, v| loss_gc(g, v[0], &truth, true), &[s], &FdOptions::default()).unwrap();
        assert!(r.max_rel_error <= 1e-3, "{r:?}");
    }

    proptest! {
        #[test]
        fn chamfer_symmetric_nonnegative(seed in 0u64..10_000, n in 1usize..12, m in 1usize..12) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = random_set(&mut rng, n);
            let b = random_set(&mut rng, m);
            let ab = chamfer_value(&a, &b);
            prop_assert!(ab >= 0.0);
            prop_assert_eq!(ab, chamfer_value(&b, &a));
            // permuting a multiset leaves the distance at zero
            let mut perm = a.clone();
            perm.reverse();
            prop_assert_eq!(chamfer_value(&a, &perm), 0.0);
        }

        #[test]
        fn gc_translation_invariant(seed in 0u64..10_000, n in 2usize..12, c in -50.0f64..50.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let s: Vec<f64> = (0..n).map(|_| rng.random_range(-3.0..3.0)).collect();
            let t: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
            let shifted: Vec<f64> = s.iter().map(|v| v + c).collect();
            prop_assert!((gc_value(&s, &t) - gc_value(&shifted, &t)).abs() <= 1e-9);
        }
    }
}
