//! Mask partitions: uniform random masking and the teacher-guided
//! easy-to-hard curriculum.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskPartition {
    /// Ascending.
    pub visible: Vec<usize>,
    /// Ascending.
    pub masked: Vec<usize>,
    pub n: usize,
}

impl MaskPartition {
    fn from_masked(n: usize, mut masked: Vec<usize>) -> Self {
        masked.sort_unstable();
        let mut is_masked = vec![false; n];
        for &m in &masked {
            is_masked[m] = true;
        }
        let visible = (0..n).filter(|&i| !is_masked[i]).collect();
        MaskPartition { visible, masked, n }
    }

    pub fn n_masked(&self) -> usize {
        self.masked.len()
    }

    /// Visible indices followed by masked indices: the token order used by
    /// the decoder.
    pub fn token_order(&self) -> Vec<usize> {
        self.visible.iter().chain(&self.masked).copied().collect()
    }

    pub fn is_valid(&self) -> bool {
        let mut seen = vec![false; self.n];
        for &i in self.visible.iter().chain(&self.masked) {
            if i >= self.n || seen[i] {
                return false;
            }
            seen[i] = true;
        }
        seen.iter().all(|&s| s)
            && self.visible.windows(2).all(|w| w[0] < w[1])
            && self.masked.windows(2).all(|w| w[0] < w[1])
    }
}

/// Number of masked patches: `round(ratio * n)`.
pub fn n_masked(n: usize, ratio: f64) -> usize {
    ((ratio * n as f64).round() as usize).min(n)
}

fn check_ratio(ratio: f64) -> Result<()> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(invalid!("mask ratio {ratio} must lie in (0, 1)"));
    }
    Ok(())
}

/// Draws `count` indices uniformly without replacement from `pool`.
fn sample_from<R: Rng + ?Sized>(pool: &[usize], count: usize, rng: &mut R) -> Vec<usize> {
    rand::seq::index::sample(rng, pool.len(), count)
        .into_iter()
        .map(|i| pool[i])
        .collect()
}

pub fn random_mask<R: Rng + ?Sized>(n: usize, ratio: f64, rng: &mut R) -> Result<MaskPartition> {
    check_ratio(ratio)?;
    let all: Vec<usize> = (0..n).collect();
    let masked = sample_from(&all, n_masked(n, ratio), rng);
    Ok(MaskPartition::from_masked(n, masked))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CurriculumSchedule {
    pub e_max: usize,
    /// Largest fraction of the masked patches chosen by teacher score.
    pub max_ratio: f64,
}

impl Default for CurriculumSchedule {
    fn default() -> Self {
        CurriculumSchedule {
            e_max: 60,
            max_ratio: 0.5,
        }
    }
}

impl CurriculumSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.e_max < 1 {
            return Err(invalid!("curriculum e_max must be >= 1"));
        }
        if !(0.0..=1.0).contains(&self.max_ratio) {
            return Err(invalid!("curriculum max_ratio {} outside [0, 1]", self.max_ratio));
        }
        Ok(())
    }
}

/// `floor(epoch / e_max * A * n_masked)`, clamped to `[0, n_masked]`.
pub fn n_sel(epoch: usize, schedule: &CurriculumSchedule, n_masked: usize) -> usize {
    let e = epoch.min(schedule.e_max) as f64;
    let x = e * schedule.max_ratio * n_masked as f64 / schedule.e_max as f64;
    // Absorb rounding from products such as 0.7 * 10 = 6.999...
    let nudged = x + 1e-9 * x.max(1.0);
    (nudged.floor().max(0.0) as usize).min(n_masked)
}

/// Masks the `n_sel` highest-scoring patches plus `n_masked - n_sel` drawn
/// uniformly from the rest. Score ties go to the lower index.
pub fn gc_guided_mask<R: Rng + ?Sized>(
    scores: &[f32],
    n_masked: usize,
    n_sel: usize,
    rng: &mut R,
) -> Result<MaskPartition> {
    let n = scores.len();
    if n_sel > n_masked {
        return Err(invalid!("n_sel {n_sel} exceeds n_masked {n_masked}"));
    }
    if n_masked > n {
        return Err(invalid!("n_masked {n_masked} exceeds patch count {n}"));
    }
    if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
        return Err(invalid!("teacher score {i} is not finite"));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut masked: Vec<usize> = order[..n_sel].to_vec();
    let mut rest: Vec<usize> = order[n_sel..].to_vec();
    rest.sort_unstable();
    masked.extend(sample_from(&rest, n_masked - n_sel, rng));
    Ok(MaskPartition::from_masked(n, masked))
}
