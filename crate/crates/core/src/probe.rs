//! Linear evaluation of frozen encoder features.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Split};
use crate::error::{invalid, Result};
use crate::geometry::{patchify, PointCloud};
use crate::model::{infer, Gm3dParams, Layout};
use crate::seeding::{stream_seed, Purpose};

/// Max-pool and mean-pool of the encoder output over all patches, `2d` values.
pub fn extract_feature(params: &Gm3dParams<f32>, layout: &Layout, cloud: &PointCloud, seed: u64) -> Result<Vec<f32>> {
    let cfg = &params.config;
    let ps = patchify(cloud, cfg.n_patches, cfg.patch_size, seed)?;
    let z = infer(params, layout, |net, g| net.encode_full(g, &ps));
    Ok(pool_tokens(z.data(), z.shape()[0], z.shape()[1]))
}

/// `[max over rows, mean over rows]` of an `n x d` row-major matrix.
pub fn pool_tokens(z: &[f32], n: usize, d: usize) -> Vec<f32> {
    let mut max = vec![f32::NEG_INFINITY; d];
    let mut sum = vec![0f64; d];
    for row in z.chunks_exact(d).take(n) {
        for j in 0..d {
            max[j] = max[j].max(row[j]);
            sum[j] += row[j] as f64;
        }
    }
    max.extend(sum.iter().map(|s| (s / n as f64) as f32));
    max
}

/// Features for every sample of `split`, patchified with a fixed per-sample
/// seed and no augmentation.
pub fn dataset_features(
    params: &Gm3dParams<f32>,
    ds: &Dataset,
    split: Split,
    seed: u64,
) -> Result<(Vec<Vec<f32>>, Vec<u32>)> {
    let layout = params.layout();
    let rows: Vec<(usize, &crate::data::Sample)> =
        ds.samples.iter().enumerate().filter(|(_, s)| s.split == split).collect();
    let feats = rows
        .par_iter()
        .map(|(i, s)| {
            let fps_seed = stream_seed(seed, Purpose::Patchify, &[u64::MAX, *i as u64]);
            extract_feature(params, &layout, &s.cloud, fps_seed)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((feats, rows.iter().map(|(_, s)| s.label).collect()))
}

/// Per-dimension standardization fitted on one split.
#[derive(Clone, Debug, PartialEq)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    pub fn fit(x: &[Vec<f32>]) -> Result<Self> {
        let d = x.first().map(|r| r.len()).ok_or_else(|| invalid!("no features to standardize"))?;
        let n = x.len() as f64;
        let mut mean = vec![0.0; d];
        for r in x {
            for (m, &v) in mean.iter_mut().zip(r) {
                *m += v as f64;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; d];
        for r in x {
            for j in 0..d {
                var[j] += (r[j] as f64 - mean[j]).powi(2);
            }
        }
        let std = var
            .into_iter()
            .map(|v| {
                let s = (v / n).sqrt();
                if s > 1e-12 {
                    s
                } else {
                    1.0
                }
            })
            .collect();
        Ok(Standardizer { mean, std })
    }

    pub fn apply(&self, x: &[Vec<f32>]) -> Vec<Vec<f64>> {
        x.iter()
            .map(|r| {
                r.iter()
                    .enumerate()
                    .map(|(j, &v)| (v as f64 - self.mean[j]) / self.std[j])
                    .collect()
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub lr: f64,
    pub l2: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            epochs: 300,
            lr: 0.5,
            l2: 1e-4,
        }
    }
}

/// Multinomial logistic regression weights, one row per class.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearProbe {
    pub weights: Vec<Vec<f64>>,
    pub bias: Vec<f64>,
}

impl LinearProbe {
    pub fn zeros(classes: usize, dim: usize) -> Self {
        LinearProbe {
            weights: vec![vec![0.0; dim]; classes],
            bias: vec![0.0; classes],
        }
    }

    pub fn logits(&self, x: &[f64]) -> Vec<f64> {
        self.weights
            .iter()
            .zip(&self.bias)
            .map(|(w, b)| b + w.iter().zip(x).map(|(a, c)| a * c).sum::<f64>())
            .collect()
    }

    /// Argmax class; ties resolve to the lowest index.
    pub fn predict(&self, x: &[f64]) -> u32 {
        let l = self.logits(x);
        let mut best = 0;
        for (c, &v) in l.iter().enumerate() {
            if v > l[best] {
                best = c;
            }
        }
        best as u32
    }
}

/// Full-batch gradient descent on softmax cross-entropy from a zero start.
pub fn fit_linear_probe(x: &[Vec<f64>], y: &[u32], classes: usize, cfg: &ProbeConfig) -> Result<LinearProbe> {
    if x.len() != y.len() || x.is_empty() {
        return Err(invalid!("{} feature rows for {} labels", x.len(), y.len()));
    }
    let mut seen: Vec<u32> = y.to_vec();
    seen.sort_unstable();
    seen.dedup();
    if seen.len() < 2 {
        return Err(invalid!("linear probe needs at least two classes, found {}", seen.len()));
    }
    if let Some(&bad) = y.iter().find(|&&c| c as usize >= classes) {
        return Err(invalid!("label {bad} outside [0, {classes})"));
    }
    let d = x[0].len();
    let n = x.len() as f64;
    let mut p = LinearProbe::zeros(classes, d);
    for _ in 0..cfg.epochs {
        let mut gw = vec![vec![0.0; d]; classes];
        let mut gb = vec![0.0; classes];
        for (xi, &yi) in x.iter().zip(y) {
            let l = p.logits(xi);
            let m = l.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = l.iter().map(|v| (v - m).exp()).collect();
            let z: f64 = e.iter().sum();
            for c in 0..classes {
                let r = e[c] / z - if c as u32 == yi { 1.0 } else { 0.0 };
                gb[c] += r;
                for (g, &v) in gw[c].iter_mut().zip(xi) {
                    *g += r * v;
                }
            }
        }
        for c in 0..classes {
            p.bias[c] -= cfg.lr * gb[c] / n;
            for j in 0..d {
                p.weights[c][j] -= cfg.lr * (gw[c][j] / n + cfg.l2 * p.weights[c][j]);
            }
        }
    }
    Ok(p)
}

pub fn eval_probe(p: &LinearProbe, x: &[Vec<f64>], y: &[u32]) -> Result<f64> {
    if x.is_empty() {
        return Err(invalid!("empty evaluation set"));
    }
    if x.len() != y.len() {
        return Err(invalid!("{} feature rows for {} labels", x.len(), y.len()));
    }
    let correct = x.iter().zip(y).filter(|(xi, &yi)| p.predict(xi) == yi).count();
    Ok(correct as f64 / x.len() as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeReport {
    pub train_accuracy: f64,
    pub test_accuracy: f64,
    pub n_train: usize,
    pub n_test: usize,
}

/// Extracts features with the frozen encoder, standardizes with train-split
/// statistics, fits on train and scores on test.
pub fn run_probe(params: &Gm3dParams<f32>, ds: &Dataset, cfg: &ProbeConfig, seed: u64) -> Result<ProbeReport> {
    let (ftr, ytr) = dataset_features(params, ds, Split::Train, seed)?;
    let (fte, yte) = dataset_features(params, ds, Split::Test, seed)?;
    let st = Standardizer::fit(&ftr)?;
    let (xtr, xte) = (st.apply(&ftr), st.apply(&fte));
    let probe = fit_linear_probe(&xtr, &ytr, ds.num_classes(), cfg)?;
    Ok(ProbeReport {
        train_accuracy: eval_probe(&probe, &xtr, &ytr)?,
        test_accuracy: eval_probe(&probe, &xte, &yte)?,
        n_train: xtr.len(),
        n_test: xte.len(),
    })
}
