//! Sampling, grouping and normalization of point clouds.
//!
//! All distances are compared in squared form. Ties are always broken
//! towards the lowest point index so that results are bit-stable.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid, Result};

pub type Point = [f32; 3];

#[derive(Clone, Debug, PartialEq)]
pub struct PointCloud {
    pub points: Vec<Point>,
    pub label: Option<u32>,
}

impl PointCloud {
    pub fn new(points: Vec<Point>) -> Result<Self> {
        Self::labeled(points, None)
    }

    pub fn labeled(points: Vec<Point>, label: Option<u32>) -> Result<Self> {
        if points.is_empty() {
            return Err(invalid!("point cloud must contain at least one point"));
        }
        if let Some(i) = points.iter().position(|p| p.iter().any(|c| !c.is_finite())) {
            return Err(invalid!("point {i} has a non-finite coordinate"));
        }
        Ok(PointCloud { points, label })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

#[inline]
pub fn sq_dist(a: &Point, b: &Point) -> f32 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

/// Patchified cloud: `n` patches of `k` points, each patch led by its center.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchSet {
    pub centers: Vec<Point>,
    /// Row-major `n * k` points; patch `i` occupies `[i*k, (i+1)*k)`.
    pub patches: Vec<Point>,
    pub center_indices: Vec<usize>,
    pub k: usize,
}

impl PatchSet {
    pub fn n(&self) -> usize {
        self.centers.len()
    }

    pub fn patch(&self, i: usize) -> &[Point] {
        &self.patches[i * self.k..(i + 1) * self.k]
    }
}

/// Farthest point sampling with a seeded random first center.
pub fn fps(cloud: &PointCloud, n_centers: usize, seed: u64) -> Result<Vec<usize>> {
    if cloud.is_empty() {
        return Err(invalid!("fps on empty cloud"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let first = rng.random_range(0..cloud.len());
    fps_from(cloud, n_centers, first)
}

/// Farthest point sampling starting from a given index.
pub fn fps_from(cloud: &PointCloud, n_centers: usize, first: usize) -> Result<Vec<usize>> {
    let np = cloud.len();
    if n_centers == 0 || n_centers > np {
        return Err(invalid!("fps: n_centers {n_centers} must be in 1..={np}"));
    }
    if first >= np {
        return Err(invalid!("fps: first index {first} out of range {np}"));
    }
    let pts = &cloud.points;
    let mut chosen = Vec::with_capacity(n_centers);
    let mut taken = vec![false; np];
    let mut min_d = vec![f32::INFINITY; np];
    let mut cur = first;
    loop {
        chosen.push(cur);
        taken[cur] = true;
        if chosen.len() == n_centers {
            break;
        }
        let c = pts[cur];
        let mut best = usize::MAX;
        let mut best_d = f32::NEG_INFINITY;
        for (i, p) in pts.iter().enumerate() {
            let d = sq_dist(p, &c);
            if d < min_d[i] {
                min_d[i] = d;
            }
            if !taken[i] && min_d[i] > best_d {
                best_d = min_d[i];
                best = i;
            }
        }
        cur = best;
    }
    Ok(chosen)
}

/// K nearest neighbours of one center: the center first, then the rest by
/// (squared distance, index).
fn knn_of(points: &[Point], center: usize, k: usize) -> Vec<usize> {
    let c = points[center];
    let mut order: Vec<(f32, usize)> = points
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != center)
        .map(|(i, p)| (sq_dist(p, &c), i))
        .collect();
    order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    std::iter::once(center)
        .chain(order.into_iter().take(k - 1).map(|(_, i)| i))
        .collect()
}

/// Groups the `k` nearest points around each center (absolute coordinates).
pub fn knn_group(cloud: &PointCloud, center_indices: &[usize], k: usize) -> Result<PatchSet> {
    let np = cloud.len();
    if k == 0 || k > np {
        return Err(invalid!("knn_group: K {k} must be in 1..={np}"));
    }
    if let Some(&bad) = center_indices.iter().find(|&&i| i >= np) {
        return Err(invalid!("knn_group: center index {bad} out of range {np}"));
    }
    let mut patches = Vec::with_capacity(center_indices.len() * k);
    for &c in center_indices {
        patches.extend(knn_of(&cloud.points, c, k).into_iter().map(|i| cloud.points[i]));
    }
    Ok(PatchSet {
        centers: center_indices.iter().map(|&i| cloud.points[i]).collect(),
        patches,
        center_indices: center_indices.to_vec(),
        k,
    })
}

/// Indices of the members of each patch, in patch order.
pub fn knn_indices(cloud: &PointCloud, center_indices: &[usize], k: usize) -> Vec<Vec<usize>> {
    center_indices
        .iter()
        .map(|&c| knn_of(&cloud.points, c, k))
        .collect()
}

/// Subtracts each patch's own center from its points. Apply exactly once.
pub fn normalize_patches(ps: &PatchSet) -> PatchSet {
    let mut out = ps.clone();
    for (i, c) in ps.centers.iter().enumerate() {
        for p in &mut out.patches[i * ps.k..(i + 1) * ps.k] {
            for d in 0..3 {
                p[d] -= c[d];
            }
        }
    }
    out
}

/// Centers the cloud on its centroid and scales it into the unit ball.
pub fn unit_sphere_normalize(cloud: &PointCloud) -> PointCloud {
    let n = cloud.len() as f64;
    let mut centroid = [0f64; 3];
    for p in &cloud.points {
        for d in 0..3 {
            centroid[d] += p[d] as f64;
        }
    }
    let centroid = centroid.map(|c| c / n);
    let centered: Vec<[f64; 3]> = cloud
        .points
        .iter()
        .map(|p| [0, 1, 2].map(|d| p[d] as f64 - centroid[d]))
        .collect();
    let max_norm = centered
        .iter()
        .map(|p| (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt())
        .fold(0.0, f64::max)
        .max(1e-12);
    PointCloud {
        points: centered
            .iter()
            .map(|p| p.map(|c| (c / max_norm) as f32))
            .collect(),
        label: cloud.label,
    }
}

/// FPS + KNN + center-relative normalization.
pub fn patchify(cloud: &PointCloud, n_centers: usize, k: usize, seed: u64) -> Result<PatchSet> {
    let centers = fps(cloud, n_centers, seed)?;
    let ps = knn_group(cloud, &centers, k)?;
    Ok(normalize_patches(&ps))
}
