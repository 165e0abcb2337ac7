//! Procedural shapes with area-uniform surface sampling.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::geometry::{Point, PointCloud};
use crate::seeding::{stream_rng, Purpose};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ShapeKind {
    Sphere,
    Cube,
    Torus,
    RidgedPlane,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 4] = [
        ShapeKind::Sphere,
        ShapeKind::Cube,
        ShapeKind::Torus,
        ShapeKind::RidgedPlane,
    ];

    pub fn label(self) -> u32 {
        self as u32
    }

    pub fn name(self) -> &'static str {
        match self {
            ShapeKind::Sphere => "sphere",
            ShapeKind::Cube => "cube",
            ShapeKind::Torus => "torus",
            ShapeKind::RidgedPlane => "ridged-plane",
        }
    }
}

impl fmt::Display for ShapeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ShapeKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ShapeKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| invalid!("unknown shape `{s}` (expected sphere, cube, torus or ridged-plane)"))
    }
}

pub const MIN_POINTS: usize = 8;
pub const TORUS_MAJOR: f64 = 1.0;
pub const TORUS_MINOR: f64 = 0.35;
/// Half-width and height of the tent ridge running along y on the plane.
pub const RIDGE_HALF_WIDTH: f64 = 0.15;
pub const RIDGE_HEIGHT: f64 = 0.5;

fn unit_normal<R: Rng>(rng: &mut R) -> [f64; 3] {
    loop {
        let v: [f64; 3] = [0; 3].map(|_: i32| StandardNormal.sample(rng));
        let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        if n > 1e-12 {
            return v.map(|c| c / n);
        }
    }
}

/// Antipodal pairs keep the centroid at the origin.
fn sphere<R: Rng>(n: usize, rng: &mut R) -> Vec<[f64; 3]> {
    let mut out = Vec::with_capacity(n);
    while out.len() + 1 < n {
        let v = unit_normal(rng);
        out.push(v);
        out.push(v.map(|c| -c));
    }
    if out.len() < n {
        out.push(unit_normal(rng));
    }
    out
}

/// Surface of `[-1, 1]^3`; faces have equal area.
fn cube<R: Rng>(n: usize, rng: &mut R) -> Vec<[f64; 3]> {
    (0..n)
        .map(|_| {
            let face = rng.random_range(0..6usize);
            let axis = face / 2;
            let sign = if face % 2 == 0 { 1.0 } else { -1.0 };
            let mut p = [0.0; 3];
            for (i, c) in p.iter_mut().enumerate() {
                *c = if i == axis { sign } else { rng.random_range(-1.0..1.0) };
            }
            p
        })
        .collect()
}

/// Accepts `(theta, phi)` with probability proportional to the area element.
fn torus<R: Rng>(n: usize, rng: &mut R) -> Vec<[f64; 3]> {
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let theta = rng.random_range(0.0..2.0 * PI);
        let phi = rng.random_range(0.0..2.0 * PI);
        let w = (TORUS_MAJOR + TORUS_MINOR * phi.cos()) / (TORUS_MAJOR + TORUS_MINOR);
        if rng.random::<f64>() < w {
            let rho = TORUS_MAJOR + TORUS_MINOR * phi.cos();
            out.push([rho * theta.cos(), rho * theta.sin(), TORUS_MINOR * phi.sin()]);
        }
    }
    out
}

pub fn ridge_height(x: f64) -> f64 {
    RIDGE_HEIGHT * (1.0 - x.abs() / RIDGE_HALF_WIDTH).max(0.0)
}

/// Flat square `[-1, 1]^2` with a tent ridge along the y axis.
fn ridged_plane<R: Rng>(n: usize, rng: &mut R) -> Vec<[f64; 3]> {
    let slope = RIDGE_HEIGHT / RIDGE_HALF_WIDTH;
    let stretch = (1.0 + slope * slope).sqrt();
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let x: f64 = rng.random_range(-1.0..1.0);
        let y: f64 = rng.random_range(-1.0..1.0);
        let w = if x.abs() < RIDGE_HALF_WIDTH { 1.0 } else { 1.0 / stretch };
        if rng.random::<f64>() < w {
            out.push([x, y, ridge_height(x)]);
        }
    }
    out
}

/// Samples `n_points` from the surface of `kind` and adds Gaussian jitter.
/// Output is deterministic in `(kind, n_points, seed, jitter)` and labeled
/// with the kind index.
pub fn synth_shape(kind: ShapeKind, n_points: usize, seed: u64, jitter: f64) -> Result<PointCloud> {
    if n_points < MIN_POINTS {
        return Err(invalid!("synthetic shapes need at least {MIN_POINTS} points, got {n_points}"));
    }
    if !(jitter >= 0.0 && jitter.is_finite()) {
        return Err(invalid!("jitter must be finite and >= 0, got {jitter}"));
    }
    let mut rng = stream_rng(seed, Purpose::Synth, &[kind.label() as u64, n_points as u64]);
    let raw = match kind {
        ShapeKind::Sphere => sphere(n_points, &mut rng),
        ShapeKind::Cube => cube(n_points, &mut rng),
        ShapeKind::Torus => torus(n_points, &mut rng),
        ShapeKind::RidgedPlane => ridged_plane(n_points, &mut rng),
    };
    let noise = Normal::new(0.0, jitter).map_err(|e| invalid!("jitter: {e}"))?;
    let points: Vec<Point> = raw
        .into_iter()
        .map(|p| {
            p.map(|c| {
                let c = if jitter > 0.0 { c + noise.sample(&mut rng) } else { c };
                c as f32
            })
        })
        .collect();
    PointCloud::labeled(points, Some(kind.label()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::unit_sphere_normalize;

    #[test]
    fn sphere_normalizes_to_unit_norm() {
        let c = unit_sphere_normalize(&synth_shape(ShapeKind::Sphere, 128, 3, 0.0).unwrap());
        for p in &c.points {
            let r = (p.iter().map(|&v| (v as f64).powi(2)).sum::<f64>()).sqrt();
            assert!((r - 1.0).abs() <= 1e-6, "{r}");
        }
        assert_eq!(c.label, Some(0));
    }

    #[test]
    fn deterministic_and_seed_sensitive() {
        for k in ShapeKind::ALL {
            let a = synth_shape(k, 64, 11, 0.01).unwrap();
            assert_eq!(a, synth_shape(k, 64, 11, 0.01).unwrap());
            assert_ne!(a, synth_shape(k, 64, 12, 0.01).unwrap());
            assert_eq!(a.len(), 64);
            assert_eq!(a.label, Some(k.label()));
        }
    }

    #[test]
    fn cube_faces_are_balanced() {
        let n = 600;
        let c = synth_shape(ShapeKind::Cube, n, 5, 0.0).unwrap();
        let mut counts = [0usize; 6];
        for p in &c.points {
            let faces: Vec<usize> = (0..3)
                .flat_map(|a| [(p[a] == 1.0, 2 * a), (p[a] == -1.0, 2 * a + 1)])
                .filter_map(|(hit, f)| hit.then_some(f))
                .collect();
            assert_eq!(faces.len(), 1);
            counts[faces[0]] += 1;
        }
        let mean = n as f64 / 6.0;
        let sd = (n as f64 * (1.0 / 6.0) * (5.0 / 6.0)).sqrt();
        for c in counts {
            assert!((c as f64 - mean).abs() <= 3.0 * sd, "{counts:?}");
        }
    }

    #[test]
    fn torus_and_ridge_lie_on_their_surfaces() {
        let t = synth_shape(ShapeKind::Torus, 500, 1, 0.0).unwrap();
        for p in &t.points {
            let (x, y, z) = (p[0] as f64, p[1] as f64, p[2] as f64);
            let q = ((x * x + y * y).sqrt() - TORUS_MAJOR).powi(2) + z * z;
            assert!((q.sqrt() - TORUS_MINOR).abs() < 1e-5);
        }
        let r = synth_shape(ShapeKind::RidgedPlane, 2000, 1, 0.0).unwrap();
        let on_ridge = r.points.iter().filter(|p| (p[0] as f64).abs() < RIDGE_HALF_WIDTH).count();
        for p in &r.points {
            assert!((p[2] as f64 - ridge_height(p[0] as f64)).abs() < 1e-6);
        }
        // ridge share of surface area: 0.3 * stretch / (0.3 * stretch + 1.7)
        let stretch = (1.0 + (RIDGE_HEIGHT / RIDGE_HALF_WIDTH).powi(2)).sqrt();
        let share = 0.3 * stretch / (0.3 * stretch + 1.7);
        let got = on_ridge as f64 / 2000.0;
        let sd = (share * (1.0 - share) / 2000.0).sqrt();
        assert!((got - share).abs() < 4.0 * sd, "{got} vs {share}");
    }

    #[test]
    fn torus_inner_ring_is_sparser() {
        let t = synth_shape(ShapeKind::Torus, 4000, 2, 0.0).unwrap();
        let outer = t
            .points
            .iter()
            .filter(|p| ((p[0] * p[0] + p[1] * p[1]).sqrt() as f64) > TORUS_MAJOR)
            .count() as f64;
        // E[outer] = (pi R + 2r) / (2 pi R)
        let want = (PI * TORUS_MAJOR + 2.0 * TORUS_MINOR) / (2.0 * PI * TORUS_MAJOR);
        let sd = (want * (1.0 - want) / 4000.0).sqrt();
        assert!((outer / 4000.0 - want).abs() < 4.0 * sd);
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(synth_shape(ShapeKind::Sphere, 7, 0, 0.0).is_err());
        assert!(synth_shape(ShapeKind::Sphere, 8, 0, -1.0).is_err());
        assert_eq!("ridged-plane".parse::<ShapeKind>().unwrap(), ShapeKind::RidgedPlane);
        assert!("cone".parse::<ShapeKind>().is_err());
    }
}
