//! Datasets: file ingestion, synthetic shapes, manifests and augmentation.

mod io;
mod synth;

use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use io::{
    format_ply, format_xyz, load_pointcloud, parse_off, parse_ply, parse_xyz, write_ply, write_xyz,
};
pub use synth::{ridge_height, synth_shape, ShapeKind, MIN_POINTS};

use crate::error::{invalid, Error, Result};
use crate::geometry::{unit_sphere_normalize, Point, PointCloud};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    #[default]
    Train,
    Test,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Provenance {
    Synthetic,
    Files,
    Mixed,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// Unit-sphere normalized.
    pub cloud: PointCloud,
    pub label: u32,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub class_names: Vec<String>,
    pub provenance: Provenance,
}

/// Balanced synthetic dataset: every shape kind appears `train_per_class`
/// times in the train split and `test_per_class` times in the test split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub n_points: usize,
    pub jitter: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            train_per_class: 200,
            test_per_class: 50,
            n_points: 128,
            jitter: 0.01,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", deny_unknown_fields)]
pub enum DatasetSpec {
    Synthetic(SyntheticSpec),
    Manifest(PathBuf),
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec::Synthetic(SyntheticSpec::default())
    }
}

impl DatasetSpec {
    pub fn load(&self) -> Result<Dataset> {
        match self {
            DatasetSpec::Synthetic(s) => Dataset::synthetic(s),
            DatasetSpec::Manifest(p) => Dataset::from_manifest(p),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthEntry {
    pub kind: ShapeKind,
    pub n_points: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_jitter")]
    pub jitter: f64,
}

fn default_jitter() -> f64 {
    0.01
}

/// One manifest row. Exactly one of `path` and `synthetic` must be set;
/// relative paths resolve against the manifest's directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synthetic: Option<SynthEntry>,
    pub label: u32,
    #[serde(default)]
    pub split: Split,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub class_names: Vec<String>,
    pub entries: Vec<ManifestEntry>,
}

impl Dataset {
    pub fn synthetic(spec: &SyntheticSpec) -> Result<Self> {
        let mut samples = Vec::with_capacity(4 * (spec.train_per_class + spec.test_per_class));
        for (split, count, tag) in [
            (Split::Train, spec.train_per_class, 0u64),
            (Split::Test, spec.test_per_class, 1u64),
        ] {
            for i in 0..count {
                for kind in ShapeKind::ALL {
                    let seed = crate::seeding::stream_seed(
                        spec.seed,
                        crate::seeding::Purpose::Synth,
                        &[tag, i as u64],
                    );
                    let cloud = synth_shape(kind, spec.n_points, seed, spec.jitter)?;
                    samples.push(Sample {
                        cloud: unit_sphere_normalize(&cloud),
                        label: kind.label(),
                        split,
                    });
                }
            }
        }
        Dataset::new(
            samples,
            ShapeKind::ALL.iter().map(|k| k.name().to_string()).collect(),
            Provenance::Synthetic,
        )
    }

    /// Validates labels against `class_names`.
    pub fn new(samples: Vec<Sample>, class_names: Vec<String>, provenance: Provenance) -> Result<Self> {
        if let Some(s) = samples.iter().find(|s| s.label as usize >= class_names.len()) {
            return Err(invalid!("label {} outside [0, {})", s.label, class_names.len()));
        }
        Ok(Dataset {
            samples,
            class_names,
            provenance,
        })
    }

    pub fn from_manifest(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let manifest: Manifest =
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Dataset::from_manifest_value(&manifest, base)
    }

    pub fn from_manifest_value(manifest: &Manifest, base: &Path) -> Result<Self> {
        if manifest.entries.is_empty() {
            return Err(Error::Config("manifest has no entries".into()));
        }
        let (mut files, mut synth) = (false, false);
        let mut samples = Vec::with_capacity(manifest.entries.len());
        for (i, e) in manifest.entries.iter().enumerate() {
            let cloud = match (&e.path, &e.synthetic) {
                (Some(p), None) => {
                    files = true;
                    load_pointcloud(&base.join(p))?
                }
                (None, Some(s)) => {
                    synth = true;
                    synth_shape(s.kind, s.n_points, s.seed, s.jitter)?
                }
                _ => {
                    return Err(Error::Config(format!(
                        "manifest entry {i} must set exactly one of `path` and `synthetic`"
                    )))
                }
            };
            samples.push(Sample {
                cloud: unit_sphere_normalize(&cloud),
                label: e.label,
                split: e.split,
            });
        }
        let class_names = if manifest.class_names.is_empty() {
            let n = samples.iter().map(|s| s.label).max().unwrap_or(0) + 1;
            (0..n).map(|c| format!("class{c}")).collect()
        } else {
            manifest.class_names.clone()
        };
        let provenance = match (files, synth) {
            (true, true) => Provenance::Mixed,
            (true, false) => Provenance::Files,
            _ => Provenance::Synthetic,
        };
        Dataset::new(samples, class_names, provenance)
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn split(&self, split: Split) -> Vec<&Sample> {
        self.samples.iter().filter(|s| s.split == split).collect()
    }

    pub fn count(&self, split: Split) -> usize {
        self.samples.iter().filter(|s| s.split == split).count()
    }
}

/// `s * p + t` for every point.
pub fn apply_affine(cloud: &PointCloud, scale: f32, shift: Point) -> PointCloud {
    PointCloud {
        points: cloud
            .points
            .iter()
            .map(|p| [0, 1, 2].map(|i| scale * p[i] + shift[i]))
            .collect(),
        label: cloud.label,
    }
}

pub const SCALE_RANGE: (f32, f32) = (0.8, 1.2);
pub const SHIFT_RANGE: f32 = 0.1;

/// Random scaling in `[0.8, 1.2]` and translation in `[-0.1, 0.1]^3`.
pub fn augment<R: Rng + ?Sized>(cloud: &PointCloud, rng: &mut R) -> PointCloud {
    let s = rng.random_range(SCALE_RANGE.0..=SCALE_RANGE.1);
    let t = [0; 3].map(|_: i32| rng.random_range(-SHIFT_RANGE..=SHIFT_RANGE));
    apply_affine(cloud, s, t)
}
