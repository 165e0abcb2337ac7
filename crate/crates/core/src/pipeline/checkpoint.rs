//! Binary checkpoint container.
//!
//! Layout: `b"GM3D"`, u32 format version, u64 header length, JSON header,
//! then five blocks of little-endian f32 in canonical parameter order:
//! student, teacher, knowledge teacher, Adam first moment, Adam second moment.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::TrainConfig;
use super::optim::AdamState;
use super::step::{Mode, TrainState};
use crate::diffcore::Tensor;
use crate::error::{Error, Result};
use crate::model::{Gm3dParams, Layout, ModelConfig};
use crate::seeding::{stream_seed, Purpose};

pub const MAGIC: &[u8; 4] = b"GM3D";
pub const FORMAT_VERSION: u32 = 1;
const BLOCKS: [&str; 5] = ["student", "teacher", "knowledge_teacher", "adam_m", "adam_v"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    model: ModelConfig,
    mode: String,
    epoch: usize,
    step: u64,
    adam_t: u64,
    rng_digest: String,
    blocks: Vec<String>,
    params: Vec<ParamEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    train_config: Option<TrainConfig>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub state: TrainState,
    /// Digest of the data-order stream for the next epoch.
    pub rng_digest: String,
    pub train_config: Option<TrainConfig>,
}

/// Identifies the shuffle stream the next epoch will draw from.
pub fn rng_digest(seed: u64, epoch: usize) -> String {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update((epoch as u64).to_le_bytes());
    h.update(stream_seed(seed, Purpose::Shuffle, &[epoch as u64]).to_le_bytes());
    hex::encode(h.finalize())
}

fn manifest(layout: &Layout) -> Vec<ParamEntry> {
    layout
        .specs
        .iter()
        .map(|s| ParamEntry {
            name: s.name.clone(),
            shape: s.shape.clone(),
        })
        .collect()
}

pub fn encode_checkpoint(state: &TrainState, cfg: Option<&TrainConfig>) -> Result<Vec<u8>> {
    let layout = state.student.layout();
    for p in [&state.student, &state.teacher, &state.knowledge_teacher] {
        p.check_layout()?;
    }
    let seed = cfg.map_or(0, |c| c.seed);
    let header = Header {
        model: state.student.config.clone(),
        mode: state.mode.name().into(),
        epoch: state.epoch,
        step: state.step,
        adam_t: state.adam.t,
        rng_digest: rng_digest(seed, state.epoch),
        blocks: BLOCKS.iter().map(|b| b.to_string()).collect(),
        params: manifest(&layout),
        train_config: cfg.cloned(),
    };
    let json = serde_json::to_vec(&header).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let n = state.student.num_elements();
    let mut out = Vec::with_capacity(16 + json.len() + 5 * 4 * n);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    let blocks: [&[Tensor<f32>]; 5] = [
        &state.student.tensors,
        &state.teacher.tensors,
        &state.knowledge_teacher.tensors,
        &state.adam.m,
        &state.adam.v,
    ];
    for tensors in blocks {
        for t in tensors {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    Ok(out)
}

/// Compares the stored manifest with `layout`, naming the first parameter
/// that differs.
fn check_manifest(stored: &[ParamEntry], layout: &Layout) -> Result<()> {
    for (i, spec) in layout.specs.iter().enumerate() {
        match stored.get(i) {
            Some(e) if e.name == spec.name && e.shape == spec.shape => {}
            Some(e) => {
                return Err(Error::ShapeMismatch {
                    name: spec.name.clone(),
                    expected: spec.shape.clone(),
                    found: if e.name == spec.name { e.shape.clone() } else { Vec::new() },
                })
            }
            None => {
                return Err(Error::ShapeMismatch {
                    name: spec.name.clone(),
                    expected: spec.shape.clone(),
                    found: Vec::new(),
                })
            }
        }
    }
    if let Some(extra) = stored.get(layout.specs.len()) {
        return Err(Error::ShapeMismatch {
            name: extra.name.clone(),
            expected: Vec::new(),
            found: extra.shape.clone(),
        });
    }
    Ok(())
}

/// Decodes a checkpoint. With `expected` set, the stored parameters must
/// match the layout of that model config.
pub fn decode_checkpoint(bytes: &[u8], expected: Option<&ModelConfig>) -> Result<Checkpoint> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(Error::VersionMismatch("missing GM3D magic bytes".into()));
    }
    if bytes.len() < 16 {
        return Err(Error::Truncated(format!("{} byte file has no complete preamble", bytes.len())));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(Error::VersionMismatch(format!(
            "format version {version}, expected {FORMAT_VERSION}"
        )));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let body = &bytes[16..];
    if body.len() < hlen {
        return Err(Error::Truncated(format!("header needs {hlen} bytes, {} present", body.len())));
    }
    let header: Header = serde_json::from_slice(&body[..hlen])
        .map_err(|e| Error::InvalidArgument(format!("checkpoint header: {e}")))?;
    let mode = Mode::parse(&header.mode)
        .ok_or_else(|| Error::InvalidArgument(format!("unknown checkpoint mode `{}`", header.mode)))?;
    let own_layout = Layout::new(&header.model);
    check_manifest(&header.params, &own_layout)?;
    if let Some(cfg) = expected {
        check_manifest(&header.params, &Layout::new(cfg))?;
    }

    let n: usize = header.params.iter().map(|p| p.shape.iter().product::<usize>()).sum();
    let data = &body[hlen..];
    let need = BLOCKS.len() * n * 4;
    if data.len() < need {
        return Err(Error::Truncated(format!("parameter data needs {need} bytes, {} present", data.len())));
    }
    if data.len() > need {
        return Err(Error::InvalidArgument(format!("{} trailing bytes after parameter data", data.len() - need)));
    }
    let mut floats = data
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()));
    let mut read_block = || -> Vec<Tensor<f32>> {
        header
            .params
            .iter()
            .map(|p| {
                let len = p.shape.iter().product();
                let vals: Vec<f32> = floats.by_ref().take(len).collect();
                Tensor::new(p.shape.clone(), vals).expect("manifest shape")
            })
            .collect()
    };
    let tree = |tensors| Gm3dParams {
        config: header.model.clone(),
        tensors,
    };
    let student = tree(read_block());
    let teacher = tree(read_block());
    let knowledge_teacher = tree(read_block());
    let m = read_block();
    let v = read_block();
    let state = TrainState {
        mode,
        student,
        teacher,
        knowledge_teacher,
        adam: AdamState { m, v, t: header.adam_t },
        epoch: header.epoch,
        step: header.step,
    };
    Ok(Checkpoint {
        state,
        rng_digest: header.rng_digest,
        train_config: header.train_config,
    })
}

pub fn save_checkpoint(path: &Path, state: &TrainState, cfg: Option<&TrainConfig>) -> Result<()> {
    let bytes = encode_checkpoint(state, cfg)?;
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, &bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path, expected: Option<&ModelConfig>) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes, expected)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg() -> TrainConfig {
        TrainConfig {
            model: ModelConfig {
                embed_dim: 8,
                encoder_depth: 1,
                decoder_depth: 1,
                heads: 2,
                mlp_ratio: 2,
                patch_size: 4,
                n_patches: 8,
                mask_ratio: 0.5,
                ..Default::default()
            },
            ..Default::default()
        }
    }

    fn state() -> TrainState {
        let cfg = small_cfg();
        let kt = Gm3dParams::init(&cfg.model, 99).unwrap();
        let mut s = TrainState::new(Mode::Gm3d, &cfg, Some(kt)).unwrap();
        s.adam.m[0].data_mut()[0] = 0.25;
        s.adam.v[1].data_mut()[0] = 1e-9;
        s.adam.t = 7;
        s.epoch = 3;
        s.step = 42;
        s
    }

    #[test]
    fn round_trip_is_bitwise() {
        let s = state();
        let bytes = encode_checkpoint(&s, Some(&small_cfg())).unwrap();
        let c = decode_checkpoint(&bytes, Some(&s.student.config)).unwrap();
        assert_eq!(c.state, s);
        assert_eq!(c.train_config.unwrap(), small_cfg());
        assert_eq!(c.rng_digest, rng_digest(0, 3));
        assert_eq!(encode_checkpoint(&c.state, Some(&small_cfg())).unwrap(), bytes);
    }

    #[test]
    fn corrupted_magic_is_version_mismatch() {
        let mut bytes = encode_checkpoint(&state(), None).unwrap();
        bytes[0] = b'X';
        assert!(matches!(decode_checkpoint(&bytes, None), Err(Error::VersionMismatch(_))));
        let mut bytes = encode_checkpoint(&state(), None).unwrap();
        bytes[4] = 9;
        assert!(matches!(decode_checkpoint(&bytes, None), Err(Error::VersionMismatch(_))));
    }

    #[test]
    fn truncation_detected_everywhere() {
        let bytes = encode_checkpoint(&state(), None).unwrap();
        for cut in [10, 40, bytes.len() - 1, bytes.len() - 1000] {
            assert!(
                matches!(decode_checkpoint(&bytes[..cut], None), Err(Error::Truncated(_))),
                "cut at {cut}"
            );
        }
        let mut long = bytes.clone();
        long.push(0);
        assert!(decode_checkpoint(&long, None).is_err());
    }

    #[test]
    fn wrong_model_config_names_parameter() {
        let bytes = encode_checkpoint(&state(), None).unwrap();
        let other = ModelConfig {
            patch_size: 8,
            ..small_cfg().model
        };
        match decode_checkpoint(&bytes, Some(&other)) {
            Err(Error::ShapeMismatch { name, expected, found }) => {
                assert_eq!(name, "recon_head.weight");
                assert_eq!(expected, vec![8, 24]);
                assert_eq!(found, vec![8, 12]);
            }
            other => panic!("{other:?}"),
        }
        let deeper = ModelConfig {
            encoder_depth: 2,
            ..small_cfg().model
        };
        assert!(matches!(decode_checkpoint(&bytes, Some(&deeper)), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.gm3d");
        save_checkpoint(&p, &state(), None).unwrap();
        assert_eq!(load_checkpoint(&p, None).unwrap().state, state());
        assert!(matches!(load_checkpoint(&dir.path().join("nope"), None), Err(Error::Io { .. })));
    }
}
