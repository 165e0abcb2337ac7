use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use super::config::ModelConfig;
use crate::diffcore::{Scalar, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    Weight,
    Bias,
    NormGain,
    NormBias,
    Token,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub kind: ParamKind,
}

impl ParamSpec {
    /// Decoupled weight decay applies to matrices only.
    pub fn decays(&self) -> bool {
        self.kind == ParamKind::Weight
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub w: usize,
    pub b: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct Norm {
    pub gain: usize,
    pub bias: usize,
}

/// Two linear layers with a GELU in between.
#[derive(Clone, Copy, Debug)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

#[derive(Clone, Copy, Debug)]
pub struct Block {
    pub norm1: Norm,
    pub qkv: Linear,
    pub proj: Linear,
    pub norm2: Norm,
    pub mlp: Mlp,
}

/// Canonical ordering of every parameter tensor, with typed handles into it.
#[derive(Clone, Debug)]
pub struct Layout {
    pub specs: Vec<ParamSpec>,
    pub embed: Mlp,
    pub enc_pos: Mlp,
    pub encoder: Vec<Block>,
    pub dec_pos: Mlp,
    pub decoder: Vec<Block>,
    pub mask_token: usize,
    pub gc_head: Mlp,
    pub recon: Linear,
}

struct Builder {
    specs: Vec<ParamSpec>,
}

impl Builder {
    fn add(&mut self, name: String, shape: Vec<usize>, kind: ParamKind) -> usize {
        self.specs.push(ParamSpec { name, shape, kind });
        self.specs.len() - 1
    }

    fn linear(&mut self, name: &str, i: usize, o: usize) -> Linear {
        Linear {
            w: self.add(format!("{name}.weight"), vec![i, o], ParamKind::Weight),
            b: self.add(format!("{name}.bias"), vec![o], ParamKind::Bias),
        }
    }

    fn norm(&mut self, name: &str, d: usize) -> Norm {
        Norm {
            gain: self.add(format!("{name}.gain"), vec![d], ParamKind::NormGain),
            bias: self.add(format!("{name}.bias"), vec![d], ParamKind::NormBias),
        }
    }

    fn mlp(&mut self, name: &str, i: usize, h: usize, o: usize) -> Mlp {
        Mlp {
            fc1: self.linear(&format!("{name}.fc1"), i, h),
            fc2: self.linear(&format!("{name}.fc2"), h, o),
        }
    }

    fn block(&mut self, name: &str, d: usize, hidden: usize) -> Block {
        Block {
            norm1: self.norm(&format!("{name}.norm1"), d),
            qkv: self.linear(&format!("{name}.attn.qkv"), d, 3 * d),
            proj: self.linear(&format!("{name}.attn.proj"), d, d),
            norm2: self.norm(&format!("{name}.norm2"), d),
            mlp: self.mlp(&format!("{name}.mlp"), d, hidden, d),
        }
    }
}

impl Layout {
    pub fn new(cfg: &ModelConfig) -> Self {
        let d = cfg.embed_dim;
        let hidden = d * cfg.mlp_ratio;
        let mut b = Builder { specs: Vec::new() };
        let embed = b.mlp("patch_embed", 3, d, d);
        let enc_pos = b.mlp("encoder.pos_embed", 3, d, d);
        let encoder = (0..cfg.encoder_depth)
            .map(|i| b.block(&format!("encoder.blocks.{i}"), d, hidden))
            .collect();
        let dec_pos = b.mlp("decoder.pos_embed", 3, d, d);
        let decoder = (0..cfg.decoder_depth)
            .map(|i| b.block(&format!("decoder.blocks.{i}"), d, hidden))
            .collect();
        let mask_token = b.add("mask_token".into(), vec![d], ParamKind::Token);
        let gc_head = b.mlp("gc_head", d, d, 1);
        let recon = b.linear("recon_head", d, 3 * cfg.patch_size);
        Layout {
            specs: b.specs,
            embed,
            enc_pos,
            encoder,
            dec_pos,
            decoder,
            mask_token,
            gc_head,
            recon,
        }
    }

    pub fn len(&self) -> usize {
        self.specs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.specs.is_empty()
    }
}

/// One full parameter tree (encoder, decoder, complexity head, mask token,
/// reconstruction head) in canonical layout order.
#[derive(Clone, Debug, PartialEq)]
pub struct Gm3dParams<T> {
    pub config: ModelConfig,
    pub tensors: Vec<Tensor<T>>,
}

impl Gm3dParams<f32> {
    /// Xavier-uniform matrices, zero biases, unit norm gains, N(0, 0.02)
    /// mask token.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(config);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let token_dist = Normal::new(0.0f32, 0.02).unwrap();
        let tensors = layout
            .specs
            .iter()
            .map(|s| {
                let n: usize = s.shape.iter().product();
                let data: Vec<f32> = match s.kind {
                    ParamKind::Weight => {
                        let a = (6.0 / (s.shape[0] + s.shape[1]) as f32).sqrt();
                        (0..n).map(|_| rng.random_range(-a..a)).collect()
                    }
                    ParamKind::Bias | ParamKind::NormBias => vec![0.0; n],
                    ParamKind::NormGain => vec![1.0; n],
                    ParamKind::Token => (0..n).map(|_| token_dist.sample(&mut rng)).collect(),
                };
                Tensor::new(s.shape.clone(), data).expect("layout shape")
            })
            .collect();
        Ok(Gm3dParams {
            config: config.clone(),
            tensors,
        })
    }

    /// SHA-256 over the little-endian bytes of every tensor in order.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for t in &self.tensors {
            for v in t.data() {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}

impl<T: Scalar> Gm3dParams<T> {
    pub fn layout(&self) -> Layout {
        Layout::new(&self.config)
    }

    pub fn cast<U: Scalar>(&self) -> Gm3dParams<U> {
        Gm3dParams {
            config: self.config.clone(),
            tensors: self.tensors.iter().map(|t| t.cast()).collect(),
        }
    }

    pub fn num_elements(&self) -> usize {
        self.tensors.iter().map(|t| t.numel()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.is_finite())
    }

    pub fn same_structure(&self, other: &Self) -> bool {
        self.tensors.len() == other.tensors.len()
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|(a, b)| a.shape() == b.shape())
    }

    /// Checks tensor shapes against the layout implied by `config`.
    pub fn check_layout(&self) -> Result<()> {
        let layout = self.layout();
        if layout.len() != self.tensors.len() {
            return Err(Error::InvariantViolation(format!(
                "expected {} parameter tensors, found {}",
                layout.len(),
                self.tensors.len()
            )));
        }
        for (s, t) in layout.specs.iter().zip(&self.tensors) {
            if s.shape != t.shape() {
                return Err(Error::ShapeMismatch {
                    name: s.name.clone(),
                    expected: s.shape.clone(),
                    found: t.shape().to_vec(),
                });
            }
        }
        Ok(())
    }
}

/// Momentum update: every teacher element becomes `mu * teacher + (1 - mu) * student`,
/// evaluated as `teacher + (1 - mu) * (student - teacher)` so equal trees stay bitwise equal.
pub fn ema_update<T: Scalar>(teacher: &mut Gm3dParams<T>, student: &Gm3dParams<T>, mu: f64) -> Result<()> {
    if !teacher.same_structure(student) {
        return Err(Error::InvariantViolation(
            "teacher and student parameter trees differ in structure".into(),
        ));
    }
    let one_minus = T::from_f64_lossy(1.0 - mu);
    for (t, s) in teacher.tensors.iter_mut().zip(&student.tensors) {
        for (pt, &ps) in t.data_mut().iter_mut().zip(s.data()) {
            *pt += one_minus * (ps - *pt);
        }
    }
    Ok(())
}

/// Student, momentum teacher and frozen knowledge teacher.
#[derive(Clone, Debug, PartialEq)]
pub struct TriModelState {
    pub student: Gm3dParams<f32>,
    pub teacher: Gm3dParams<f32>,
    pub knowledge_teacher: Gm3dParams<f32>,
    pub momentum: f64,
}

impl TriModelState {
    /// The teacher starts as a copy of the student.
    pub fn new(student: Gm3dParams<f32>, knowledge_teacher: Gm3dParams<f32>, momentum: f64) -> Self {
        TriModelState {
            teacher: student.clone(),
            student,
            knowledge_teacher,
            momentum,
        }
    }

    pub fn ema_update(&mut self) -> Result<()> {
        ema_update(&mut self.teacher, &self.student, self.momentum)
    }
}
