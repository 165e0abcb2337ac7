//! Transformer masked autoencoder with a complexity head.
//!
//! The same architecture is instantiated three times during training: the
//! student, the momentum teacher and the frozen knowledge teacher.

mod config;
mod forward;
mod params;

pub use config::{GcInput, ModelConfig};
pub use forward::{center_tensor, infer, patch_tensor, Decoded, Net, StudentOutput};
pub use params::{
    ema_update, Block, Gm3dParams, Layout, Linear, Mlp, Norm, ParamKind, ParamSpec, TriModelState,
};

/// Which tokens a set of complexity scores was computed from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScoreSource {
    /// Teacher encoder over the complete input.
    TeacherFull,
    /// Student decoder-input tokens (visible latents, then mask tokens).
    StudentTokens,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GcScores {
    pub values: Vec<f32>,
    pub source: ScoreSource,
}

impl GcScores {
    /// Scores of the teacher over every patch of `ps`.
    pub fn teacher(params: &Gm3dParams<f32>, layout: &Layout, ps: &crate::geometry::PatchSet) -> Self {
        let t = infer(params, layout, |net, g| net.teacher_scores(g, ps));
        GcScores {
            values: t.into_data(),
            source: ScoreSource::TeacherFull,
        }
    }
}
