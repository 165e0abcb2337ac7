use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

/// Tokens the complexity head reads.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GcInput {
    /// Teacher: encoder output of the full cloud. Student: decoder input
    /// `[Z^v, t_mask] + positions`.
    #[default]
    Tokens,
    /// Decoder output for both; the teacher decodes the full latent sequence
    /// without mask tokens.
    Decoder,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub embed_dim: usize,
    pub encoder_depth: usize,
    pub decoder_depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    /// Points per patch (K).
    pub patch_size: usize,
    /// Patches per cloud (N).
    pub n_patches: usize,
    pub mask_ratio: f64,
    pub gc_input: GcInput,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            embed_dim: 96,
            encoder_depth: 3,
            decoder_depth: 1,
            heads: 4,
            mlp_ratio: 4,
            patch_size: 8,
            n_patches: 16,
            mask_ratio: 0.6,
            gc_input: GcInput::Tokens,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 || self.heads == 0 || !self.embed_dim.is_multiple_of(self.heads) {
            return Err(invalid!(
                "embed_dim {} must be a positive multiple of heads {}",
                self.embed_dim,
                self.heads
            ));
        }
        if self.mlp_ratio == 0 || self.patch_size == 0 || self.n_patches == 0 {
            return Err(invalid!("mlp_ratio, patch_size and n_patches must be positive"));
        }
        if !(self.mask_ratio > 0.0 && self.mask_ratio < 1.0) {
            return Err(invalid!("mask_ratio {} must lie in (0, 1)", self.mask_ratio));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.heads
    }

    pub fn n_masked(&self) -> usize {
        crate::masking::n_masked(self.n_patches, self.mask_ratio)
    }
}
