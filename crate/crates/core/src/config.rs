use serde::{Deserialize, Serialize};

use crate::error::{ModelError, Result};

/// Which of the change-perception mechanisms are active. Turning one off
/// gives the matching ablation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mechanisms {
    pub cea: bool,
    pub cpe: bool,
    pub lca: bool,
    /// Query the second phase for the second attention map instead of the first.
    pub symmetric_queries: bool,
}

impl Default for Mechanisms {
    fn default() -> Self {
        Mechanisms {
            cea: true,
            cpe: true,
            lca: true,
            symmetric_queries: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Square input side in pixels.
    pub image_size: usize,
    /// Side of the square stem patch; stage 1 runs at `image_size / stem_stride`.
    pub stem_stride: usize,
    /// Feature width, shared by every encoder stage and the change decoder.
    pub d_f: usize,
    pub n_queries: usize,
    pub decoder_layers: usize,
    /// Number of semantic change categories (excluding "unchanged").
    pub n_categories: usize,
    pub lm_width: usize,
    pub lm_layers: usize,
    pub lm_ffn: usize,
    pub max_seq: usize,
    pub vocab_size: usize,
    pub lora_rank: usize,
    pub lora_scale: f64,
    /// Number of temporal phases the model is built for.
    pub phases: usize,
    pub mechanisms: Mechanisms,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            image_size: 64,
            stem_stride: 1,
            d_f: 32,
            n_queries: 16,
            decoder_layers: 3,
            n_categories: 6,
            lm_width: 64,
            lm_layers: 2,
            lm_ffn: 128,
            max_seq: 512,
            vocab_size: 256,
            lora_rank: 4,
            lora_scale: 1.0,
            phases: 2,
            mechanisms: Mechanisms::default(),
        }
    }
}

impl ModelConfig {
    /// Resolution of encoder stage `stage` (1-based).
    pub fn stage_side(&self, stage: usize) -> usize {
        (self.image_size / self.stem_stride) >> (stage - 1)
    }

    /// Side of the visual token grid (stage 4).
    pub fn grid_side(&self) -> usize {
        self.stage_side(4)
    }

    pub fn visual_tokens(&self) -> usize {
        self.grid_side() * self.grid_side() * self.phases
    }

    pub fn validate(&self) -> Result<()> {
        let cfg = |m: String| Err(ModelError::Config(m));
        if self.stem_stride == 0 || self.image_size % (self.stem_stride * 8) != 0 {
            return cfg(format!(
                "image size {} must be a multiple of 8 * stem stride {}",
                self.image_size, self.stem_stride
            ));
        }
        if self.image_size > 128 {
            return cfg(format!("image size {} above 128", self.image_size));
        }
        if !(2..=3).contains(&self.phases) {
            return cfg(format!("phases must be 2 or 3, got {}", self.phases));
        }
        if self.d_f % 4 != 0 || self.d_f == 0 {
            return cfg(format!("d_f {} must be a positive multiple of 4", self.d_f));
        }
        if self.n_queries == 0 || self.lora_rank == 0 || self.lm_layers == 0 {
            return cfg("n_queries, lora_rank and lm_layers must be positive".into());
        }
        if self.vocab_size < 8 {
            return cfg(format!("vocabulary of {} is too small", self.vocab_size));
        }
        Ok(())
    }
}
