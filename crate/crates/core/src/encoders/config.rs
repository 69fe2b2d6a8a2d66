use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Architecture and objective hyperparameters of the dual encoder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Width of the image transformer.
    pub vision_width: usize,
    /// Width of the text transformer.
    pub text_width: usize,
    /// Width of the joint embedding space.
    pub shared_width: usize,
    /// Number of transformer layers in each encoder.
    pub depth: usize,
    pub heads: usize,
    /// `(rows, cols)` of the patch grid.
    pub patch_grid: (usize, usize),
    /// Pixels per image side.
    pub image_size: usize,
    pub vocab_size: usize,
    /// Maximum number of word tokens (positional table size).
    pub context_length: usize,
    /// Text prompt tokens per layer.
    pub text_prompts: usize,
    /// Visual prompt tokens per layer.
    pub visual_prompts: usize,
    /// Number of leading layers that receive fresh prompts.
    pub prompt_depth: usize,
    /// Softmax temperature applied to cosine similarities.
    pub tau: f64,
    /// Weight of the text consistency term.
    pub lambda1: f64,
    /// Weight of the image consistency term.
    pub lambda2: f64,
    /// Forbid visual prompts from attending to each other.
    pub mask_prompts: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vision_width: 32,
            text_width: 32,
            shared_width: 16,
            depth: 4,
            heads: 2,
            patch_grid: (4, 4),
            image_size: 16,
            vocab_size: 32,
            context_length: 8,
            text_prompts: 4,
            visual_prompts: 32,
            prompt_depth: 4,
            tau: 0.01,
            lambda1: 3.0,
            lambda2: 4.0,
            mask_prompts: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.vision_width == 0 || self.text_width == 0 || self.shared_width == 0 {
            return fail("widths must be positive".into());
        }
        if self.heads == 0 {
            return fail("heads must be positive".into());
        }
        if !self.vision_width.is_multiple_of(self.heads)
            || !self.text_width.is_multiple_of(self.heads)
        {
            return fail(format!(
                "vision_width {} and text_width {} must be divisible by heads {}",
                self.vision_width, self.text_width, self.heads
            ));
        }
        if self.depth == 0 {
            return fail("depth must be at least 1".into());
        }
        if self.prompt_depth == 0 || self.prompt_depth > self.depth {
            return fail(format!(
                "prompt_depth {} must lie in 1..={}",
                self.prompt_depth, self.depth
            ));
        }
        let (r, c) = self.patch_grid;
        if r == 0 || c == 0 || self.image_size == 0 {
            return fail("patch grid and image size must be positive".into());
        }
        if !self.image_size.is_multiple_of(r) || !self.image_size.is_multiple_of(c) {
            return fail(format!(
                "image_size {} not divisible by patch grid {r}x{c}",
                self.image_size
            ));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return fail(format!("tau must be positive, got {}", self.tau));
        }
        if !(self.lambda1 >= 0.0 && self.lambda2 >= 0.0) {
            return fail("lambda1 and lambda2 must be non-negative".into());
        }
        if self.vocab_size == 0 || self.context_length == 0 {
            return fail("vocab_size and context_length must be positive".into());
        }
        Ok(())
    }

    pub fn num_patches(&self) -> usize {
        self.patch_grid.0 * self.patch_grid.1
    }

    /// `(height, width)` of one patch in pixels.
    pub fn patch_shape(&self) -> (usize, usize) {
        (
            self.image_size / self.patch_grid.0,
            self.image_size / self.patch_grid.1,
        )
    }

    pub fn patch_dim(&self) -> usize {
        let (h, w) = self.patch_shape();
        h * w
    }

    /// Tokens in the image sequence: class, patches, prompts.
    pub fn image_tokens(&self) -> usize {
        1 + self.num_patches() + self.visual_prompts
    }

    pub fn has_augmented_branch(&self) -> bool {
        self.visual_prompts > 0
    }
}
