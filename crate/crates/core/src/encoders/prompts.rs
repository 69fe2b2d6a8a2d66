use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::ModelConfig;
use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::rng::{self, Domain};

/// Standard deviation of the Gaussian prompt initialization.
pub const PROMPT_INIT_STD: f64 = 0.02;

/// Learnable prompt tokens, one `V x d_v` (resp. `T x d_t`) block per
/// prompted layer. Empty when the corresponding length is zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptSet {
    pub visual: Vec<Tensor>,
    pub text: Vec<Tensor>,
}

impl PromptSet {
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let normal = Normal::new(0.0, PROMPT_INIT_STD).expect("valid std");
        let mut r = rng::stream(seed, Domain::Prompts, 0);
        let mut block = |rows: usize, cols: usize| {
            let values = (0..rows * cols).map(|_| normal.sample(&mut r)).collect();
            Tensor::matrix(rows, cols, values).expect("shape")
        };
        let visual = if cfg.visual_prompts > 0 {
            (0..cfg.prompt_depth)
                .map(|_| block(cfg.visual_prompts, cfg.vision_width))
                .collect()
        } else {
            Vec::new()
        };
        let text = if cfg.text_prompts > 0 {
            (0..cfg.prompt_depth)
                .map(|_| block(cfg.text_prompts, cfg.text_width))
                .collect()
        } else {
            Vec::new()
        };
        Ok(Self { visual, text })
    }

    pub fn zeros(cfg: &ModelConfig) -> Self {
        let blocks = |len: usize, width: usize| {
            if len == 0 {
                Vec::new()
            } else {
                vec![Tensor::zeros(len, width); cfg.prompt_depth]
            }
        };
        Self {
            visual: blocks(cfg.visual_prompts, cfg.vision_width),
            text: blocks(cfg.text_prompts, cfg.text_width),
        }
    }

    pub fn check(&self, cfg: &ModelConfig) -> Result<()> {
        let check_side = |blocks: &[Tensor], len: usize, width: usize, side: &str| {
            let expected_layers = if len == 0 { 0 } else { cfg.prompt_depth };
            if blocks.len() != expected_layers {
                return Err(Error::Shape(format!(
                    "{side} prompts have {} layers, expected {expected_layers}",
                    blocks.len()
                )));
            }
            for b in blocks {
                if b.dims() != (len, width) {
                    return Err(Error::Shape(format!(
                        "{side} prompt block {:?}, expected {:?}",
                        b.dims(),
                        (len, width)
                    )));
                }
                if !b.is_finite() {
                    return Err(Error::InvalidArgument(format!("{side} prompts not finite")));
                }
            }
            Ok(())
        };
        check_side(&self.visual, cfg.visual_prompts, cfg.vision_width, "visual")?;
        check_side(&self.text, cfg.text_prompts, cfg.text_width, "text")
    }

    pub fn num_values(&self) -> usize {
        self.blocks().map(Tensor::len).sum()
    }

    /// Visual blocks then text blocks, in layer order.
    pub fn blocks(&self) -> impl Iterator<Item = &Tensor> {
        self.visual.iter().chain(&self.text)
    }

    pub fn blocks_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.visual.iter_mut().chain(self.text.iter_mut())
    }

    pub fn flat_values(&self) -> Vec<f64> {
        self.blocks()
            .flat_map(|t| t.values().iter().copied())
            .collect()
    }

    pub fn set_flat_values(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_values() {
            return Err(Error::Shape(format!(
                "{} values for {} prompt entries",
                flat.len(),
                self.num_values()
            )));
        }
        let mut offset = 0;
        for block in self.blocks_mut() {
            let n = block.len();
            block
                .values_mut()
                .copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        self.blocks().flat_map(Tensor::to_bytes).collect()
    }
}
